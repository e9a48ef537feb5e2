"""Synthetic segmentation data, on-disk formats, splits, and the mIoU metric.

Images are composed of a handful of random shapes (rectangles, ellipses,
stripes) over a background, with class-correlated but overlapping colors and
Gaussian pixel noise, giving a long-tailed class distribution where the
background dominates. Everything is deterministic per seed, and training reads
the same 8-bit quantized values that land on disk.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class DataConfig:
    count: int = 512
    height: int = 48
    width: int = 48
    num_classes: int = 4
    noise_sigma: float = 0.08
    color_jitter: float = 0.22   # per-shape deviation from the class base color
    bg_jitter: float = 0.08      # background deviation from its base gray
    min_shapes: int = 2
    max_shapes: int = 5
    illum_brightness: float = 0.15      # per-image global brightness shift
    illum_contrast_min: float = 0.85    # per-image global contrast factor
    illum_contrast_max: float = 1.18
    rare_class_weight: float = 1.0      # last class drawn this x as often as others

    def validate(self):
        if not (32 <= self.height <= 96 and 32 <= self.width <= 96):
            raise ValueError("image size must be in [32, 96]")
        if not (3 <= self.num_classes <= 8):
            raise ValueError("num_classes must be in [3, 8]")
        if self.count < 1 or self.min_shapes < 1 or self.max_shapes < self.min_shapes:
            raise ValueError("bad count/shape-count config")


@dataclass
class Dataset:
    images: list            # (3,H,W) float64 in [0,1]
    labels: list            # (H,W) int arrays in [0, C)
    manifest: list = field(default_factory=list)  # (id, is_labeled)
    seed: int = 0
    config: DataConfig = DataConfig()


def class_palette(num_classes):
    """Base RGB color per class; background is mid gray, others on a hue wheel."""
    colors = [np.array([0.45, 0.45, 0.45])]
    for c in range(1, num_classes):
        phase = 2.0 * np.pi * (c - 1) / (num_classes - 1)
        rgb = 0.5 + 0.28 * np.array([np.cos(phase),
                                     np.cos(phase - 2.0 * np.pi / 3.0),
                                     np.cos(phase + 2.0 * np.pi / 3.0)])
        colors.append(rgb)
    return np.stack(colors)


def _paint_shape(label, rng, cls, h, w):
    kind = rng.integers(0, 3)
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 0:  # rectangle
        bh = int(rng.integers(h // 6, h // 2))
        bw = int(rng.integers(w // 6, w // 2))
        y0 = int(rng.integers(0, h - bh))
        x0 = int(rng.integers(0, w - bw))
        mask = (yy >= y0) & (yy < y0 + bh) & (xx >= x0) & (xx < x0 + bw)
    elif kind == 1:  # ellipse
        cy = rng.uniform(0.2 * h, 0.8 * h)
        cx = rng.uniform(0.2 * w, 0.8 * w)
        ry = rng.uniform(h / 10, h / 4)
        rx = rng.uniform(w / 10, w / 4)
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    else:  # stripe
        angle = rng.uniform(0, np.pi)
        offset = rng.uniform(-0.5, 0.5) * max(h, w)
        width = rng.uniform(2.0, max(h, w) / 6)
        d = (yy - h / 2) * np.cos(angle) - (xx - w / 2) * np.sin(angle) - offset
        mask = np.abs(d) <= width / 2
    label[mask] = cls
    return mask


def generate_image(rng, cfg, palette):
    h, w = cfg.height, cfg.width
    label = np.zeros((h, w), dtype=np.int64)
    img = np.empty((3, h, w))
    bg_color = np.clip(palette[0] + rng.uniform(-cfg.bg_jitter, cfg.bg_jitter, 3), 0, 1)
    img[:] = bg_color[:, None, None]
    n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    weights = np.ones(cfg.num_classes - 1)
    weights[-1] = cfg.rare_class_weight
    weights /= weights.sum()
    for _ in range(n_shapes):
        cls = int(rng.choice(np.arange(1, cfg.num_classes), p=weights))
        color = np.clip(palette[cls] + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3), 0, 1)
        mask = _paint_shape(label, rng, cls, h, w)
        img[:, mask] = color[:, None]
    # Global illumination varies per image; segmentation must be invariant to it.
    contrast = rng.uniform(cfg.illum_contrast_min, cfg.illum_contrast_max)
    brightness = rng.uniform(-cfg.illum_brightness, cfg.illum_brightness)
    img = (img - 0.5) * contrast + 0.5 + brightness
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0), label


def quantize(img):
    """8-bit round trip applied at write time; training sees these values."""
    return np.round(np.clip(img, 0, 1) * 255.0) / 255.0


def generate_dataset(cfg, seed):
    cfg.validate()
    palette = class_palette(cfg.num_classes)
    images, labels = [], []
    for i in range(cfg.count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        img, label = generate_image(rng, cfg, palette)
        images.append(quantize(img))
        labels.append(label)
    return Dataset(images, labels, [(i, False) for i in range(cfg.count)], seed, cfg)


def split(dataset, ratio, seed):
    """Mark floor(ratio * count) uniformly chosen ids as labeled."""
    count = len(dataset.images)
    n_labeled = int(np.floor(ratio * count))
    if n_labeled < 1:
        raise ValueError(f"ratio {ratio} leaves no labeled image out of {count}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
    chosen = set(rng.choice(count, size=n_labeled, replace=False).tolist())
    manifest = [(i, i in chosen) for i in range(count)]
    dataset.manifest = manifest
    return manifest


# ---- mIoU ----

@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C, C), rows = ground truth, cols = prediction

    @classmethod
    def empty(cls, num_classes):
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    def add(self, truth, pred):
        c = self.counts.shape[0]
        truth = np.asarray(truth).ravel()
        pred = np.asarray(pred).ravel()
        keep = (truth >= 0) & (truth < c)
        self.counts += np.bincount(c * truth[keep] + pred[keep],
                                   minlength=c * c).reshape(c, c)


def miou(cm):
    """Mean IoU plus the per-class vector; zero-denominator classes excluded."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    denom = counts.sum(axis=0) + counts.sum(axis=1) - tp
    present = denom > 0
    if not present.any():
        raise ValueError("miou: all class denominators are zero")
    iou = np.full(counts.shape[0], np.nan)
    iou[present] = tp[present] / denom[present]
    return float(np.mean(iou[present])), iou


# ---- on-disk formats ----

def write_ppm(path, img):
    """(3,H,W) float in [0,1] -> binary P6, 8-bit."""
    arr = np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8)
    h, w = arr.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        magic, dims, maxval, data = _read_pnm(fh)
    if magic != "P6":
        raise ValueError(f"{path}: expected P6")
    w, h = dims
    arr = np.frombuffer(data, dtype=np.uint8, count=3 * h * w).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pgm(path, label):
    arr = np.asarray(label).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        magic, dims, maxval, data = _read_pnm(fh)
    if magic != "P5":
        raise ValueError(f"{path}: expected P5")
    w, h = dims
    return np.frombuffer(data, dtype=np.uint8, count=h * w).reshape(h, w).astype(np.int64)


def _read_pnm(fh):
    tokens = []
    while len(tokens) < 4:
        line = fh.readline()
        if not line:
            raise ValueError("truncated PNM header")
        line = line.split(b"#")[0]
        tokens.extend(line.split())
    magic = tokens[0].decode()
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return magic, (w, h), maxval, fh.read()


def write_dataset(dataset, out_dir):
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    for i, (img, label) in enumerate(zip(dataset.images, dataset.labels)):
        write_ppm(os.path.join(out_dir, "images", f"{i:04d}.ppm"), img)
        write_pgm(os.path.join(out_dir, "labels", f"{i:04d}.pgm"), label)
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        for i, is_labeled in dataset.manifest:
            fh.write(f"{i:04d}\t{'labeled' if is_labeled else 'unlabeled'}\n")
    cfg = dataset.config
    write_config(os.path.join(out_dir, "dataset.cfg"), {
        "count": cfg.count, "height": cfg.height, "width": cfg.width,
        "num_classes": cfg.num_classes, "noise_sigma": cfg.noise_sigma,
        "color_jitter": cfg.color_jitter, "bg_jitter": cfg.bg_jitter,
        "min_shapes": cfg.min_shapes,
        "max_shapes": cfg.max_shapes,
        "illum_brightness": cfg.illum_brightness,
        "illum_contrast_min": cfg.illum_contrast_min,
        "illum_contrast_max": cfg.illum_contrast_max,
        "rare_class_weight": cfg.rare_class_weight,
        "seed": dataset.seed,
    })


def read_dataset(out_dir):
    kv = read_config(os.path.join(out_dir, "dataset.cfg"))
    cfg = DataConfig(count=int(kv["count"]), height=int(kv["height"]),
                     width=int(kv["width"]), num_classes=int(kv["num_classes"]),
                     noise_sigma=float(kv["noise_sigma"]),
                     color_jitter=float(kv["color_jitter"]),
                     bg_jitter=float(kv.get("bg_jitter", 0.08)),
                     min_shapes=int(kv["min_shapes"]), max_shapes=int(kv["max_shapes"]),
                     illum_brightness=float(kv.get("illum_brightness", 0.0)),
                     illum_contrast_min=float(kv.get("illum_contrast_min", 1.0)),
                     illum_contrast_max=float(kv.get("illum_contrast_max", 1.0)),
                     rare_class_weight=float(kv.get("rare_class_weight", 1.0)))
    manifest = []
    with open(os.path.join(out_dir, "manifest.txt")) as fh:
        for line in fh:
            ident, flag = line.strip().split("\t")
            manifest.append((int(ident), flag == "labeled"))
    images, labels = [], []
    for i, _ in manifest:
        images.append(read_ppm(os.path.join(out_dir, "images", f"{i:04d}.ppm")))
        labels.append(read_pgm(os.path.join(out_dir, "labels", f"{i:04d}.pgm")))
    return Dataset(images, labels, manifest, int(kv["seed"]), cfg)


# ---- flat `key = value` config files ----

def write_config(path, kv):
    with open(path, "w") as fh:
        for key, value in kv.items():
            fh.write(f"{key} = {value}\n")


def read_config(path):
    kv = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#")[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {line!r}")
            key, value = line.split("=", 1)
            kv[key.strip()] = value.strip()
    return kv
