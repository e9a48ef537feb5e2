"""Training loop: two-view pipeline, optimizer, variants, and experiment suite.

Each step prepares a batch (all randomness and teacher passes happen here),
then computes losses as a pure function of the student parameters, so the whole
step can be gradient-checked and re-derived by scalar oracles.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import augment, data, geometry, losses, model, sampler
from . import tensor as T
from .tensor import Tensor

VARIANTS = ("full", "no_cc", "nce", "no_view_coherent_cutmix",
            "same_geometric_aug", "supervised_only")


@dataclass
class TrainConfig:
    dataset_dir: str = ""
    labeled_ratio: float = 0.125
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    base_lr: float = 0.2
    extractor_lr_scale: float = 0.1
    momentum: float = 0.9
    poly_power: float = 0.9
    total_steps: int = 3000
    ema_momentum: float = 0.99
    w_unsup: float = 0.1
    w_cc: float = 0.1
    n_sampled: int = 256
    label_smoothing: float = 0.1
    tau: float = 0.1
    variant: str = "full"
    noise_rate: float = 0.0
    seed: int = 0
    eval_every: int = 500
    eval_count: int = 128
    scale_min: float = 0.9
    scale_max: float = 1.1
    translate_max: float = 0.1
    flip_prob: float = 0.5
    jitter_brightness: float = 0.2
    contrast_min: float = 0.8
    contrast_max: float = 1.25
    cutmix_prob: float = 1.0
    cutmix_area_min: float = 0.2
    cutmix_area_max: float = 0.5
    ramp_frac: float = 0.3   # unsupervised-weight ramp-up, fraction of total steps
    net_widths: tuple = (6, 6, 6)

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not (0.0 < self.labeled_ratio <= 1.0):
            raise ValueError("labeled_ratio out of range")
        for name in ("momentum", "ema_momentum", "noise_rate", "w_unsup", "w_cc"):
            v = getattr(self, name)
            if v < 0.0 or (name in ("momentum", "ema_momentum", "noise_rate") and v > 1.0):
                raise ValueError(f"{name} out of range: {v}")

    def augment_config(self):
        return augment.AugmentConfig(
            view=geometry.ViewTransformConfig((self.scale_min, self.scale_max),
                                              self.translate_max, self.flip_prob),
            jitter=augment.ColorJitterConfig(self.jitter_brightness,
                                             (self.contrast_min, self.contrast_max)),
            cutmix=augment.CutMixConfig(self.cutmix_prob,
                                        (self.cutmix_area_min, self.cutmix_area_max)))


def _parse_float(raw):
    if "/" in raw:
        num, den = raw.split("/")
        return float(num) / float(den)
    return float(raw)


def config_from_file(path, allow_extra=("variants", "noise_rates")):
    kv = data.read_config(path)
    defaults = TrainConfig()
    typed = {}
    for f in fields(TrainConfig):
        if f.name in kv:
            raw = kv.pop(f.name)
            default = getattr(defaults, f.name)
            if isinstance(default, float):
                typed[f.name] = _parse_float(raw)
            elif isinstance(default, int):
                typed[f.name] = int(raw)
            elif isinstance(default, tuple):
                typed[f.name] = tuple(int(x) for x in raw.split(","))
            else:
                typed[f.name] = raw
    extra = {k: v for k, v in kv.items() if k not in allow_extra}
    if extra:
        raise ValueError(f"unknown config keys: {sorted(extra)}")
    cfg = replace(defaults, **typed)
    cfg.validate()
    return cfg


@dataclass
class RunRecord:
    config: TrainConfig
    steps: list = field(default_factory=list)   # (step, l_sup, l_unsup, l_cc, total, lr)
    evals: list = field(default_factory=list)   # (step, miou)
    final_miou: float = float("nan")
    wall_time: float = 0.0
    error: str = ""
    student: object = None

    def mean_losses(self):
        if not self.steps:
            return (float("nan"),) * 3
        arr = np.array([(s[1], s[2], s[3]) for s in self.steps])
        return tuple(arr.mean(axis=0))


@dataclass
class UnlabeledItem:
    pair: augment.ViewPair
    pseudo_rows: np.ndarray    # (H*W, C) soft labels for the consistency loss
    target_rows: np.ndarray    # (H*W, C) sampling/correlation targets (noise applied)
    hard: np.ndarray           # (H*W,) hard pseudo classes (noise applied)
    eligible: np.ndarray       # (H*W,) doubly-valid mask


@dataclass
class StepBatch:
    labeled: list                      # (img, label) pairs
    unlabeled: list                    # UnlabeledItem per pair, empty if supervised-only
    sample_pair: np.ndarray = None     # (N,) pair index of each sampled pixel
    sample_pixel: np.ndarray = None    # (N,) flat pixel index
    target_rows: np.ndarray = None     # (N, C) constant correlation targets


def _mix_canonical_rows(rows_a, rows_b, box, h, w):
    a = rows_a.reshape(h, w, -1)
    b = rows_b.reshape(h, w, -1)
    return augment.paste_canonical(a.transpose(2, 0, 1),
                                   b.transpose(2, 0, 1), box).transpose(1, 2, 0) \
                  .reshape(h * w, -1)


def prepare_step(cfg, dataset, teacher, streams):
    """Assemble one training batch: augmentation, pseudo labels, CutMix, noise,
    and category-normalized sampling. Consumes RNG; runs the teacher (no grad)."""
    labeled_ids = [i for i, flag in dataset.manifest if flag]
    unlabeled_ids = [i for i, flag in dataset.manifest if not flag] or labeled_ids
    pick = streams["labeled"].choice(len(labeled_ids), size=cfg.batch_labeled)
    labeled = [(dataset.images[labeled_ids[i]], dataset.labels[labeled_ids[i]])
               for i in pick]
    batch = StepBatch(labeled, [])
    if cfg.variant == "supervised_only":
        return batch

    acfg = cfg.augment_config()
    h, w = dataset.config.height, dataset.config.width
    c = teacher.net.config.num_classes
    pick_u = streams["unlabeled"].choice(len(unlabeled_ids), size=cfg.batch_unlabeled)
    pairs = []
    for i in pick_u:
        img = dataset.images[unlabeled_ids[i]]
        rng = streams["augment"]
        if cfg.variant == "same_geometric_aug":
            t = geometry.random_view_transform(rng, acfg.view)
            x, _ = geometry.warp(img, t)
            pair = augment.ViewPair(
                augment.color_jitter(x, rng, acfg.jitter),
                augment.color_jitter(x.copy(), rng, acfg.jitter),
                t, t, geometry.align_to_canonical(np.zeros((1, h, w)), t)[1])
        else:
            pair = augment.make_view_pair(img, rng, acfg)
        pairs.append(pair)
    labeled_views = model.pseudo_label_batch(teacher, pairs)
    pseudos = [rows for rows, _ in labeled_views]
    valids = [valid for _, valid in labeled_views]

    n_pairs = len(pairs)
    for i in range(n_pairs):
        donor = (i + 1) % n_pairs
        rng = streams["augment"]
        if cfg.variant == "no_view_coherent_cutmix":
            mixed = augment.incoherent_cutmix(pairs[i], pairs[donor], rng,
                                              acfg.cutmix, donor)
            box = mixed.cutmix.box if mixed.cutmix else augment.Box(0, 0, 0, 0)
        elif rng.random() < acfg.cutmix.prob and n_pairs > 1:
            box = augment.sample_cutmix_box(rng, h, w, acfg.cutmix)
            mixed = augment.view_coherent_cutmix(pairs[i], pairs[donor], box, donor)
        else:
            mixed, box = pairs[i], augment.Box(0, 0, 0, 0)
        if not box.empty:
            pseudo_rows = _mix_canonical_rows(pseudos[i], pseudos[donor], box, h, w)
            valid = np.where(box.mask(h, w), valids[donor], valids[i])
        else:
            pseudo_rows, valid = pseudos[i], valids[i]
        # the consistency loss needs the intersection with the mixed views' coverage
        eligible = (valid & mixed.valid).ravel()
        target_rows = pseudo_rows.copy()
        hard = np.argmax(target_rows, axis=1)
        if cfg.noise_rate > 0.0:
            flip = streams["noise"].random(h * w) < cfg.noise_rate
            shift = streams["noise"].integers(1, c, size=h * w)
            new_cls = (hard + shift) % c
            hard = np.where(flip, new_cls, hard)
            one_hot = np.eye(c)[hard[flip]]
            target_rows[flip] = one_hot
        batch.unlabeled.append(UnlabeledItem(mixed, pseudo_rows, target_rows,
                                             hard, eligible))

    # category-normalized sampling over the whole mini-batch
    all_hard = np.concatenate([u.hard for u in batch.unlabeled])
    all_elig = np.concatenate([u.eligible for u in batch.unlabeled])
    spec = sampler.make_spec(cfg.n_sampled, all_hard, all_elig, c)
    flat = sampler.sample_pixels(spec, streams["sample"])
    batch.sample_pair = flat // (h * w)
    batch.sample_pixel = flat % (h * w)
    order = np.argsort(batch.sample_pair, kind="stable")
    batch.sample_pair = batch.sample_pair[order]
    batch.sample_pixel = batch.sample_pixel[order]
    batch.target_rows = np.stack([batch.unlabeled[p].target_rows[q]
                                  for p, q in zip(batch.sample_pair, batch.sample_pixel)])
    return batch


def _prob_rows_batch(student, imgs):
    """Stacked forward over (B,C,H,W) images -> per-image softmax prob tensors
    of shape (H,W,C)."""
    b, c_in, h, w = imgs.shape
    logits = student.forward(imgs)
    c = logits.shape[1]
    rows = T.softmax_rows(T.reshape(T.permute(logits, (0, 2, 3, 1)), (b * h * w, c)))
    prob4 = T.reshape(rows, (b, h, w, c))
    return [T.select(prob4, i) for i in range(b)]


def compute_losses(cfg, student, batch):
    """Differentiable losses for one prepared batch. Pure in the parameters."""
    imgs = np.stack([img for img, _ in batch.labeled])
    b, _, h, w = imgs.shape
    logits = student.forward(imgs)
    c = logits.shape[1]
    logit_rows = T.reshape(T.permute(logits, (0, 2, 3, 1)), (b * h * w, c))
    flat_labels = np.concatenate([np.asarray(lab).ravel() for _, lab in batch.labeled])
    l_sup = losses.supervised_ce_rows(logit_rows, flat_labels, cfg.label_smoothing)
    if not batch.unlabeled:
        zero = Tensor(0.0)
        return l_sup, zero, zero

    views = np.stack([u.pair.x for u in batch.unlabeled]
                     + [u.pair.x_prime for u in batch.unlabeled])
    probs = _prob_rows_batch(student, views)
    n_pairs = len(batch.unlabeled)
    unsup_terms, counts = [], []
    rows_by_pair = []
    for i, item in enumerate(batch.unlabeled):
        map1 = T.permute(probs[i], (2, 0, 1))
        map2 = T.permute(probs[n_pairs + i], (2, 0, 1))
        rows1, _ = model.aligned_prob_rows(map1, item.pair.t)
        rows2, _ = model.aligned_prob_rows(map2, item.pair.t_prime)
        rows_by_pair.append((rows1, rows2))
        valid_idx = np.flatnonzero(item.eligible)
        n = valid_idx.size
        unsup_terms.append(T.scale(
            losses.consistency_loss(rows1, rows2, item.pseudo_rows, valid_idx), n))
        counts.append(n)
    l_unsup = T.scale(_sum_tensors(unsup_terms), 1.0 / sum(counts))

    if cfg.variant in ("no_cc",):
        return l_sup, l_unsup, Tensor(0.0)

    f_chunks, fp_chunks = [], []
    for p in range(len(batch.unlabeled)):
        idx = batch.sample_pixel[batch.sample_pair == p]
        if idx.size == 0:
            continue
        rows1, rows2 = rows_by_pair[p]
        f_chunks.append(T.take_rows(rows1, idx))
        fp_chunks.append(T.take_rows(rows2, idx))
    f = T.concat_rows(f_chunks)
    f_prime = T.concat_rows(fp_chunks)

    if cfg.variant == "nce":
        cls = np.array([batch.unlabeled[p].hard[q]
                        for p, q in zip(batch.sample_pair, batch.sample_pixel)])
        l_cc = T.scale(T.add(losses.info_nce(f, cls, cfg.tau),
                             losses.info_nce(f_prime, cls, cfg.tau)), 0.5)
    else:
        cbatch = losses.CorrelationBatch(f, f_prime, batch.target_rows,
                                         np.stack([batch.sample_pair,
                                                   batch.sample_pixel], axis=1))
        l_cc = losses.correlation_consistency(cbatch)
    return l_sup, l_unsup, l_cc


def _sum_tensors(terms):
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


def ramp_weight(step, total, frac):
    """Sigmoid-shaped ramp-up factor in [0, 1] over the first frac of training.

    The teacher starts out random, so the unsupervised losses are phased in
    while its pseudo labels are still settling.
    """
    if frac <= 0.0:
        return 1.0
    ramp_steps = frac * total
    if step >= ramp_steps:
        return 1.0
    t = step / ramp_steps
    return float(np.exp(-5.0 * (1.0 - t) ** 2))


def poly_lr(base, step, total, power=0.9):
    """Polynomial decay: base * (1 - step/total)^power."""
    if not 0 <= step <= total:
        raise ValueError("step outside [0, total]")
    return base * (1.0 - step / total) ** power


def sgd_momentum_step(params, lrs, momentum, velocities):
    """v <- momentum*v + g; theta <- theta - lr*v, with per-parameter lr."""
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        v = velocities.setdefault(name, np.zeros_like(p.data))
        v *= momentum
        v += g
        p.data -= lrs[name] * v


def train_step(cfg, student, teacher, dataset, streams, velocities, step):
    batch = prepare_step(cfg, dataset, teacher, streams)
    student.zero_grad()
    l_sup, l_unsup, l_cc = compute_losses(cfg, student, batch)
    ramp = ramp_weight(step, cfg.total_steps, cfg.ramp_frac)
    w_cc = 0.0 if cfg.variant == "no_cc" else cfg.w_cc * ramp
    total = losses.total_loss(l_sup, l_unsup, l_cc, cfg.w_unsup * ramp, w_cc)
    total.backward()
    lr = poly_lr(cfg.base_lr, step, cfg.total_steps, cfg.poly_power)
    head = student.head_param_names()
    lrs = {name: lr if name in head else lr * cfg.extractor_lr_scale
           for name in student.params}
    sgd_momentum_step(student.params, lrs, cfg.momentum, velocities)
    teacher.update(student, cfg.ema_momentum)
    return (step, l_sup.item(), l_unsup.item(), l_cc.item(), total.item(), lr)


def evaluate(net, eval_dataset, chunk=32):
    """Per-pixel argmax predictions accumulated into a confusion matrix."""
    cm = data.ConfusionMatrix.empty(net.config.num_classes)
    n = len(eval_dataset.images)
    with T.no_grad():
        for start in range(0, n, chunk):
            imgs = np.stack(eval_dataset.images[start:start + chunk])
            logits = net.forward(imgs).data
            pred = np.argmax(logits, axis=1)
            for i, label in enumerate(eval_dataset.labels[start:start + chunk]):
                cm.add(label, pred[i])
    return data.miou(cm)[0]


def make_eval_dataset(train_dataset, count=128):
    cfg = replace(train_dataset.config, count=count)
    return data.generate_dataset(cfg, train_dataset.seed + 10_000)


def run_experiment(cfg, dataset=None, eval_dataset=None):
    """One full training run; returns its RunRecord."""
    cfg.validate()
    start = time.time()
    if dataset is None:
        dataset = data.read_dataset(cfg.dataset_dir)
    if eval_dataset is None:
        eval_dataset = make_eval_dataset(dataset, cfg.eval_count)
    data.split(dataset, cfg.labeled_ratio, cfg.seed)
    root = np.random.SeedSequence(cfg.seed)
    keys = ("init", "labeled", "unlabeled", "augment", "sample", "noise")
    streams = {k: np.random.default_rng(s)
               for k, s in zip(keys, root.spawn(len(keys)))}
    net_cfg = model.NetConfig(num_classes=dataset.config.num_classes,
                              widths=tuple(cfg.net_widths))
    student = model.SegNet.init(net_cfg, streams["init"])
    teacher = model.EmaTeacher.from_student(student, cfg.ema_momentum)
    velocities = {}
    record = RunRecord(cfg)
    try:
        for step in range(cfg.total_steps):
            entry = train_step(cfg, student, teacher, dataset, streams,
                               velocities, step)
            record.steps.append(entry)
            if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.total_steps:
                record.evals.append((step + 1, evaluate(student, eval_dataset)))
        record.final_miou = max(m for _, m in record.evals)
    except FloatingPointError as exc:
        record.error = f"aborted: {exc}"
    record.wall_time = time.time() - start
    record.student = student
    return record


CSV_HEADER = ["variant", "ratio", "seed", "noise_rate", "kind", "step",
              "miou", "final_miou", "mean_l_sup", "mean_l_unsup", "mean_l_cc"]


def _fmt(x):
    return f"{x:.10g}" if isinstance(x, float) else str(x)


def run_suite(configs, out_csv, dataset=None, eval_dataset=None):
    """Run every config, append aggregate mean/std rows per (variant, noise) group."""
    records = []
    rows = []
    for cfg in configs:
        rec = run_experiment(cfg, dataset, eval_dataset)
        records.append(rec)
        ml = rec.mean_losses()
        base = [cfg.variant, cfg.labeled_ratio, cfg.seed, cfg.noise_rate]
        if rec.error:
            rows.append(base + ["error", "", "", "", "", "", rec.error])
            continue
        for step, m in rec.evals:
            rows.append(base + ["eval", step, m, "", "", "", ""])
        rows.append(base + ["final", "", "", rec.final_miou, ml[0], ml[1], ml[2]])
    groups = {}
    for cfg, rec in zip(configs, records):
        if rec.error:
            continue
        groups.setdefault((cfg.variant, cfg.labeled_ratio, cfg.noise_rate),
                          []).append(rec.final_miou)
    for (variant, ratio, eta), vals in groups.items():
        arr = np.array(vals)
        rows.append([variant, ratio, "all", eta, "aggregate_mean", "", "",
                     float(arr.mean()), "", "", ""])
        rows.append([variant, ratio, "all", eta, "aggregate_std", "", "",
                     float(arr.std()), "", "", ""])
    if out_csv:
        os.makedirs(os.path.dirname(os.path.abspath(out_csv)), exist_ok=True)
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for row in rows:
                writer.writerow([_fmt(x) for x in row])
    return records, rows
