"""Toy segmentation network, its EMA teacher copy, and pseudo-label construction.

The network is deliberately small: a few stride-1 'same' convolutions with ReLU
and a 1x1 class head, so output spatial size always equals input size and the
whole thing trains on a single CPU core.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 3
    num_classes: int = 4
    widths: tuple = (6, 6, 6)
    kernel: int = 3


@dataclass
class SegNet:
    config: NetConfig
    params: dict = field(default_factory=dict)  # name -> Tensor

    @classmethod
    def init(cls, config, rng):
        params = {}
        c_in = config.in_channels
        for i, width in enumerate(config.widths):
            fan_in = c_in * config.kernel ** 2
            params[f"conv{i}.w"] = Tensor(
                rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           (width, c_in, config.kernel, config.kernel)),
                requires_grad=True)
            params[f"conv{i}.b"] = Tensor(np.zeros(width), requires_grad=True)
            c_in = width
        params["head.w"] = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / c_in), (config.num_classes, c_in, 1, 1)),
            requires_grad=True)
        params["head.b"] = Tensor(np.zeros(config.num_classes), requires_grad=True)
        return cls(config, params)

    def forward(self, img):
        """img: Tensor or array, (C,H,W) or batched (B,C,H,W) -> logits Tensor."""
        x = img if isinstance(img, Tensor) else Tensor(img)
        c_axis = 0 if x.data.ndim == 3 else 1
        if x.shape[c_axis] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, "
                             f"got {x.shape[c_axis]}")
        for i in range(len(self.config.widths)):
            x = T.relu(T.conv2d(x, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"]))
        return T.conv2d(x, self.params["head.w"], self.params["head.b"])

    def head_param_names(self):
        return {"head.w", "head.b"}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


@dataclass
class EmaTeacher:
    net: SegNet
    momentum: float = 0.99

    @classmethod
    def from_student(cls, student, momentum=0.99):
        params = {k: Tensor(v.data.copy()) for k, v in student.params.items()}
        return cls(SegNet(student.config, params), momentum)

    def update(self, student, momentum=None):
        ema_update(self.net, student, self.momentum if momentum is None else momentum)


def ema_update(teacher_net, student, m):
    """theta_bar <- m * theta_bar + (1 - m) * theta, elementwise."""
    for name, p in student.params.items():
        t = teacher_net.params[name].data
        t *= m
        t += (1.0 - m) * p.data


def softmax_map(logits):
    """Channel softmax of a (C,H,W) logits tensor, returned as (C,H,W)."""
    c, h, w = logits.shape
    rows = T.softmax_rows(T.transpose(T.reshape(logits, (c, h * w))))
    return T.reshape(T.transpose(rows), (c, h, w))


def aligned_prob_rows(prob_map, transform):
    """Warp a probability map back to the canonical frame and renormalize rows.

    Returns (rows Tensor (H*W, C), valid mask (H,W)). Bilinear mixing keeps
    probabilities non-negative but not exactly normalized near validity borders.
    """
    aligned, valid = geometry.align_to_canonical(prob_map, transform)
    c, h, w = aligned.shape
    rows = T.transpose(T.reshape(aligned, (c, h * w)))
    return T.normalize_rows_sum(rows), valid


def _np_softmax_map(logits):
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def _np_aligned_rows(prob_map, transform):
    aligned, valid = geometry.align_to_canonical(prob_map, transform)
    c, h, w = aligned.shape
    rows = aligned.reshape(c, h * w).T
    rows = rows / np.maximum(rows.sum(axis=1, keepdims=True), 1e-12)
    return rows, valid


def pseudo_label_batch(teacher, pairs):
    """Pseudo labels for a whole mini-batch with one stacked teacher forward.

    Returns a list of (rows (H*W, C) constant array, valid (H,W) mask).
    """
    imgs = np.stack([p.x for p in pairs] + [p.x_prime for p in pairs])
    with T.no_grad():
        logits = teacher.net.forward(imgs).data
    b = len(pairs)
    out = []
    for i, pair in enumerate(pairs):
        r1, v1 = _np_aligned_rows(_np_softmax_map(logits[i]), pair.t)
        r2, v2 = _np_aligned_rows(_np_softmax_map(logits[b + i]), pair.t_prime)
        valid = v1 & v2
        if not valid.any():
            raise ValueError("pseudo_label: empty valid mask")
        out.append((0.5 * (r1 + r2), valid))
    return out


def pseudo_label(teacher, pair):
    """Average of the teacher's canonically aligned softmax maps over both views.

    Returns (rows (H*W, C) constant array, valid (H,W) doubly-valid mask).
    The result carries no graph edges: it is a constant downstream.
    """
    return pseudo_label_batch(teacher, [pair])[0]


# ---- checkpoint format: text header then raw little-endian float64 ----

def save_checkpoint(path, net):
    with open(path, "wb") as fh:
        fh.write(f"corrseg-checkpoint 1\n".encode())
        cfg = net.config
        fh.write(f"config {cfg.in_channels} {cfg.num_classes} "
                 f"{','.join(map(str, cfg.widths))} {cfg.kernel}\n".encode())
        for name, p in net.params.items():
            shape = ",".join(map(str, p.data.shape))
            fh.write(f"tensor {name} {shape}\n".encode())
        fh.write(b"data\n")
        for p in net.params.values():
            fh.write(p.data.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header = []
        while True:
            line = fh.readline().decode()
            if not line:
                raise ValueError("truncated checkpoint header")
            line = line.rstrip("\n")
            if line == "data":
                break
            header.append(line)
        if not header or not header[0].startswith("corrseg-checkpoint"):
            raise ValueError("not a corrseg checkpoint")
        _, in_ch, n_cls, widths, kernel = header[1].split()
        config = NetConfig(int(in_ch), int(n_cls),
                           tuple(int(x) for x in widths.split(",")), int(kernel))
        params = {}
        for line in header[2:]:
            _, name, shape = line.split()
            shape = tuple(int(x) for x in shape.split(","))
            count = int(np.prod(shape))
            data = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
            params[name] = Tensor(data.copy(), requires_grad=True)
    return SegNet(config, params)
