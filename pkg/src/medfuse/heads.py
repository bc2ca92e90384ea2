"""Task heads (classification, localisation, description generation) and their losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Dense, Embedding, LstmCell
from .tensor import Rng, softmax

PAD, BOS, EOS, UNK = 0, 1, 2, 3
PROB_FLOOR = 1e-12
DICE_EPS = 1e-6


@dataclass(frozen=True)
class BBox:
    """Normalised box corners with ``x1 < x2`` and ``y1 < y2``."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(0.0 <= c <= 1.0 for c in coords):
            raise ValueError(f"box coordinates must lie in [0, 1]: {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"box corners out of order: {coords}")

    @classmethod
    def from_prediction(cls, raw) -> "BBox":
        """Order the corners of a raw 4-vector so it is always a valid box."""
        x1, y1, x2, y2 = (min(max(float(v), 0.0), 1.0) for v in raw)
        x1, x2 = _open_interval(min(x1, x2), max(x1, x2))
        y1, y2 = _open_interval(min(y1, y2), max(y1, y2))
        return cls(x1, y1, x2, y2)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2])

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


def _open_interval(lo: float, hi: float) -> tuple[float, float]:
    """Widen a degenerate ``lo == hi`` by one ulp, staying inside [0, 1]."""
    if lo < hi:
        return lo, hi
    if hi < 1.0:
        return lo, float(np.nextafter(hi, 2.0))
    return float(np.nextafter(lo, -1.0)), hi


class ClassifierHead:
    """Linear logits over ``num_classes``; softmax applied at inference and in the loss."""

    def __init__(self, dense: Dense):
        if dense.n_out < 2:
            raise ValueError("a classifier needs at least two classes")
        self.dense = dense
        self.params = dense.params

    @classmethod
    def init(cls, rng: Rng, d_z: int, num_classes: int):
        return cls(Dense.init(rng, d_z, num_classes))

    def forward(self, z):
        logits, cache = self.dense.forward(z)
        return softmax(logits), cache

    def backward(self, cache, dlogits):
        return self.dense.backward(cache, dlogits)


def classify(head: ClassifierHead, z):
    probs, _ = head.forward(z)
    return probs, int(np.argmax(probs))


def cross_entropy(probs, label: int) -> float:
    if not 0 <= label < len(probs):
        raise ValueError(f"label {label} out of range for {len(probs)} classes")
    return -np.log(np.maximum(probs[label], PROB_FLOOR))


def cross_entropy_grad_logits(probs, label: int) -> np.ndarray:
    """Gradient of ``cross_entropy(softmax(logits), label)`` w.r.t. the logits."""
    if probs[label] <= PROB_FLOOR:
        return np.zeros_like(probs)
    g = probs.copy()
    g[label] -= 1.0
    return g


def _box_vec(box) -> np.ndarray:
    return box.as_array() if isinstance(box, BBox) else np.asarray(box)


def smooth_l1(pred, target) -> float:
    d = np.abs(_box_vec(pred) - _box_vec(target))
    return np.where(d < 1.0, 0.5 * d * d, d - 0.5).sum()


def smooth_l1_grad(pred, target) -> np.ndarray:
    d = _box_vec(pred) - _box_vec(target)
    return np.where(np.abs(d) < 1.0, d, np.sign(d))


def dice_loss(pred_mask, target_mask) -> float:
    pred_mask, target_mask = np.asarray(pred_mask), np.asarray(target_mask)
    if pred_mask.shape != target_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {target_mask.shape}")
    inter = (pred_mask * target_mask).sum()
    denom = pred_mask.sum() + target_mask.sum()
    return 1.0 - (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)


def dice_grad(pred_mask, target_mask) -> np.ndarray:
    inter = (pred_mask * target_mask).sum()
    denom = pred_mask.sum() + target_mask.sum() + DICE_EPS
    return -(2.0 * target_mask * denom - (2.0 * inter + DICE_EPS)) / (denom * denom)


class LocalizerHead:
    """Sigmoid box corners and a sigmoid ``g x g`` coarse mask."""

    def __init__(self, box_dense: Dense, mask_dense: Dense):
        g = int(round(np.sqrt(mask_dense.n_out)))
        if box_dense.n_out != 4 or g * g != mask_dense.n_out:
            raise ValueError("localizer needs 4 box outputs and a square mask")
        self.box_dense, self.mask_dense, self.grid = box_dense, mask_dense, g
        self.params = {**{f"box.{k}": v for k, v in box_dense.params.items()},
                       **{f"mask.{k}": v for k, v in mask_dense.params.items()}}

    @classmethod
    def init(cls, rng: Rng, d_z: int, grid: int):
        return cls(Dense.init(rng, d_z, 4, "sigmoid"), Dense.init(rng, d_z, grid * grid, "sigmoid"))

    def forward(self, z):
        box, bcache = self.box_dense.forward(z)
        mask, mcache = self.mask_dense.forward(z)
        return box, mask.reshape(self.grid, self.grid), (bcache, mcache)

    def backward(self, cache, dbox, dmask):
        bcache, mcache = cache
        dz_b, gb = self.box_dense.backward(bcache, dbox)
        dz_m, gm = self.mask_dense.backward(mcache, dmask.reshape(-1))
        grads = {**{f"box.{k}": v for k, v in gb.items()}, **{f"mask.{k}": v for k, v in gm.items()}}
        return dz_b + dz_m, grads


class DecoderHead:
    """LSTM description decoder conditioned on ``z`` at every step.

    Step input is ``[embed(previous token); z]``; the first previous token is BOS.
    """

    def __init__(self, cell: LstmCell, embed: Embedding, out_dense: Dense):
        d_emb = embed.params["table"].shape[1]
        if cell.input_dim <= d_emb or out_dense.n_in != cell.hidden:
            raise ValueError("decoder cell/embedding/output extents are inconsistent")
        if out_dense.n_out != embed.vocab_size or embed.vocab_size <= max(PAD, BOS, EOS):
            raise ValueError("decoder vocabulary must cover PAD, BOS and EOS")
        self.cell, self.embed, self.out_dense = cell, embed, out_dense
        self.d_emb = d_emb
        self.d_z = cell.input_dim - d_emb
        self.params = {**{f"cell.{k}": v for k, v in cell.params.items()},
                       "embed.table": embed.params["table"],
                       **{f"out.{k}": v for k, v in out_dense.params.items()}}

    @classmethod
    def init(cls, rng: Rng, d_z: int, vocab_size: int, d_emb: int, hidden: int):
        return cls(LstmCell.init(rng, d_emb + d_z, hidden), Embedding.init(rng, vocab_size, d_emb),
                   Dense.init(rng, hidden, vocab_size))

    @property
    def vocab_size(self) -> int:
        return self.embed.vocab_size

    def forward(self, z, target_tokens):
        """Teacher-forced pass; returns ``(loss, per_step_probs, cache)``."""
        target = np.asarray(target_tokens, dtype=np.int64)
        if target.ndim != 1 or target.size < 1:
            raise ValueError("target sequence must be non-empty")
        if target.min() < 0 or target.max() >= self.vocab_size:
            raise ValueError(f"target token out of range [0, {self.vocab_size})")
        prev = np.concatenate([[BOS], target[:-1]])
        emb, ecache = self.embed.forward(prev)
        xs = np.concatenate([emb, np.broadcast_to(z, (len(prev), z.shape[0]))], axis=1)
        hs, lcache = self.cell.scan(xs)
        logits, ocache = self.out_dense.forward(hs)
        probs = softmax(logits, axis=1)
        keep = target != PAD
        n = max(int(keep.sum()), 1)
        picked = probs[np.arange(target.size), target]
        loss = -np.log(np.maximum(picked[keep], PROB_FLOOR)).sum() / n
        return loss, probs, (target, keep, n, probs, ecache, lcache, ocache)

    def backward(self, cache):
        """Gradient of the mean token loss; returns ``(dz, grads)``."""
        target, keep, n, probs, ecache, lcache, ocache = cache
        dlogits = probs.copy()
        rows = np.arange(target.size)
        dlogits[rows, target] -= 1.0
        live = keep & (probs[rows, target] > PROB_FLOOR)
        dlogits *= live[:, None] / n
        dhs, gout = self.out_dense.backward(ocache, dlogits)
        dxs, gcell = self.cell.scan_backward(lcache, dhs)
        _, gemb = self.embed.backward(ecache, dxs[:, :self.d_emb])
        dz = dxs[:, self.d_emb:].sum(axis=0)
        grads = {**{f"cell.{k}": v for k, v in gcell.items()}, "embed.table": gemb["table"],
                 **{f"out.{k}": v for k, v in gout.items()}}
        return dz, grads

    def greedy(self, z, max_len: int) -> list[int]:
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        h = np.zeros(self.cell.hidden)
        c = np.zeros(self.cell.hidden)
        table = self.embed.params["table"]
        out: list[int] = []
        prev = BOS
        for _ in range(max_len):
            h, c, _ = self.cell.step(np.concatenate([table[prev], z]), h, c)
            logits, _ = self.out_dense.forward(h)
            # PAD and BOS are never emitted
            logits[[PAD, BOS]] = -np.inf
            tok = int(np.argmax(logits))
            if tok == EOS:
                break
            out.append(tok)
            prev = tok
        return out


def decode_teacher_forced(head: DecoderHead, z, target_tokens):
    loss, probs, _ = head.forward(z, target_tokens)
    return loss, probs


def decode_greedy(head: DecoderHead, z, max_len: int) -> list[int]:
    return head.greedy(z, max_len)
