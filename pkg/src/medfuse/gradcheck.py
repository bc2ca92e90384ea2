"""Central-difference gradient checks for layers, fusion strategies, heads and the model.

Each check target exposes a scalar objective and its analytic gradient with
respect to a set of named arrays (parameters and differentiable inputs).
Layer-level objectives are ``sum(output * R)`` for a fixed random ``R``; the
model objective is its total multi-task loss.

Entries checked per array: all of them when the array has at most
``max_entries`` elements, otherwise ``max_entries`` distinct indices drawn
with :meth:`Rng.permutation` seeded by ``derive_seed(seed, array_index)``.
Relative error is ``|a - n| / max(1e-8, |a| + |n|)``.

The analytic gradient runs in float64. The finite-difference oracle runs on a
copy of the target whose checked arrays are cast to ``numpy.longdouble``, so
that rounding in the objective (about ``ulp(loss) / eps``) stays far below the
tolerance even for entries whose true gradient is tiny. Where ``longdouble``
is plain float64 the oracle is still correct, only noisier.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import heads as H
from .fusion import FUSION_KINDS, make_fusion
from .layers import (AttentionPool, BiLstm, Conv2d, Dense, Embedding, GlobalPool, LstmCell, Pool2d,
                     attention, attention_backward)
from .model import MODALITIES, Model, tiny_config
from .synthdata import CaseRecord
from .tensor import Rng, derive_seed, rng_normal

REL_FLOOR = 1e-8
PARAM_STD = 0.5
ORACLE_DTYPE = np.longdouble


@dataclass
class Target:
    """A checkable function of the arrays reachable from ``state``.

    ``arrays(state)`` names the arrays to perturb, ``objective(state)`` is the
    scalar and ``analytic(state)`` returns its gradient for every named array.
    ``state`` must survive :func:`copy.deepcopy`.
    """

    name: str
    state: Any
    arrays: Callable[[Any], dict[str, np.ndarray]]
    objective: Callable[[Any], Any]
    analytic: Callable[[Any], dict[str, np.ndarray]]


@dataclass
class GradCheckReport:
    tolerance: float
    epsilon: float
    worst: dict[str, float] = field(default_factory=dict)

    def record(self, group: str, err: float) -> None:
        self.worst[group] = max(self.worst.get(group, 0.0), err)

    @property
    def failures(self) -> list[str]:
        return [g for g, e in self.worst.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        return [f"{g}\t{e:.3e}\t{'ok' if e < self.tolerance else 'FAIL'}" for g, e in self.worst.items()]


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(REL_FLOOR, abs(a) + abs(n))


def oracle_copy(target: Target) -> tuple[Any, dict[str, np.ndarray]]:
    """Deep copy of the target state with its checked arrays in extended precision."""
    arrays = target.arrays(target.state)
    memo = {id(a): a.astype(ORACLE_DTYPE) for a in arrays.values()}
    state = copy.deepcopy(target.state, memo)
    return state, target.arrays(state)


def check_target(target: Target, report: GradCheckReport, seed: int, max_entries: int = 40) -> None:
    grads = target.analytic(target.state)
    state, arrays = oracle_copy(target)
    eps = ORACLE_DTYPE(report.epsilon)
    for idx, (name, arr) in enumerate(arrays.items()):
        flat = arr.reshape(-1)
        g = grads[name].reshape(-1)
        if g.shape != flat.shape:
            raise ValueError(f"{target.name}.{name}: gradient shape {grads[name].shape} != {arr.shape}")
        if flat.size <= max_entries:
            entries = range(flat.size)
        else:
            entries = Rng(derive_seed(seed, idx)).permutation(flat.size)[:max_entries]
        worst = 0.0
        for i in entries:
            old = flat[i]
            hi, lo = old + eps, old - eps
            flat[i] = hi
            lp = target.objective(state)
            flat[i] = lo
            lm = target.objective(state)
            flat[i] = old
            worst = max(worst, relative_error(float(g[i]), float((lp - lm) / (hi - lo))))
        report.record(f"{target.name}.{name}", worst)


def _normal(rng_seed: int, shape, std: float = 1.0) -> np.ndarray:
    return rng_normal(shape, rng_seed, std)


class _Seeds:
    """Hands out distinct derived seeds."""

    def __init__(self, seed: int):
        self.seed, self.k = seed, 0

    def __call__(self) -> int:
        self.k += 1
        return derive_seed(self.seed, self.k)


def _randomize(params: dict, seeds: _Seeds, std: float | None = None) -> None:
    std = PARAM_STD if std is None else std
    for p in params.values():
        p[...] = _normal(seeds(), p.shape, std)


def _layer_target(name: str, layer, x: np.ndarray, seeds: _Seeds) -> Target:
    """Objective ``sum(layer(x) * R)``; checks parameters and the input."""
    y, _ = layer.forward(x)
    r = _normal(seeds(), y.shape)

    def arrays(st):
        layer, x, _ = st
        return {**layer.params, "input": x}

    def objective(st):
        layer, x, r = st
        return (layer.forward(x)[0] * r).sum()

    def analytic(st):
        layer, x, r = st
        _, cache = layer.forward(x)
        dx, grads = layer.backward(cache, r)
        return {**grads, "input": dx}

    return Target(name, (layer, x, r), arrays, objective, analytic)


def layer_targets(seed: int) -> list[Target]:
    s = _Seeds(seed)
    rng = Rng(s())
    targets = []

    conv = Conv2d.init(rng, 2, 3, 3, "tanh")
    _randomize(conv.params, s)
    targets.append(_layer_target("layer.conv2d", conv, _normal(s(), (2, 6, 5)), s))
    relu_conv = Conv2d.init(rng, 2, 2, 2, "relu")
    _randomize(relu_conv.params, s)
    targets.append(_layer_target("layer.conv2d_relu", relu_conv, _normal(s(), (2, 4, 4)), s))
    targets.append(_layer_target("layer.maxpool", Pool2d("max", 2, 2), _normal(s(), (2, 5, 6)), s))
    targets.append(_layer_target("layer.avgpool", Pool2d("avg", 2, 1), _normal(s(), (2, 4, 5)), s))
    targets.append(_layer_target("layer.global_avg", GlobalPool("avg"), _normal(s(), (3, 4, 4)), s))
    targets.append(_layer_target("layer.global_max", GlobalPool("max"), _normal(s(), (3, 4, 4)), s))
    for act in ("identity", "tanh", "sigmoid"):
        dense = Dense.init(rng, 5, 4, act)
        _randomize(dense.params, s)
        targets.append(_layer_target(f"layer.dense_{act}", dense, _normal(s(), (5,)), s))
    bilstm = BiLstm.init(rng, 4, 3)
    _randomize(bilstm.params, s)
    targets.append(_layer_target("layer.bilstm", bilstm, _normal(s(), (5, 4)), s))
    pool = AttentionPool.init(rng, 6, 4)
    _randomize(pool.params, s)
    targets.append(_attention_pool_target(pool, _normal(s(), (5, 6)), s))
    targets.append(_lstm_step_target(rng, s))
    targets.append(_embedding_target(rng, s))
    targets.append(_attention_target(s))
    return targets


def _attention_pool_target(pool: AttentionPool, hs, s: _Seeds) -> Target:
    r = _normal(s(), (hs.shape[1],))

    def objective(st):
        pool, hs, r = st
        return pool.forward(hs)[0][0] @ r

    def analytic(st):
        pool, hs, r = st
        _, cache = pool.forward(hs)
        dhs, grads = pool.backward(cache, r)
        return {**grads, "input": dhs}

    return Target("layer.attention_pool", (pool, hs, r),
                  lambda st: {**st[0].params, "input": st[1]}, objective, analytic)


def _lstm_step_target(rng: Rng, s: _Seeds) -> Target:
    cell = LstmCell.init(rng, 4, 3)
    _randomize(cell.params, s)
    x, h0, c0 = _normal(s(), (4,)), _normal(s(), (3,)), _normal(s(), (3,))
    rh, rc = _normal(s(), (3,)), _normal(s(), (3,))

    def objective(st):
        cell, x, h0, c0 = st
        h, c, _ = cell.step(x, h0, c0)
        return h @ rh + c @ rc

    def analytic(st):
        cell, x, h0, c0 = st
        _, _, cache = cell.step(x, h0, c0)
        dx, dh, dc, grads = cell.step_backward(cache, rh, rc)
        return {**grads, "x": dx, "h_prev": dh, "c_prev": dc}

    return Target("layer.lstm_cell", (cell, x, h0, c0),
                  lambda st: {**st[0].params, "x": st[1], "h_prev": st[2], "c_prev": st[3]},
                  objective, analytic)


def _embedding_target(rng: Rng, s: _Seeds) -> Target:
    emb = Embedding.init(rng, 6, 3)
    tokens = [1, 4, 4, 0]
    r = _normal(s(), (len(tokens), 3))

    def analytic(emb):
        _, cache = emb.forward(tokens)
        return emb.backward(cache, r)[1]

    return Target("layer.embedding", emb, lambda emb: emb.params,
                  lambda emb: (emb.forward(tokens)[0] * r).sum(), analytic)


def _attention_target(s: _Seeds) -> Target:
    q, k, v = _normal(s(), (2, 3)), _normal(s(), (4, 3)), _normal(s(), (4, 2))
    r = _normal(s(), (2, 2))

    def analytic(st):
        _, _, cache = attention(*st)
        dq, dk, dv = attention_backward(cache, r)
        return {"q": dq, "k": dk, "v": dv}

    return Target("layer.attention", (q, k, v), lambda st: dict(zip("qkv", st)),
                  lambda st: (attention(*st)[0] * r).sum(), analytic)


def fusion_targets(seed: int) -> list[Target]:
    s = _Seeds(seed)
    rng = Rng(s())
    d_img, d_txt, d_z, state_dim, t_len = 4, 4, 3, 6, 4
    targets = []
    for kind in FUSION_KINDS + ("bilinear_lowrank",):
        base = "bilinear" if kind == "bilinear_lowrank" else kind
        rank = 2 if kind == "bilinear_lowrank" else None
        layer = make_fusion(base, rng, d_img, d_txt, d_z, state_dim=state_dim, rank=rank)
        _randomize(layer.params, s)
        v_img = _normal(s(), (d_img,))
        text = _normal(s(), (t_len, state_dim) if layer.uses_text_states else (d_txt,))
        r = _normal(s(), (layer.out_dim,))
        targets.append(_fusion_target(f"fusion.{kind}", layer, v_img, text, r))
    return targets


def _fusion_target(name, layer, v_img, text, r) -> Target:
    def analytic(st):
        layer, v_img, text = st
        _, cache = layer.forward(v_img, text)
        d_img, d_txt, grads = layer.backward(cache, r)
        return {**grads, "v_img": d_img, "text": d_txt}

    return Target(name, (layer, v_img, text),
                  lambda st: {**st[0].params, "v_img": st[1], "text": st[2]},
                  lambda st: st[0].forward(st[1], st[2])[0] @ r, analytic)


def _head_arrays(st):
    head, z = st
    return {**head.params, "z": z}


def head_targets(seed: int) -> list[Target]:
    s = _Seeds(seed)
    rng = Rng(s())
    d_z = 4
    targets = []

    cls = H.ClassifierHead.init(rng, d_z, 3)
    _randomize(cls.params, s)

    def cls_obj(st):
        head, z = st
        return H.cross_entropy(head.forward(z)[0], 1)

    def cls_grad(st):
        head, z = st
        probs, cache = head.forward(z)
        dz, grads = head.backward(cache, H.cross_entropy_grad_logits(probs, 1))
        return {**grads, "z": dz}

    targets.append(Target("head.classifier", (cls, _normal(s(), (d_z,))), _head_arrays, cls_obj, cls_grad))

    loc = H.LocalizerHead.init(rng, d_z, 2)
    _randomize(loc.params, s)
    box_t = np.array([0.1, 0.2, 0.6, 0.7])
    mask_t = np.array([[1.0, 0.0], [1.0, 1.0]])

    def loc_obj(st):
        head, z = st
        box, mask, _ = head.forward(z)
        return H.smooth_l1(box, box_t) + H.dice_loss(mask, mask_t)

    def loc_grad(st):
        head, z = st
        box, mask, cache = head.forward(z)
        dz, grads = head.backward(cache, H.smooth_l1_grad(box, box_t), H.dice_grad(mask, mask_t))
        return {**grads, "z": dz}

    targets.append(Target("head.localizer", (loc, _normal(s(), (d_z,))), _head_arrays, loc_obj, loc_grad))

    dec = H.DecoderHead.init(rng, d_z, 7, 3, 3)
    _randomize(dec.params, s)
    target = [4, 5, H.PAD, 6, H.EOS]

    def dec_grad(st):
        head, z = st
        _, _, cache = head.forward(z, target)
        dz, grads = head.backward(cache)
        return {**grads, "z": dz}

    targets.append(Target("head.decoder", (dec, _normal(s(), (d_z,))), _head_arrays,
                          lambda st: st[0].forward(st[1], target)[0], dec_grad))
    return targets


def random_case(seed: int, image_size: int = 8, mask_grid: int = 4, vocab_size: int = 10,
                report_len: int = 4, desc_len: int = 4, num_classes: int = 2) -> CaseRecord:
    """A random record with the extents of :func:`tiny_config`."""
    rng = Rng(seed)
    image = rng.uniform(image_size * image_size).reshape(1, image_size, image_size)
    report = [4 + rng.below(vocab_size - 4) for _ in range(report_len)]
    desc = [4 + rng.below(vocab_size - 4) for _ in range(desc_len - 1)] + [H.EOS]
    x1, y1 = 0.1 + 0.3 * rng.uniform(2)
    mask = (rng.uniform(mask_grid * mask_grid) > 0.5).astype(np.float64).reshape(mask_grid, mask_grid)
    return CaseRecord(id=0, image=image, report=report, label=rng.below(num_classes),
                      box=H.BBox(float(x1), float(y1), float(x1) + 0.4, float(y1) + 0.4),
                      mask=mask, description=desc)


def tiny_model(seed: int, modality: str = "both", fusion: str = "gated") -> Model:
    """Tiny model with parameters redrawn from N(0, 0.5^2) so every path carries gradient."""
    model = Model(tiny_config(modality=modality, fusion=fusion, seed=seed))
    _randomize(model.params, _Seeds(derive_seed(seed, 99)))
    return model


def model_target(seed: int, modality: str, fusion: str) -> Target:
    model = tiny_model(seed, modality, fusion)
    case = random_case(derive_seed(seed, 7))
    return Target(f"model.{modality}-{fusion}", model, lambda m: m.params,
                  lambda m: m.loss(case), lambda m: m.loss_and_grads(case)[1])


def grad_check(factories, tolerance: float = 1e-4, epsilon: float = 1e-5, seeds=(0, 1, 2),
               max_entries: int = 40) -> GradCheckReport:
    """Run every target produced by each ``factory(seed)`` for every seed."""
    report = GradCheckReport(tolerance, epsilon)
    for seed in seeds:
        for factory in factories:
            for target in factory(seed):
                check_target(target, report, seed, max_entries)
    return report


def default_factories(modalities=("both",), fusions=FUSION_KINDS):
    def models(seed):
        return [model_target(seed, m, f) for m in modalities for f in fusions]

    return [layer_targets, fusion_targets, head_targets, models]


__all__ = ["GradCheckReport", "Target", "check_target", "default_factories", "fusion_targets",
           "grad_check", "head_targets", "layer_targets", "model_target", "random_case",
           "relative_error", "tiny_model", "MODALITIES"]
