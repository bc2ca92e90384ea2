"""SGD with momentum, the per-case training loop, and JSON checkpoints."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig
from .tensor import Rng, derive_seed

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def sgd_step(params: dict, grads: dict, lr: float, momentum: float, state: dict) -> None:
    """In place: ``v <- momentum * v + g``; ``theta <- theta - lr * v``."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(p)
        v *= momentum
        v += g
        p -= lr * v


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def train(model: Model, corpus, config: ModelConfig | None = None, on_epoch=None):
    """Per-case SGD over ``config.epochs`` epochs; returns ``(model, epoch_losses)``.

    Epoch ``e`` visits cases in ``Rng(derive_seed(seed, e)).permutation(n)`` order.
    ``epoch_losses[e]`` is the mean total loss seen during that epoch.
    """
    config = config or model.config
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot train on an empty corpus")
    state: dict = {}
    losses = []
    for epoch in range(config.epochs):
        order = Rng(derive_seed(config.seed, epoch)).permutation(len(corpus))
        running = 0.0
        for idx in order:
            out = model.compute_loss(corpus[idx])
            running += float(out.total)
            clip_global_norm(out.grads, config.clip_norm)
            sgd_step(model.params, out.grads, config.lr, config.momentum, state)
        losses.append(running / len(corpus))
        log.info("epoch %d mean loss %.6f", epoch + 1, losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
    return model, losses


def save_checkpoint(model: Model, path) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "params": {name: {"shape": list(p.shape), "values": [float(v) for v in p.reshape(-1)]}
                   for name, p in model.params.items()},
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n", encoding="utf-8")


def load_checkpoint(path) -> Model:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict) or doc.get("version") != CHECKPOINT_VERSION:
        found = doc.get("version") if isinstance(doc, dict) else None
        raise ValueError(f"checkpoint version {found!r} is not supported (expected {CHECKPOINT_VERSION})")
    model = Model(ModelConfig.from_dict(doc["config"]))
    stored = doc.get("params", {})
    for name, p in model.params.items():
        if name not in stored:
            raise ValueError(f"checkpoint is missing parameter {name}")
        entry = stored[name]
        shape = tuple(entry["shape"])
        values = np.asarray(entry["values"], dtype=np.float64)
        if shape != p.shape or values.size != p.size:
            raise ValueError(f"parameter {name} has shape {shape} in checkpoint, model expects {p.shape}")
        p[...] = values.reshape(shape)
    extra = set(stored) - set(model.params)
    if extra:
        raise ValueError(f"checkpoint has unknown parameters: {', '.join(sorted(extra))}")
    return model
