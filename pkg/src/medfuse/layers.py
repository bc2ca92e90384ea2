"""Differentiable layers with hand-written backward passes.

Every layer exposes ``params`` (name -> float64 array, updated in place by
the optimiser), ``forward(x) -> (y, cache)`` and
``backward(cache, dy) -> (dx, grads)`` where ``grads`` mirrors ``params``.
Caches are plain tuples owned by the caller.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Rng, glorot_uniform, map_unary, softmax, softmax_backward, unary_grad


class Layer:
    params: dict[str, np.ndarray]

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}


def backward(layer: Layer, cache, upstream):
    """Generic entry point: dispatch to ``layer.backward``."""
    return layer.backward(cache, upstream)


def _check_upstream(dy: np.ndarray, shape) -> None:
    if dy.shape != tuple(shape):
        raise ValueError(f"upstream shape {dy.shape} does not match forward output {tuple(shape)}")


class Conv2d(Layer):
    """Valid, stride-1 cross-correlation followed by an activation.

    ``y[c, i, j] = act(sum_{c', m, n} w[c, c', m, n] * x[c', i + m, j + n] + b[c])``
    """

    def __init__(self, kernels: np.ndarray, bias: np.ndarray, activation: str = "relu"):
        if kernels.ndim != 4 or bias.shape != (kernels.shape[0],):
            raise ValueError(f"bad conv parameter shapes {kernels.shape}, {bias.shape}")
        self.params = {"kernels": kernels, "bias": bias}
        self.activation = activation

    @classmethod
    def init(cls, rng: Rng, c_in: int, c_out: int, k: int, activation: str = "relu"):
        kernels = glorot_uniform(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k)
        return cls(kernels, np.zeros(c_out), activation)

    def forward(self, x: np.ndarray):
        w, b = self.params["kernels"], self.params["bias"]
        c_out, c_in, kh, kw = w.shape
        if x.ndim != 3 or x.shape[0] != c_in:
            raise ValueError(f"conv expects input [{c_in}, H, W], got {x.shape}")
        if x.shape[1] < kh or x.shape[2] < kw:
            raise ValueError(f"kernel {kh}x{kw} larger than input {x.shape[1]}x{x.shape[2]}")
        patches = sliding_window_view(x, (kh, kw), axis=(1, 2))  # [Ci, Ho, Wo, kh, kw]
        pre = np.tensordot(w, patches, axes=([1, 2, 3], [0, 3, 4])) + b[:, None, None]
        y = map_unary(self.activation, pre)
        return y, (x, patches, y)

    def backward(self, cache, dy: np.ndarray):
        x, patches, y = cache
        _check_upstream(dy, y.shape)
        w = self.params["kernels"]
        _, _, kh, kw = w.shape
        dpre = unary_grad(self.activation, y, dy)
        dw = np.tensordot(dpre, patches, axes=([1, 2], [1, 2]))
        db = dpre.sum(axis=(1, 2))
        ho, wo = dpre.shape[1:]
        dx = np.zeros_like(x)
        for m in range(kh):
            for n in range(kw):
                dx[:, m:m + ho, n:n + wo] += np.tensordot(w[:, :, m, n], dpre, axes=([0], [0]))
        return dx, {"kernels": dw, "bias": db}


class Pool2d(Layer):
    """Max or average pooling over ``window x window`` patches with a stride."""

    def __init__(self, kind: str, window: int, stride: int):
        if kind not in ("max", "avg"):
            raise ValueError(f"unknown pool kind {kind!r}")
        if window < 1 or stride < 1:
            raise ValueError("window and stride must be >= 1")
        self.kind, self.window, self.stride = kind, window, stride
        self.params = {}

    def forward(self, x: np.ndarray):
        k, s = self.window, self.stride
        c, h, w = x.shape
        if h < k or w < k:
            raise ValueError(f"pool window {k} larger than input {h}x{w}")
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
        ho, wo = win.shape[1:3]
        flat = win.reshape(c, ho, wo, k * k)
        if self.kind == "max":
            idx = flat.argmax(axis=-1)
            y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        else:
            idx = None
            y = flat.mean(axis=-1)
        return y, (x.shape, idx)

    def backward(self, cache, dy: np.ndarray):
        shape, idx = cache
        c, h, w = shape
        k, s = self.window, self.stride
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        _check_upstream(dy, (c, ho, wo))
        dx = np.zeros(shape)
        if self.kind == "max":
            rows = (np.arange(ho) * s)[None, :, None] + idx // k
            cols = (np.arange(wo) * s)[None, None, :] + idx % k
            chans = np.broadcast_to(np.arange(c)[:, None, None], idx.shape)
            np.add.at(dx, (chans, rows, cols), dy)
        else:
            share = dy / (k * k)
            for m in range(k):
                for n in range(k):
                    dx[:, m:m + s * (ho - 1) + 1:s, n:n + s * (wo - 1) + 1:s] += share
        return dx, {}


def pool2d_forward(kind: str, x: np.ndarray, window: int, stride: int):
    return Pool2d(kind, window, stride).forward(x)


class GlobalPool(Layer):
    """Per-channel spatial average or maximum: ``[C, H, W] -> [C]``."""

    def __init__(self, kind: str = "avg"):
        if kind not in ("max", "avg"):
            raise ValueError(f"unknown global pool kind {kind!r}")
        self.kind = kind
        self.params = {}

    def forward(self, x: np.ndarray):
        c = x.shape[0]
        flat = x.reshape(c, -1)
        if self.kind == "avg":
            return flat.mean(axis=1), (x.shape, None)
        idx = flat.argmax(axis=1)
        return flat[np.arange(c), idx], (x.shape, idx)

    def backward(self, cache, dy: np.ndarray):
        shape, idx = cache
        c = shape[0]
        _check_upstream(dy, (c,))
        size = int(np.prod(shape[1:]))
        if self.kind == "avg":
            dflat = np.repeat((dy / size)[:, None], size, axis=1)
        else:
            dflat = np.zeros((c, size))
            dflat[np.arange(c), idx] = dy
        return dflat.reshape(shape), {}


def global_pool(kind: str, x: np.ndarray) -> np.ndarray:
    return GlobalPool(kind).forward(x)[0]


class Dense(Layer):
    """``y = act(W x + b)``; ``x`` may be a vector or a stack of row vectors."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray, activation: str = "identity"):
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ValueError(f"bad dense parameter shapes {weight.shape}, {bias.shape}")
        self.params = {"weight": weight, "bias": bias}
        self.activation = activation

    @classmethod
    def init(cls, rng: Rng, n_in: int, n_out: int, activation: str = "identity"):
        return cls(glorot_uniform(rng, (n_out, n_in), n_in, n_out), np.zeros(n_out), activation)

    @property
    def n_in(self) -> int:
        return self.params["weight"].shape[1]

    @property
    def n_out(self) -> int:
        return self.params["weight"].shape[0]

    def forward(self, x: np.ndarray):
        w, b = self.params["weight"], self.params["bias"]
        if x.shape[-1] != w.shape[1] or x.ndim > 2:
            raise ValueError(f"dense expects input [..., {w.shape[1]}], got {x.shape}")
        y = map_unary(self.activation, x @ w.T + b)
        return y, (x, y)

    def backward(self, cache, dy: np.ndarray):
        x, y = cache
        _check_upstream(dy, y.shape)
        dpre = unary_grad(self.activation, y, dy)
        if x.ndim == 1:
            dw = np.outer(dpre, x)
            db = dpre.copy()
        else:
            dw = dpre.T @ x
            db = dpre.sum(axis=0)
        return dpre @ self.params["weight"], {"weight": dw, "bias": db}


class Embedding(Layer):
    def __init__(self, table: np.ndarray):
        self.params = {"table": table}

    @classmethod
    def init(cls, rng: Rng, vocab_size: int, dim: int):
        return cls(glorot_uniform(rng, (vocab_size, dim), vocab_size, dim))

    @property
    def vocab_size(self) -> int:
        return self.params["table"].shape[0]

    def forward(self, tokens):
        ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
        v = self.vocab_size
        if ids.size and (ids.min() < 0 or ids.max() >= v):
            raise ValueError(f"token id out of range [0, {v}): {ids.tolist()}")
        return self.params["table"][ids], ids

    def backward(self, cache, dy: np.ndarray):
        ids = cache
        _check_upstream(dy, (ids.size, self.params["table"].shape[1]))
        dtable = np.zeros_like(self.params["table"])
        np.add.at(dtable, ids, dy)
        return None, {"table": dtable}


def embedding_lookup(layer: Embedding, tokens) -> np.ndarray:
    return layer.forward(tokens)[0]


class LstmCell(Layer):
    """Four-gate LSTM cell; gate blocks are stacked in the order i, f, o, g.

    ``i, f, o = sigmoid(W x + U h + b)`` blocks, ``g = tanh(...)``,
    ``c' = f * c + i * g`` and ``h' = o * tanh(c')``.
    """

    def __init__(self, w: np.ndarray, u: np.ndarray, b: np.ndarray):
        h = u.shape[1]
        if w.shape[0] != 4 * h or u.shape != (4 * h, h) or b.shape != (4 * h,):
            raise ValueError(f"inconsistent LSTM shapes W{w.shape} U{u.shape} b{b.shape}")
        self.params = {"W": w, "U": u, "b": b}

    @classmethod
    def init(cls, rng: Rng, d: int, h: int, forget_bias: float = 1.0):
        w = glorot_uniform(rng, (4 * h, d), d, h)
        u = glorot_uniform(rng, (4 * h, h), h, h)
        b = np.zeros(4 * h)
        b[h:2 * h] = forget_bias
        return cls(w, u, b)

    @property
    def hidden(self) -> int:
        return self.params["U"].shape[1]

    @property
    def input_dim(self) -> int:
        return self.params["W"].shape[1]

    def _gates(self, pre: np.ndarray) -> np.ndarray:
        h = self.hidden
        act = np.empty_like(pre)
        act[..., :3 * h] = 1.0 / (1.0 + np.exp(-pre[..., :3 * h]))
        act[..., 3 * h:] = np.tanh(pre[..., 3 * h:])
        return act

    def step(self, x, h_prev, c_prev):
        p = self.params
        if x.shape != (self.input_dim,) or h_prev.shape != (self.hidden,) or c_prev.shape != (self.hidden,):
            raise ValueError(f"LSTM step extent mismatch: x{x.shape} h{h_prev.shape} c{c_prev.shape}")
        gates = self._gates(p["W"] @ x + p["U"] @ h_prev + p["b"])
        h = self.hidden
        i, f, o, g = gates[:h], gates[h:2 * h], gates[2 * h:3 * h], gates[3 * h:]
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h_t = o * tc
        return h_t, c, (x, h_prev, c_prev, gates, tc)

    def step_backward(self, cache, dh, dc):
        x, h_prev, c_prev, gates, tc = cache
        h = self.hidden
        i, f, o, g = gates[:h], gates[h:2 * h], gates[2 * h:3 * h], gates[3 * h:]
        dc = dc + dh * o * (1.0 - tc * tc)
        dgates = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dh * tc * o * (1.0 - o),
            dc * i * (1.0 - g * g),
        ])
        p = self.params
        grads = {"W": np.outer(dgates, x), "U": np.outer(dgates, h_prev), "b": dgates}
        return p["W"].T @ dgates, p["U"].T @ dgates, dc * f, grads

    def forward(self, inputs):
        x, h_prev, c_prev = inputs
        h_t, c_t, cache = self.step(x, h_prev, c_prev)
        return (h_t, c_t), cache

    def backward(self, cache, upstream):
        dh, dc = upstream
        dx, dh_prev, dc_prev, grads = self.step_backward(cache, dh, dc)
        return (dx, dh_prev, dc_prev), grads

    def scan(self, xs: np.ndarray, reverse: bool = False):
        """Run over ``xs`` [T, d] from zero state; returns hidden states [T, h]."""
        p = self.params
        t_len, h = xs.shape[0], self.hidden
        if xs.ndim != 2 or xs.shape[1] != self.input_dim:
            raise ValueError(f"LSTM expects input [T, {self.input_dim}], got {xs.shape}")
        xw = xs @ p["W"].T + p["b"]
        u = p["U"]
        dtype = xw.dtype
        hs = np.zeros((t_len, h), dtype)
        cs = np.zeros((t_len, h), dtype)
        gates = np.zeros((t_len, 4 * h), dtype)
        h_prev = np.zeros(h, dtype)
        c_prev = np.zeros(h, dtype)
        order = range(t_len - 1, -1, -1) if reverse else range(t_len)
        for t in order:
            gt = self._gates(xw[t] + u @ h_prev)
            c_prev = gt[h:2 * h] * c_prev + gt[:h] * gt[3 * h:]
            h_prev = gt[2 * h:3 * h] * np.tanh(c_prev)
            gates[t], cs[t], hs[t] = gt, c_prev, h_prev
        return hs, (xs, hs, cs, gates, reverse)

    def scan_backward(self, cache, dhs: np.ndarray):
        xs, hs, cs, gates, reverse = cache
        _check_upstream(dhs, hs.shape)
        t_len, h = hs.shape
        u = self.params["U"]
        dgates = np.zeros_like(gates)
        h_prevs = np.zeros_like(hs)
        dh_next = np.zeros(h)
        dc_next = np.zeros(h)
        order = list(range(t_len - 1, -1, -1) if reverse else range(t_len))
        for pos in range(t_len - 1, -1, -1):
            t = order[pos]
            prev = order[pos - 1] if pos > 0 else None
            c_prev = cs[prev] if prev is not None else np.zeros(h)
            if prev is not None:
                h_prevs[t] = hs[prev]
            gt = gates[t]
            i, f, o, g = gt[:h], gt[h:2 * h], gt[2 * h:3 * h], gt[3 * h:]
            tc = np.tanh(cs[t])
            dh = dhs[t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dg = dgates[t]
            dg[:h] = dc * g * i * (1.0 - i)
            dg[h:2 * h] = dc * c_prev * f * (1.0 - f)
            dg[2 * h:3 * h] = dh * tc * o * (1.0 - o)
            dg[3 * h:] = dc * i * (1.0 - g * g)
            dh_next = u.T @ dg
            dc_next = dc * f
        grads = {"W": dgates.T @ xs, "U": dgates.T @ h_prevs, "b": dgates.sum(axis=0)}
        return dgates @ self.params["W"], grads


def lstm_cell_step(cell: LstmCell, x_t, h_prev, c_prev):
    return cell.step(x_t, h_prev, c_prev)


class BiLstm(Layer):
    """Left-to-right and right-to-left scans concatenated per step: ``[T, 2h]``."""

    def __init__(self, forward_cell: LstmCell, backward_cell: LstmCell):
        if forward_cell.params["W"].shape != backward_cell.params["W"].shape:
            raise ValueError("forward and backward cells must share d and h")
        self.fwd, self.bwd = forward_cell, backward_cell
        self.params = {}
        for prefix, cell in (("fwd", forward_cell), ("bwd", backward_cell)):
            for k, v in cell.params.items():
                self.params[f"{prefix}.{k}"] = v

    @classmethod
    def init(cls, rng: Rng, d: int, h: int):
        return cls(LstmCell.init(rng, d, h), LstmCell.init(rng, d, h))

    @property
    def hidden(self) -> int:
        return self.fwd.hidden

    def forward(self, xs: np.ndarray):
        if xs.ndim != 2 or xs.shape[0] < 1:
            raise ValueError(f"BiLSTM needs a non-empty [T, d] sequence, got {xs.shape}")
        hf, cf = self.fwd.scan(xs)
        hb, cb = self.bwd.scan(xs, reverse=True)
        return np.concatenate([hf, hb], axis=1), (cf, cb)

    def backward(self, cache, dhs: np.ndarray):
        cf, cb = cache
        h = self.hidden
        _check_upstream(dhs, (cf[0].shape[0], 2 * h))
        dxf, gf = self.fwd.scan_backward(cf, dhs[:, :h])
        dxb, gb = self.bwd.scan_backward(cb, dhs[:, h:])
        grads = {f"fwd.{k}": v for k, v in gf.items()}
        grads.update({f"bwd.{k}": v for k, v in gb.items()})
        return dxf + dxb, grads


def bilstm_forward(net: BiLstm, xs: np.ndarray):
    return net.forward(xs)


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d_k)) v``.

    Returns ``(out, weights, cache)``; each row of ``weights`` sums to one.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("attention expects 2-D q, k, v")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ValueError(f"attention extent mismatch: q{q.shape} k{k.shape} v{v.shape}")
    scale = 1.0 / np.sqrt(q.shape[1])
    weights = softmax(q @ k.T * scale, axis=1)
    return weights @ v, weights, (q, k, v, weights, scale)


def attention_backward(cache, dout: np.ndarray):
    q, k, v, weights, scale = cache
    _check_upstream(dout, (q.shape[0], v.shape[1]))
    dv = weights.T @ dout
    dscores = softmax_backward(weights, dout @ v.T, axis=1) * scale
    return dscores @ k, dscores.T @ q, dv


class AttentionPool(Layer):
    """Additive attention pooling over a sequence of states.

    ``score_t = w . tanh(W_a s_t)``, ``alpha = softmax(score)``, ``c = sum_t alpha_t s_t``.
    """

    def __init__(self, w_a: np.ndarray, w: np.ndarray):
        if w_a.ndim != 2 or w.shape != (w_a.shape[0],):
            raise ValueError(f"bad attention-pool shapes {w_a.shape}, {w.shape}")
        self.params = {"W_a": w_a, "w": w}

    @classmethod
    def init(cls, rng: Rng, state_dim: int, attn_dim: int):
        w_a = glorot_uniform(rng, (attn_dim, state_dim), state_dim, attn_dim)
        w = glorot_uniform(rng, (attn_dim,), attn_dim, 1)
        return cls(w_a, w)

    def forward(self, hs: np.ndarray):
        if hs.ndim != 2 or hs.shape[0] < 1:
            raise ValueError(f"attention pool needs a non-empty [T, d] sequence, got {hs.shape}")
        u = np.tanh(hs @ self.params["W_a"].T)
        alphas = softmax(u @ self.params["w"], axis=0)
        return (alphas @ hs, alphas), (hs, u, alphas)

    def backward(self, cache, dc: np.ndarray):
        hs, u, alphas = cache
        _check_upstream(dc, (hs.shape[1],))
        dalpha = hs @ dc
        dhs = np.outer(alphas, dc)
        dscores = softmax_backward(alphas, dalpha, axis=0)
        dw = u.T @ dscores
        dpre = np.outer(dscores, self.params["w"]) * (1.0 - u * u)
        dhs += dpre @ self.params["W_a"]
        return dhs, {"W_a": dpre.T @ hs, "w": dw}


def attention_pool(layer: AttentionPool, hs: np.ndarray):
    (c, alphas), cache = layer.forward(hs)
    return c, alphas, cache
