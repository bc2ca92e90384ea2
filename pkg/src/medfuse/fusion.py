"""Image/text fusion strategies.

Each strategy maps an image vector and the text features to one joint vector
and supports back-propagation to both inputs and to its own parameters:

    forward(v_img, text) -> (z, cache)
    backward(cache, dz) -> (d_img, d_text, grads)

``text`` is the pooled text vector for every strategy except ``crossattn``,
which attends over the per-token text states ``[T, 2h]``.
"""

from __future__ import annotations

import numpy as np

from .layers import Dense, Layer, attention, attention_backward
from .tensor import Rng, glorot_uniform, sigmoid

FUSION_KINDS = ("concat", "elementwise", "gated", "bilinear", "crossattn")


def _vec(name: str, x: np.ndarray, n: int | None = None) -> None:
    if x.ndim != 1 or (n is not None and x.shape[0] != n):
        want = f"[{n}]" if n is not None else "a vector"
        raise ValueError(f"{name} must be {want}, got shape {x.shape}")


class ConcatFusion(Layer):
    kind = "concat"
    uses_text_states = False

    def __init__(self, d_img: int, d_txt: int):
        self.d_img, self.d_txt = d_img, d_txt
        self.out_dim = d_img + d_txt
        self.params = {}

    def forward(self, v_img, v_txt):
        _vec("v_img", v_img, self.d_img)
        _vec("v_txt", v_txt, self.d_txt)
        return np.concatenate([v_img, v_txt]), None

    def backward(self, cache, dz):
        return dz[:self.d_img].copy(), dz[self.d_img:].copy(), {}


class ElementwiseFusion(Layer):
    kind = "elementwise"
    uses_text_states = False

    def __init__(self, d_img: int, d_txt: int):
        if d_img != d_txt:
            raise ValueError(f"elementwise fusion needs equal dims, got {d_img} and {d_txt}")
        self.out_dim = d_img
        self.params = {}

    def forward(self, v_img, v_txt):
        _vec("v_img", v_img, self.out_dim)
        _vec("v_txt", v_txt, self.out_dim)
        return v_img * v_txt, (v_img, v_txt)

    def backward(self, cache, dz):
        v_img, v_txt = cache
        return dz * v_txt, dz * v_img, {}


def fuse_concat(v_img, v_txt):
    return ConcatFusion(v_img.shape[0], v_txt.shape[0]).forward(v_img, v_txt)[0]


def fuse_elementwise(v_img, v_txt):
    if v_img.shape != v_txt.shape:
        raise ValueError(f"elementwise fusion needs equal dims, got {v_img.shape} and {v_txt.shape}")
    return ElementwiseFusion(v_img.shape[0], v_txt.shape[0]).forward(v_img, v_txt)[0]


class GatedFusion(Layer):
    """``g = sigmoid(W_g [v_i; v_t] + b_g)``, ``z = g*tanh(W_i v_i + b_i) + (1-g)*tanh(W_t v_t + b_t)``."""

    kind = "gated"
    uses_text_states = False

    def __init__(self, params: dict[str, np.ndarray]):
        d_z = params["b_g"].shape[0]
        d_img = params["W_i"].shape[1]
        d_txt = params["W_t"].shape[1]
        expected = {"W_g": (d_z, d_img + d_txt), "b_g": (d_z,), "W_i": (d_z, d_img),
                    "b_i": (d_z,), "W_t": (d_z, d_txt), "b_t": (d_z,)}
        for k, shape in expected.items():
            if params[k].shape != shape:
                raise ValueError(f"gated fusion parameter {k} has shape {params[k].shape}, expected {shape}")
        self.params = params
        self.d_img, self.d_txt, self.out_dim = d_img, d_txt, d_z

    @classmethod
    def init(cls, rng: Rng, d_img: int, d_txt: int, d_z: int):
        return cls({
            "W_g": glorot_uniform(rng, (d_z, d_img + d_txt), d_img + d_txt, d_z),
            "b_g": np.zeros(d_z),
            "W_i": glorot_uniform(rng, (d_z, d_img), d_img, d_z),
            "b_i": np.zeros(d_z),
            "W_t": glorot_uniform(rng, (d_z, d_txt), d_txt, d_z),
            "b_t": np.zeros(d_z),
        })

    def forward(self, v_img, v_txt):
        _vec("v_img", v_img, self.d_img)
        _vec("v_txt", v_txt, self.d_txt)
        p = self.params
        joint = np.concatenate([v_img, v_txt])
        gate = sigmoid(p["W_g"] @ joint + p["b_g"])
        a = np.tanh(p["W_i"] @ v_img + p["b_i"])
        b = np.tanh(p["W_t"] @ v_txt + p["b_t"])
        z = gate * a + (1.0 - gate) * b
        return z, (v_img, v_txt, joint, gate, a, b)

    def backward(self, cache, dz):
        v_img, v_txt, joint, gate, a, b = cache
        p = self.params
        dgate_pre = dz * (a - b) * gate * (1.0 - gate)
        da_pre = dz * gate * (1.0 - a * a)
        db_pre = dz * (1.0 - gate) * (1.0 - b * b)
        djoint = p["W_g"].T @ dgate_pre
        d_img = djoint[:self.d_img] + p["W_i"].T @ da_pre
        d_txt = djoint[self.d_img:] + p["W_t"].T @ db_pre
        grads = {
            "W_g": np.outer(dgate_pre, joint), "b_g": dgate_pre,
            "W_i": np.outer(da_pre, v_img), "b_i": da_pre,
            "W_t": np.outer(db_pre, v_txt), "b_t": db_pre,
        }
        return d_img, d_txt, grads


def fuse_gated(v_img, v_txt, params):
    layer = GatedFusion(params)
    z, cache = layer.forward(v_img, v_txt)
    return z, cache[3], cache


class BilinearFusion(Layer):
    """``z_k = v_img^T W[k] v_txt + b_k``.

    With ``rank`` set, each slice is factorised as ``W[k] = U[k] V[k]^T`` and
    the parameters are ``U: [d_z, d_img, r]`` and ``V: [d_z, d_txt, r]``.
    """

    kind = "bilinear"
    uses_text_states = False

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = params
        self.low_rank = "U" in params
        if self.low_rank:
            d_z, d_img, r = params["U"].shape
            if params["V"].shape[0] != d_z or params["V"].shape[2] != r:
                raise ValueError(f"bilinear factor shapes {params['U'].shape}, {params['V'].shape} disagree")
            d_txt = params["V"].shape[1]
        else:
            d_z, d_img, d_txt = params["W"].shape
        if params["b"].shape != (d_z,):
            raise ValueError(f"bilinear bias shape {params['b'].shape}, expected {(d_z,)}")
        self.d_img, self.d_txt, self.out_dim = d_img, d_txt, d_z

    @classmethod
    def init(cls, rng: Rng, d_img: int, d_txt: int, d_z: int, rank: int | None = None):
        if rank is None:
            w = glorot_uniform(rng, (d_z, d_img, d_txt), d_img * d_txt, d_z)
            return cls({"W": w, "b": np.zeros(d_z)})
        u = glorot_uniform(rng, (d_z, d_img, rank), d_img, rank)
        v = glorot_uniform(rng, (d_z, d_txt, rank), d_txt, rank)
        return cls({"U": u, "V": v, "b": np.zeros(d_z)})

    def forward(self, v_img, v_txt):
        _vec("v_img", v_img, self.d_img)
        _vec("v_txt", v_txt, self.d_txt)
        p = self.params
        if self.low_rank:
            pu = np.einsum("i,kir->kr", v_img, p["U"])
            pv = np.einsum("j,kjr->kr", v_txt, p["V"])
            return (pu * pv).sum(axis=1) + p["b"], (v_img, v_txt, pu, pv)
        return np.einsum("i,kij,j->k", v_img, p["W"], v_txt) + p["b"], (v_img, v_txt)

    def backward(self, cache, dz):
        p = self.params
        if self.low_rank:
            v_img, v_txt, pu, pv = cache
            dpu = dz[:, None] * pv
            dpv = dz[:, None] * pu
            grads = {"U": np.einsum("i,kr->kir", v_img, dpu),
                     "V": np.einsum("j,kr->kjr", v_txt, dpv), "b": dz.copy()}
            d_img = np.einsum("kir,kr->i", p["U"], dpu)
            d_txt = np.einsum("kjr,kr->j", p["V"], dpv)
            return d_img, d_txt, grads
        v_img, v_txt = cache
        w = p["W"]
        grads = {"W": dz[:, None, None] * np.outer(v_img, v_txt)[None], "b": dz.copy()}
        d_img = np.einsum("k,kij,j->i", dz, w, v_txt)
        d_txt = np.einsum("k,kij,i->j", dz, w, v_img)
        return d_img, d_txt, grads


def fuse_bilinear(v_img, v_txt, w, b):
    return BilinearFusion({"W": w, "b": b}).forward(v_img, v_txt)[0]


class CrossAttentionFusion(Layer):
    """The image vector queries projected text states; ``z = tanh(W_o [v_img; ctx] + b_o)``."""

    kind = "crossattn"
    uses_text_states = True

    def __init__(self, params: dict[str, np.ndarray]):
        d_k, state_dim = params["W_k"].shape
        d_v = params["W_v"].shape[0]
        if params["W_v"].shape[1] != state_dim:
            raise ValueError(f"key/value projections disagree: {params['W_k'].shape}, {params['W_v'].shape}")
        self.out_proj = Dense(params["W_o"], params["b_o"], "tanh")
        if self.out_proj.n_in != d_k + d_v:
            raise ValueError(f"W_o expects input {self.out_proj.n_in}, need {d_k + d_v}")
        self.params = params
        self.d_img, self.state_dim, self.d_v = d_k, state_dim, d_v
        self.out_dim = self.out_proj.n_out

    @classmethod
    def init(cls, rng: Rng, d_img: int, state_dim: int, d_z: int, d_v: int | None = None):
        d_v = d_v or d_img
        return cls({
            "W_k": glorot_uniform(rng, (d_img, state_dim), state_dim, d_img),
            "W_v": glorot_uniform(rng, (d_v, state_dim), state_dim, d_v),
            "W_o": glorot_uniform(rng, (d_z, d_img + d_v), d_img + d_v, d_z),
            "b_o": np.zeros(d_z),
        })

    def forward(self, v_img, states):
        _vec("v_img", v_img, self.d_img)
        if states.ndim != 2 or states.shape[1] != self.state_dim or states.shape[0] < 1:
            raise ValueError(f"text states must be [T, {self.state_dim}], got {states.shape}")
        p = self.params
        keys = states @ p["W_k"].T
        values = states @ p["W_v"].T
        ctx, weights, acache = attention(v_img[None, :], keys, values)
        z, dcache = self.out_proj.forward(np.concatenate([v_img, ctx[0]]))
        return z, (states, acache, dcache, weights[0])

    def backward(self, cache, dz):
        states, acache, dcache, _ = cache
        djoint, dgrads = self.out_proj.backward(dcache, dz)
        dq, dkeys, dvalues = attention_backward(acache, djoint[None, self.d_img:])
        d_img = djoint[:self.d_img] + dq[0]
        p = self.params
        d_states = dkeys @ p["W_k"] + dvalues @ p["W_v"]
        grads = {"W_k": dkeys.T @ states, "W_v": dvalues.T @ states,
                 "W_o": dgrads["weight"], "b_o": dgrads["bias"]}
        return d_img, d_states, grads

    @staticmethod
    def weights(cache) -> np.ndarray:
        return cache[3]


def fuse_crossattn(v_img, text_states, params):
    layer = CrossAttentionFusion(params)
    z, cache = layer.forward(v_img, text_states)
    return z, cache[3], cache


def make_fusion(kind: str, rng: Rng, d_img: int, d_txt: int, d_z: int,
                state_dim: int | None = None, rank: int | None = None) -> Layer:
    """Build a freshly initialised strategy by name."""
    if kind == "concat":
        return ConcatFusion(d_img, d_txt)
    if kind == "elementwise":
        return ElementwiseFusion(d_img, d_txt)
    if kind == "gated":
        return GatedFusion.init(rng, d_img, d_txt, d_z)
    if kind == "bilinear":
        return BilinearFusion.init(rng, d_img, d_txt, d_z, rank)
    if kind == "crossattn":
        if state_dim is None:
            raise ValueError("crossattn fusion needs the text state width")
        return CrossAttentionFusion.init(rng, d_img, state_dim, d_z)
    raise ValueError(f"unknown fusion kind {kind!r}; valid kinds: {', '.join(FUSION_KINDS)}")
