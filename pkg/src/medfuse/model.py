"""The assembled multimodal model: image encoder, text encoder, fusion, three heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np

from . import heads as H
from .fusion import FUSION_KINDS, make_fusion
from .layers import AttentionPool, BiLstm, Conv2d, Dense, Embedding, GlobalPool, Pool2d
from .synthdata import CaseRecord, Vocab
from .tensor import Rng

MODALITIES = ("image", "text", "both")


@dataclass
class ModelConfig:
    """Every hyperparameter. Defaults are calibration choices for a 16x16 corpus."""

    modality: str = "both"
    fusion: str = "gated"
    image_size: int = 16
    conv_channels: list[int] = field(default_factory=lambda: [4, 8])
    conv_kernels: list[int] = field(default_factory=lambda: [3, 3])
    pool_window: int = 2
    global_pool: str = "avg"
    img_dim: int = 16
    vocab_size: int = len(Vocab())
    d_emb: int = 16
    hidden: int = 16
    attn_dim: int = 16
    txt_dim: int = 16
    d_z: int = 16
    num_classes: int = 2
    mask_grid: int = 4
    dec_hidden: int = 32
    max_desc_len: int = 10
    bilinear_rank: int | None = None
    lr: float = 0.01
    momentum: float = 0.9
    clip_norm: float = 5.0
    epochs: int = 20
    batch_size: int = 1
    seed: int = 0
    lambda_box: float = 1.0
    lambda_mask: float = 1.0
    lambda_gen: float = 1.0

    @property
    def uses_image(self) -> bool:
        return self.modality in ("image", "both")

    @property
    def uses_text(self) -> bool:
        return self.modality in ("text", "both")

    def feature_map_sizes(self) -> list[int]:
        """Spatial side after each conv and pool stage."""
        sizes, side = [], self.image_size
        for k in self.conv_kernels:
            side = side - k + 1
            sizes.append(side)
            side = (side - self.pool_window) // self.pool_window + 1 if side >= self.pool_window else 0
            sizes.append(side)
        return sizes

    def validate(self) -> None:
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}; valid: {', '.join(MODALITIES)}")
        if self.fusion not in FUSION_KINDS:
            raise ValueError(f"unknown fusion {self.fusion!r}; valid: {', '.join(FUSION_KINDS)}")
        positive = ("image_size", "pool_window", "img_dim", "vocab_size", "d_emb", "hidden",
                    "attn_dim", "txt_dim", "d_z", "mask_grid", "dec_hidden", "max_desc_len", "batch_size")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.batch_size != 1:
            raise ValueError("only per-case updates (batch_size 1) are supported")
        if len(self.conv_channels) != len(self.conv_kernels) or not self.conv_channels:
            raise ValueError("conv_channels and conv_kernels must be non-empty and equally long")
        if any(c < 1 for c in self.conv_channels) or any(k < 1 for k in self.conv_kernels):
            raise ValueError("conv channels and kernels must be positive")
        if any(s < 1 for s in self.feature_map_sizes()):
            raise ValueError(f"conv/pool stack does not fit a {self.image_size}px image: "
                             f"sizes {self.feature_map_sizes()}")
        if self.fusion == "elementwise" and self.img_dim != self.txt_dim:
            raise ValueError("elementwise fusion needs img_dim == txt_dim")
        if self.global_pool not in ("avg", "max"):
            raise ValueError(f"unknown global pool {self.global_pool!r}")
        if self.vocab_size <= max(H.PAD, H.BOS, H.EOS, H.UNK):
            raise ValueError("vocab_size must include the special tokens")
        if not (self.lr > 0 and 0 <= self.momentum < 1 and self.clip_norm > 0 and self.epochs >= 0):
            raise ValueError("need lr > 0, 0 <= momentum < 1, clip_norm > 0, epochs >= 0")
        if min(self.lambda_box, self.lambda_mask, self.lambda_gen) < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**data)


def config_for_grid(image_size: int, **overrides) -> ModelConfig:
    """Reference architecture, shrinking the second kernel for images under 16px."""
    cfg = ModelConfig(image_size=image_size)
    if image_size < 16:
        cfg.conv_kernels = [3, 2]
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def tiny_config(**overrides) -> ModelConfig:
    """The small configuration used by gradient checks (8px images, h=3, d_z=4, V=10)."""
    cfg = ModelConfig(image_size=8, conv_channels=[2, 3], conv_kernels=[3, 2], img_dim=4,
                      vocab_size=10, d_emb=3, hidden=3, attn_dim=3, txt_dim=4, d_z=4,
                      mask_grid=4, dec_hidden=3, max_desc_len=6)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


class Forward(NamedTuple):
    probs: np.ndarray
    box: np.ndarray
    mask: np.ndarray
    z: np.ndarray
    v_img: np.ndarray
    v_txt: np.ndarray
    caches: dict


class LossOutput(NamedTuple):
    total: float
    terms: dict
    grads: dict


class Model:
    """Parameters live in the component layers; ``params`` is a flat named view."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = cfg = config
        rng = Rng(cfg.seed)
        self.components: dict[str, object] = {}
        if cfg.uses_image:
            chans = [1] + list(cfg.conv_channels)
            for i, k in enumerate(cfg.conv_kernels):
                self.components[f"image.conv{i + 1}"] = Conv2d.init(rng, chans[i], chans[i + 1], k)
            self.components["image.proj"] = Dense.init(rng, chans[-1], cfg.img_dim, "tanh")
        self.pools = [Pool2d("max", cfg.pool_window, cfg.pool_window) for _ in cfg.conv_kernels]
        self.gpool = GlobalPool(cfg.global_pool)
        cross = cfg.fusion == "crossattn"
        if cfg.uses_text:
            self.components["text.embed"] = Embedding.init(rng, cfg.vocab_size, cfg.d_emb)
            self.components["text.bilstm"] = BiLstm.init(rng, cfg.d_emb, cfg.hidden)
            if not cross:
                self.components["text.pool"] = AttentionPool.init(rng, 2 * cfg.hidden, cfg.attn_dim)
                self.components["text.proj"] = Dense.init(rng, 2 * cfg.hidden, cfg.txt_dim, "tanh")
        self.fusion = make_fusion(cfg.fusion, rng, cfg.img_dim, cfg.txt_dim, cfg.d_z,
                                  state_dim=2 * cfg.hidden, rank=cfg.bilinear_rank)
        self.components["fusion"] = self.fusion
        d_joint = self.fusion.out_dim
        self.cls = H.ClassifierHead.init(rng, d_joint, cfg.num_classes)
        self.loc = H.LocalizerHead.init(rng, d_joint, cfg.mask_grid)
        self.dec = H.DecoderHead.init(rng, d_joint, cfg.vocab_size, cfg.d_emb, cfg.dec_hidden)
        self.components.update({"cls": self.cls, "loc": self.loc, "dec": self.dec})
        self.params: dict[str, np.ndarray] = {}
        for prefix, comp in self.components.items():
            for k, v in comp.params.items():
                self.params[f"{prefix}.{k}"] = v

    # -- encoders -------------------------------------------------------------

    def _encode_image(self, image):
        cfg = self.config
        if image.shape != (1, cfg.image_size, cfg.image_size):
            raise ValueError(f"image must be [1, {cfg.image_size}, {cfg.image_size}], got {image.shape}")
        caches = []
        x = image
        for i, pool in enumerate(self.pools):
            conv = self.components[f"image.conv{i + 1}"]
            x, cc = conv.forward(x)
            x, pc = pool.forward(x)
            caches.append((cc, pc))
        g, gc = self.gpool.forward(x)
        v, dc = self.components["image.proj"].forward(g)
        return v, (caches, gc, dc)

    def _image_backward(self, cache, dv, grads):
        caches, gc, dc = cache
        dg, gp = self.components["image.proj"].backward(dc, dv)
        _add(grads, "image.proj", gp)
        dx, _ = self.gpool.backward(gc, dg)
        for i in range(len(self.pools) - 1, -1, -1):
            cc, pc = caches[i]
            dx, _ = self.pools[i].backward(pc, dx)
            dx, gconv = self.components[f"image.conv{i + 1}"].backward(cc, dx)
            _add(grads, f"image.conv{i + 1}", gconv)

    def _encode_text(self, tokens):
        if len(tokens) < 1:
            raise ValueError("report must contain at least one token")
        emb, ec = self.components["text.embed"].forward(tokens)
        hs, bc = self.components["text.bilstm"].forward(emb)
        if self.fusion.uses_text_states:
            return hs, (ec, bc, None, None)
        (c, _), pc = self.components["text.pool"].forward(hs)
        v, dc = self.components["text.proj"].forward(c)
        return v, (ec, bc, pc, dc)

    def _text_backward(self, cache, dv, grads):
        ec, bc, pc, dc = cache
        if pc is None:
            dhs = dv
        else:
            dc_vec, gp = self.components["text.proj"].backward(dc, dv)
            _add(grads, "text.proj", gp)
            dhs, gpool = self.components["text.pool"].backward(pc, dc_vec)
            _add(grads, "text.pool", gpool)
        demb, gb = self.components["text.bilstm"].backward(bc, dhs)
        _add(grads, "text.bilstm", gb)
        _, ge = self.components["text.embed"].backward(ec, demb)
        _add(grads, "text.embed", ge)

    def _absent_text(self) -> np.ndarray:
        if self.fusion.uses_text_states:
            return np.zeros((1, 2 * self.config.hidden))
        return np.zeros(self.config.txt_dim)

    # -- public API -----------------------------------------------------------

    def forward_all(self, case: CaseRecord) -> Forward:
        cfg = self.config
        caches: dict = {}
        if cfg.uses_image:
            v_img, caches["image"] = self._encode_image(case.image)
        else:
            v_img = np.zeros(cfg.img_dim)
        if cfg.uses_text:
            v_txt, caches["text"] = self._encode_text(case.report)
        else:
            v_txt = self._absent_text()
        z, caches["fusion"] = self.fusion.forward(v_img, v_txt)
        probs, caches["cls"] = self.cls.forward(z)
        box, mask, caches["loc"] = self.loc.forward(z)
        return Forward(probs, box, mask, z, v_img, v_txt, caches)

    def compute_loss(self, case: CaseRecord, need_grads: bool = True) -> LossOutput:
        cfg = self.config
        if case.mask.shape != (cfg.mask_grid, cfg.mask_grid):
            raise ValueError(f"mask must be {cfg.mask_grid}x{cfg.mask_grid}, got {case.mask.shape}")
        fw = self.forward_all(case)
        target_box = case.box.as_array()
        terms = {
            "cls": H.cross_entropy(fw.probs, case.label),
            "box": H.smooth_l1(fw.box, target_box),
            "mask": H.dice_loss(fw.mask, case.mask),
            "gen": 0.0,
        }
        dec_cache = None
        if cfg.lambda_gen > 0:
            terms["gen"], _, dec_cache = self.dec.forward(fw.z, case.description)
        total = (terms["cls"] + cfg.lambda_box * terms["box"] + cfg.lambda_mask * terms["mask"]
                 + cfg.lambda_gen * terms["gen"])
        if not need_grads:
            return LossOutput(total, terms, {})

        grads: dict[str, np.ndarray] = {}
        dz, g = self.cls.backward(fw.caches["cls"], H.cross_entropy_grad_logits(fw.probs, case.label))
        _add(grads, "cls", g)
        dbox = cfg.lambda_box * H.smooth_l1_grad(fw.box, target_box)
        dmask = cfg.lambda_mask * H.dice_grad(fw.mask, case.mask)
        dz_loc, g = self.loc.backward(fw.caches["loc"], dbox, dmask)
        dz = dz + dz_loc
        _add(grads, "loc", g)
        if dec_cache is not None:
            dz_dec, g = self.dec.backward(dec_cache)
            dz = dz + cfg.lambda_gen * dz_dec
            _add(grads, "dec", {k: cfg.lambda_gen * v for k, v in g.items()})
        d_img, d_txt, g = self.fusion.backward(fw.caches["fusion"], dz)
        _add(grads, "fusion", g)
        if cfg.uses_image:
            self._image_backward(fw.caches["image"], d_img, grads)
        if cfg.uses_text:
            self._text_backward(fw.caches["text"], d_txt, grads)
        for name, p in self.params.items():
            if name not in grads:
                grads[name] = np.zeros_like(p)
        return LossOutput(total, terms, grads)

    def loss_and_grads(self, case: CaseRecord):
        out = self.compute_loss(case)
        return out.total, out.grads

    def loss(self, case: CaseRecord) -> float:
        return self.compute_loss(case, need_grads=False).total

    def predict(self, case: CaseRecord, tasks=("classify", "localize", "generate")) -> dict:
        fw = self.forward_all(case)
        out: dict = {}
        if "classify" in tasks:
            out["label"] = int(np.argmax(fw.probs))
            out["probs"] = fw.probs
        if "localize" in tasks:
            out["box"] = H.BBox.from_prediction(fw.box)
            out["mask"] = fw.mask
        if "generate" in tasks:
            out["tokens"] = self.dec.greedy(fw.z, self.config.max_desc_len)
        return out


def _add(grads: dict, prefix: str, g: dict) -> None:
    for k, v in g.items():
        grads[f"{prefix}.{k}"] = v
