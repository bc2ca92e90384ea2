"""Synthetic paired image/report corpus with an XOR-planted label.

Each case draws an image attribute ``a_img`` (solid bright vs. checkerboard
blob texture), a text attribute ``a_txt`` (keyword ``solid`` vs ``diffuse``)
and a lesion quadrant ``q``. The label is ``a_img XOR a_txt``, so neither
modality alone predicts it. Two identically textured blobs are rendered in
distinct quadrants; only the report's location phrase says which one is the
lesion. The target description names the quadrant, the report keyword and
the label word, so generating it well also needs both modalities.

Random draws for case ``id`` come from ``Rng(derive_seed(seed, id))`` in this
order: a_img, a_txt, q, decoy quadrant, ``G*G`` pixel normals, then one
``below`` draw per distractor token.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .heads import BOS, EOS, PAD, UNK, BBox
from .tensor import Rng, derive_seed, mix64

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
QUADRANT_WORDS = (("upper", "left"), ("upper", "right"), ("lower", "left"), ("lower", "right"))
TEXT_KEYWORDS = ("solid", "diffuse")
LABEL_WORDS = ("zero", "one")
REPORT_PREFIX = ("scan", "shows")
DISTRACTORS = ("patient", "history", "noted", "mild", "stable", "prior", "study",
               "normal", "no", "change", "follow", "up", "with", "and")
WORDS = (
    ("lesion", "class", "opacity", "in", "the", "region", "quadrant")
    + REPORT_PREFIX + TEXT_KEYWORDS + LABEL_WORDS
    + ("upper", "lower", "left", "right") + DISTRACTORS
)
FORMAT_VERSION = 1
REQUIRED_FIELDS = ("v", "id", "image", "report", "label", "box", "mask", "description")
BACKGROUND = 0.2


class Vocab:
    """Token string <-> id bijection with fixed special ids PAD=0, BOS=1, EOS=2, UNK=3."""

    def __init__(self, words=WORDS):
        self.itos: list[str] = list(SPECIALS)
        for w in words:
            if w not in self.itos:
                self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def id(self, word: str) -> int:
        return self.stoi.get(word, UNK)

    def decode(self, ids) -> list[str]:
        return [self.itos[i] for i in ids]


def tokenize(text: str, vocab: Vocab) -> list[int]:
    """Whitespace split with ASCII lower-casing; unknown words map to UNK."""
    return [vocab.id(w.lower() if w.isascii() else w) for w in text.split()]


@dataclass
class CorpusConfig:
    num_cases: int = 2000
    grid: int = 16
    mask_grid: int = 4
    noise: float = 0.05
    distractors: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.num_cases < 1:
            raise ValueError(f"num_cases must be >= 1, got {self.num_cases}")
        if self.grid < 8 or self.grid % 4:
            raise ValueError(f"grid must be >= 8 and a multiple of 4, got {self.grid}")
        if self.mask_grid < 1 or self.grid % self.mask_grid:
            raise ValueError(f"mask grid {self.mask_grid} must divide grid {self.grid}")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")
        if self.distractors < 0:
            raise ValueError(f"distractor count must be >= 0, got {self.distractors}")


@dataclass
class CaseRecord:
    id: int
    image: np.ndarray  # [1, G, G]
    report: list[int]
    label: int
    box: BBox
    mask: np.ndarray  # [g, g], 0/1
    description: list[int]  # ends with EOS
    attrs: dict = field(default_factory=dict, compare=False)

    def __eq__(self, other):
        if not isinstance(other, CaseRecord):
            return NotImplemented
        return (self.id == other.id and self.label == other.label and self.box == other.box
                and self.report == other.report and self.description == other.description
                and self.image.shape == other.image.shape and np.array_equal(self.image, other.image)
                and self.mask.shape == other.mask.shape and np.array_equal(self.mask, other.mask))


def blob_origin(quadrant: int, grid: int) -> tuple[int, int]:
    """Top-left pixel (row, col) of the blob centred in ``quadrant``."""
    half, size = grid // 2, grid // 4
    row = (quadrant // 2) * half + (half - size) // 2
    col = (quadrant % 2) * half + (half - size) // 2
    return row, col


def blob_box(quadrant: int, grid: int) -> BBox:
    row, col = blob_origin(quadrant, grid)
    size = grid // 4
    return BBox(col / grid, row / grid, (col + size) / grid, (row + size) / grid)


def rasterize(box: BBox, g: int) -> np.ndarray:
    """Mark every mask cell whose area overlaps the box interior."""
    edges = np.arange(g + 1) / g
    cols = (edges[:-1] < box.x2) & (edges[1:] > box.x1)
    rows = (edges[:-1] < box.y2) & (edges[1:] > box.y1)
    return np.outer(rows, cols).astype(np.float64)


def _texture(a_img: int, size: int) -> np.ndarray:
    if a_img == 0:
        return np.ones((size, size))
    ii, jj = np.indices((size, size))
    return ((ii + jj) % 2 == 0).astype(np.float64)


def description_tokens(vocab: Vocab, quadrant: int, a_txt: int, label: int) -> list[int]:
    """``lesion <quadrant words> <report keyword> class <label word>`` followed by EOS."""
    words = ["lesion", *QUADRANT_WORDS[quadrant], TEXT_KEYWORDS[a_txt], "class", LABEL_WORDS[label]]
    return [vocab.id(w) for w in words] + [EOS]


def make_case(config: CorpusConfig, case_id: int, vocab: Vocab) -> CaseRecord:
    rng = Rng(derive_seed(config.seed, case_id))
    a_img = rng.below(2)
    a_txt = rng.below(2)
    q = rng.below(4)
    others = [k for k in range(4) if k != q]
    decoy = others[rng.below(3)]
    G = config.grid
    size = G // 4
    image = np.full((G, G), BACKGROUND)
    tex = _texture(a_img, size)
    for quad in (q, decoy):
        r, c = blob_origin(quad, G)
        image[r:r + size, c:c + size] = tex
    noise = rng.normal(G * G).reshape(G, G)
    if config.noise > 0:
        image = np.clip(image + config.noise * noise, 0.0, 1.0)
    words = [*REPORT_PREFIX, TEXT_KEYWORDS[a_txt], "opacity", "in", "the", *QUADRANT_WORDS[q], "region"]
    words += [DISTRACTORS[rng.below(len(DISTRACTORS))] for _ in range(config.distractors)]
    label = a_img ^ a_txt
    box = blob_box(q, G)
    return CaseRecord(
        id=case_id,
        image=image[None, :, :],
        report=[vocab.id(w) for w in words],
        label=label,
        box=box,
        mask=rasterize(box, config.mask_grid),
        description=description_tokens(vocab, q, a_txt, label),
        attrs={"a_img": a_img, "a_txt": a_txt, "quadrant": q, "decoy": decoy},
    )


def generate(config: CorpusConfig, vocab: Vocab | None = None) -> list[CaseRecord]:
    config.validate()
    vocab = vocab or Vocab()
    return [make_case(config, i, vocab) for i in range(config.num_cases)]


def split_ids(ids, seed: int = 0) -> tuple[list[int], list[int], list[int]]:
    """Deterministic 70/15/15 split: sort by ``mix64(id ^ seed)``, then cut.

    Validation and test each get ``floor(0.15 n)`` cases; train gets the rest.
    """
    ids = list(ids)
    order = sorted(ids, key=lambda i: (mix64(i ^ seed), i))
    n = len(order)
    n_hold = (15 * n) // 100
    n_train = n - 2 * n_hold
    return order[:n_train], order[n_train:n_train + n_hold], order[n_train + n_hold:]


def _nested(a: np.ndarray) -> list:
    # float() keeps json's shortest round-trip repr
    return [[float(v) for v in row] for row in a]


def record_to_json(rec: CaseRecord, vocab: Vocab) -> str:
    desc = rec.description[:-1] if rec.description and rec.description[-1] == EOS else rec.description
    obj = {
        "v": FORMAT_VERSION,
        "id": rec.id,
        "image": [_nested(ch) for ch in rec.image],
        "report": " ".join(vocab.decode(rec.report)),
        "label": rec.label,
        "box": [rec.box.x1, rec.box.y1, rec.box.x2, rec.box.y2],
        "mask": _nested(rec.mask),
        "description": " ".join(vocab.decode(desc)),
    }
    return json.dumps(obj, separators=(",", ":"))


def record_from_json(obj: dict, vocab: Vocab) -> CaseRecord:
    for name in REQUIRED_FIELDS:
        if name not in obj:
            raise ValueError(f"missing field {name!r}")
    if obj["v"] != FORMAT_VERSION:
        raise ValueError(f"unsupported record version {obj['v']!r}")
    image = np.asarray(obj["image"], dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    return CaseRecord(
        id=int(obj["id"]),
        image=image,
        report=tokenize(obj["report"], vocab),
        label=int(obj["label"]),
        box=BBox(*(float(v) for v in obj["box"])),
        mask=np.asarray(obj["mask"], dtype=np.float64),
        description=tokenize(obj["description"], vocab) + [EOS],
    )


def save_corpus(records, path, vocab: Vocab | None = None) -> None:
    vocab = vocab or Vocab()
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(record_to_json(rec, vocab) + "\n")


def load_corpus(path, vocab: Vocab | None = None) -> list[CaseRecord]:
    """Read line-delimited records; errors name the line number and field."""
    vocab = vocab or Vocab()
    records = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("record is not a JSON object")
                records.append(record_from_json(obj, vocab))
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    return records


DESCRIPTION_PATTERN = re.compile(
    r"^lesion (upper|lower) (left|right) (solid|diffuse) class (zero|one)$")
