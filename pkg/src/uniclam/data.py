"""Synthetic shapes-and-captions corpus with planted region masks.

Each scene holds one to three non-overlapping shapes, each drawn at its own
intensity class ("color") on a faint noise background. A caption lists the
shapes left to right, and three questions come with it: two yes/no presence
questions and one open question about color, shape, or count. Every scene is
a pure function of its seed.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_SIZE = 32
SHAPES = ("circle", "square", "triangle")
COLORS = ("dark", "gray", "light", "white")
INTENSITY = {"dark": 0.35, "gray": 0.55, "light": 0.75, "white": 0.95}
COUNTS = ("one", "two", "three")
ANSWERS = ("yes", "no") + SHAPES + COLORS + COUNTS
ANSWER_ID = {a: i for i, a in enumerate(ANSWERS)}
BACKGROUND = 0.1
NOISE = 0.03

_WORDS = (
    "<pad>", "<unk>",
    *SHAPES, *COLORS, *COUNTS, "yes", "no",
    "a", "the", "is", "there", "what", "color", "shape", "how", "many", "shapes",
    "object", "left", "of", "?",
)


class Vocabulary:
    """Bijection between token strings and ids; id 0 pads, id 1 is unknown."""

    PAD = 0
    UNK = 1

    def __init__(self, words=_WORDS):
        if len(set(words)) != len(words):
            raise ValueError("duplicate vocabulary entries")
        if words[0] != "<pad>" or words[1] != "<unk>":
            raise ValueError("ids 0 and 1 are reserved for <pad> and <unk>")
        self.words = tuple(words)
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, self.UNK) for w in text.split()]

    def decode(self, ids) -> str:
        return " ".join(self.words[i] for i in ids if i != self.PAD)


VOCAB = Vocabulary()


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cx: int
    cy: int
    r: int


@dataclass(frozen=True)
class QAPair:
    question_ids: tuple[int, ...]
    answer: int
    is_open: bool


@dataclass(eq=False)
class SceneSample:
    image: np.ndarray  # (32, 32) float32 in [0, 1]
    caption_ids: tuple[int, ...]
    gt_regions: np.ndarray  # (R, 32, 32) bool
    qa_pairs: tuple[QAPair, ...]
    objects: tuple[SceneObject, ...] = field(default=())  # generator trace, not serialized

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneSample):
            return NotImplemented
        return (
            self.image.dtype == other.image.dtype
            and self.image.tobytes() == other.image.tobytes()
            and self.caption_ids == other.caption_ids
            and self.gt_regions.shape == other.gt_regions.shape
            and np.array_equal(self.gt_regions, other.gt_regions)
            and self.qa_pairs == other.qa_pairs
        )


# -- geometry ------------------------------------------------------------------


def shape_mask(shape: str, cx: int, cy: int, r: int, size: int = IMAGE_SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        m = dx * dx + dy * dy <= r * r
    elif shape == "square":
        m = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    elif shape == "triangle":
        # apex up: half-width grows linearly from 0 at the top to r at the base
        m = (dy >= -r) & (dy <= r) & (2 * np.abs(dx) <= dy + r)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


def _place(rng: np.random.Generator, n: int) -> list[tuple[int, int, int]]:
    """Non-overlapping boxes (cx, cy, r) with a one-pixel gap, by rejection."""
    while True:
        boxes: list[tuple[int, int, int]] = []
        for _ in range(200):
            r = int(rng.integers(3, 6))
            cx = int(rng.integers(r, IMAGE_SIZE - r))
            cy = int(rng.integers(r, IMAGE_SIZE - r))
            if all(abs(cx - x) > r + q + 1 or abs(cy - y) > r + q + 1 for x, y, q in boxes):
                boxes.append((cx, cy, r))
                if len(boxes) == n:
                    return boxes
        # extremely unlikely with three small shapes; retry from scratch


def _caption(objects: list[SceneObject]) -> str:
    ordered = sorted(objects, key=lambda o: (o.cx, o.cy))
    parts = [f"{o.color} {o.shape}" for o in ordered]
    if len(parts) == 1:
        return "a " + parts[0]
    return " left of ".join(parts)


def _closed_questions(rng, objects: list[SceneObject]) -> list[QAPair]:
    present_shapes = {o.shape for o in objects}
    present_colors = {o.color for o in objects}
    out = []
    # shape presence, asked about a present or an absent shape with equal odds
    absent = [s for s in SHAPES if s not in present_shapes]
    if absent and rng.random() < 0.5:
        s = absent[int(rng.integers(len(absent)))]
    else:
        pool = sorted(present_shapes)
        s = pool[int(rng.integers(len(pool)))]
    out.append(QAPair(tuple(VOCAB.encode(f"is there a {s} ?")), ANSWER_ID["yes" if s in present_shapes else "no"], False))
    absent = [c for c in COLORS if c not in present_colors]
    if absent and rng.random() < 0.5:
        c = absent[int(rng.integers(len(absent)))]
    else:
        pool = sorted(present_colors)
        c = pool[int(rng.integers(len(pool)))]
    out.append(QAPair(tuple(VOCAB.encode(f"is there a {c} object ?")), ANSWER_ID["yes" if c in present_colors else "no"], False))
    return out


def _open_question(rng, objects: list[SceneObject]) -> QAPair:
    kinds = ["count", "shape_of_color"]
    unique = [o for o in objects if sum(p.shape == o.shape for p in objects) == 1]
    if unique:
        kinds.append("color_of_shape")
    kind = kinds[int(rng.integers(len(kinds)))]
    if kind == "count":
        q, a = "how many shapes ?", COUNTS[len(objects) - 1]
    elif kind == "shape_of_color":
        o = objects[int(rng.integers(len(objects)))]
        q, a = f"what shape is the {o.color} object ?", o.shape
    else:
        o = unique[int(rng.integers(len(unique)))]
        q, a = f"what color is the {o.shape} ?", o.color
    return QAPair(tuple(VOCAB.encode(q)), ANSWER_ID[a], True)


def generate_scene(seed: int) -> SceneSample:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    colors = rng.choice(len(COLORS), size=n, replace=False)
    kinds = rng.integers(0, len(SHAPES), size=n)
    boxes = _place(rng, n)
    image = BACKGROUND + NOISE * rng.standard_normal((IMAGE_SIZE, IMAGE_SIZE))
    objects, regions = [], []
    for (cx, cy, r), k, c in zip(boxes, kinds, colors):
        o = SceneObject(SHAPES[int(k)], COLORS[int(c)], cx, cy, r)
        m = shape_mask(o.shape, cx, cy, r)
        image[m] = INTENSITY[o.color] + NOISE * rng.standard_normal(int(m.sum()))
        objects.append(o)
        regions.append(m)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    qa = _closed_questions(rng, objects) + [_open_question(rng, objects)]
    return SceneSample(
        image=image,
        caption_ids=tuple(VOCAB.encode(_caption(objects))),
        gt_regions=np.stack(regions).astype(bool),
        qa_pairs=tuple(qa),
        objects=tuple(objects),
    )


def generate_dataset(n: int, base_seed: int = 0) -> list[SceneSample]:
    return [generate_scene(base_seed + i) for i in range(n)]


# -- file format -------------------------------------------------------------------

MAGIC = b"UCLD"
VERSION = 1
_PIXELS = IMAGE_SIZE * IMAGE_SIZE
_REGION_BYTES = _PIXELS // 8


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} at byte offset {offset}")


def _u16_list(ids, what: str) -> bytes:
    ids = list(ids)
    if len(ids) > 0xFFFF or any(not 0 <= i <= 0xFFFF for i in ids):
        raise ValueError(f"{what}: ids must fit in u16")
    return struct.pack(f"<H{len(ids)}H", len(ids), *ids)


def encode_dataset(samples) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(samples))]
    for s in samples:
        img = np.asarray(s.image)
        if img.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"image must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {img.shape}")
        out.append(img.astype("<f4").tobytes())
        out.append(_u16_list(s.caption_ids, "caption"))
        regions = np.asarray(s.gt_regions, dtype=bool).reshape(-1, _PIXELS)
        if len(regions) > 255 or len(s.qa_pairs) > 255:
            raise ValueError("at most 255 regions and 255 questions per sample")
        out.append(struct.pack("<B", len(regions)))
        for r in regions:
            out.append(np.packbits(r, bitorder="little").tobytes())
        out.append(struct.pack("<B", len(s.qa_pairs)))
        for qa in s.qa_pairs:
            out.append(_u16_list(qa.question_ids, "question"))
            out.append(struct.pack("<HB", qa.answer, 1 if qa.is_open else 0))
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatasetFormatError(f"truncated while reading {what}", self.pos)
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def ids(self, what: str) -> tuple[int, ...]:
        (n,) = self.unpack("<H", what + " length")
        return tuple(self.unpack(f"<{n}H", what)) if n else ()


def decode_dataset(buf: bytes) -> list[SceneSample]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise DatasetFormatError("bad magic (expected UCLD)", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    (count,) = r.unpack("<I", "sample count")
    samples = []
    for _ in range(count):
        image = np.frombuffer(r.take(4 * _PIXELS, "image"), dtype="<f4").astype(np.float32)
        caption = r.ids("caption")
        (n_regions,) = r.unpack("<B", "region count")
        regions = np.zeros((n_regions, IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
        for i in range(n_regions):
            bits = np.frombuffer(r.take(_REGION_BYTES, "region"), dtype=np.uint8)
            regions[i] = np.unpackbits(bits, bitorder="little").reshape(IMAGE_SIZE, IMAGE_SIZE).astype(bool)
        (n_qa,) = r.unpack("<B", "question count")
        qa = []
        for _ in range(n_qa):
            q = r.ids("question")
            at = r.pos
            answer, flag = r.unpack("<HB", "answer")
            if flag > 1:
                raise DatasetFormatError(f"bad open/closed flag {flag}", at + 2)
            qa.append(QAPair(q, answer, bool(flag)))
        samples.append(SceneSample(image.reshape(IMAGE_SIZE, IMAGE_SIZE), caption, regions, tuple(qa)))
    if r.pos != len(buf):
        raise DatasetFormatError("trailing bytes after last sample", r.pos)
    return samples


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_dataset(samples, path: str | Path) -> None:
    atomic_write_bytes(path, encode_dataset(samples))


def read_dataset(path: str | Path) -> list[SceneSample]:
    return decode_dataset(Path(path).read_bytes())


# -- evaluation geometry -------------------------------------------------------------


def mask_iou(mask: np.ndarray, region: np.ndarray, threshold: float = 0.5) -> float:
    """IoU of ``mask >= threshold`` with a binary region; 0 when the union is empty."""
    mask = np.asarray(mask, dtype=np.float64)
    region = np.asarray(region, dtype=bool)
    if mask.shape != region.shape:
        raise ValueError(f"mask_iou: resolution mismatch {mask.shape} vs {region.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    b = mask >= threshold
    union = np.count_nonzero(b | region)
    if union == 0:
        return 0.0
    return np.count_nonzero(b & region) / union


def best_iou(masks: np.ndarray, regions: np.ndarray, threshold: float = 0.5) -> float:
    """Mean over regions of the best IoU any mask achieves with that region."""
    if len(regions) == 0:
        return 0.0
    return float(np.mean([max(mask_iou(m, r, threshold) for m in masks) for r in regions]))
