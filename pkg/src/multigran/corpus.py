"""Synthetic hierarchical documents with word/line/paragraph/page ground truth.

A page is a (possibly perspective-skewed) quadrilateral on a light background.
Inside it sit paragraph blocks tinted by class, each holding text lines whose
baselines are straight or sine-curved, each holding words drawn as filled
rounded blobs. Every level nests inside its parent by construction.

Dataset directory layout::

    index.jsonl        one JSON object per sample
    images/<id>.png    8-bit RGB raster
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from . import geometry


class Granularity(IntEnum):
    WORD = 0
    LINE = 1
    PARA = 2
    PAGE = 3

    @property
    def key(self) -> str:
        return GRANULARITY_NAMES[self]

    @classmethod
    def parse(cls, value) -> "Granularity":
        if isinstance(value, str):
            try:
                return cls(GRANULARITY_NAMES.index(value))
            except ValueError:
                raise ValueError(f"unknown granularity {value!r}") from None
        return cls(int(value))


GRANULARITY_NAMES = ("word", "line", "para", "page")
LEVELS = tuple(Granularity)


class CorpusError(ValueError):
    """Configuration that cannot produce a valid sample."""


class DatasetFormatError(ValueError):
    pass


@dataclass
class TextInstance:
    granularity: Granularity
    class_id: int
    polygon: np.ndarray
    score: Optional[float] = None
    mask_rle: Optional[list] = None

    @property
    def bbox(self) -> geometry.AABox:
        return geometry.polygon_to_aabox(self.polygon)

    def to_json(self) -> dict:
        out = {
            "granularity": self.granularity.key,
            "class_id": int(self.class_id),
            "polygon": [[float(x), float(y)] for x, y in self.polygon],
        }
        if self.score is not None:
            out["score"] = float(self.score)
        if self.mask_rle is not None:
            out["mask_rle"] = [int(r) for r in self.mask_rle]
        return out

    def __eq__(self, other):
        if not isinstance(other, TextInstance):
            return NotImplemented
        return (
            self.granularity == other.granularity
            and self.class_id == other.class_id
            and np.array_equal(self.polygon, other.polygon)
            and self.score == other.score
            and self.mask_rle == other.mask_rle
        )


@dataclass
class SampleRecord:
    id: str
    image: str
    width: int
    height: int
    flags: dict[str, int]
    instances: list[TextInstance] = field(default_factory=list)

    def flag_vector(self) -> tuple[int, int, int, int]:
        return tuple(int(self.flags.get(n, 0)) for n in GRANULARITY_NAMES)

    def instances_of(self, level: Granularity) -> list[TextInstance]:
        return [inst for inst in self.instances if inst.granularity == level]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "image": self.image,
            "width": int(self.width),
            "height": int(self.height),
            "flags": {n: int(self.flags.get(n, 0)) for n in GRANULARITY_NAMES},
            "instances": [inst.to_json() for inst in self.instances],
        }


@dataclass
class CorpusConfig:
    image_size: int = 256
    page_margin: tuple[float, float] = (0.03, 0.10)
    perspective: tuple[float, float] = (0.0, 0.03)
    paragraphs: tuple[int, int] = (1, 2)
    lines_per_paragraph: tuple[int, int] = (1, 2)
    words_per_line: tuple[int, int] = (1, 4)
    line_height: tuple[float, float] = (0.075, 0.095)   # fraction of image size
    word_aspect: tuple[float, float] = (1.5, 4.0)       # word width / word height
    curvature: tuple[float, float] = (0.0, 0.025)       # sine amplitude, fraction of image size
    curved_probability: float = 0.5
    num_para_classes: int = 5
    keep_probability: dict[str, float] = field(
        default_factory=lambda: {n: 1.0 for n in GRANULARITY_NAMES}
    )
    flag_cycle: Optional[list[list[int]]] = None
    noise: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        ranges = {
            "page_margin": self.page_margin,
            "perspective": self.perspective,
            "paragraphs": self.paragraphs,
            "lines_per_paragraph": self.lines_per_paragraph,
            "words_per_line": self.words_per_line,
            "line_height": self.line_height,
            "word_aspect": self.word_aspect,
            "curvature": self.curvature,
        }
        for name, (lo, hi) in ranges.items():
            if lo > hi:
                raise CorpusError(f"{name}: empty range ({lo}, {hi})")
            if lo < 0:
                raise CorpusError(f"{name}: negative bound {lo}")
        for name in ("paragraphs", "lines_per_paragraph", "words_per_line"):
            if getattr(self, name)[0] < 1:
                raise CorpusError(f"{name}: need at least 1")
        if self.image_size < 32 or self.image_size % 32:
            raise CorpusError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.num_para_classes < 1:
            raise CorpusError("num_para_classes must be >= 1")
        if not 0 <= self.curved_probability <= 1:
            raise CorpusError("curved_probability must lie in [0, 1]")
        if set(self.keep_probability) - set(GRANULARITY_NAMES):
            raise CorpusError(f"keep_probability has unknown keys {sorted(self.keep_probability)}")
        for name, p in self.keep_probability.items():
            if not 0 <= p <= 1:
                raise CorpusError(f"keep_probability[{name}] = {p} is not a probability")
        if self.flag_cycle is not None:
            if not self.flag_cycle:
                raise CorpusError("flag_cycle must not be empty")
            for row in self.flag_cycle:
                if len(row) != 4 or any(v not in (0, 1) for v in row):
                    raise CorpusError(f"flag_cycle entry {row} is not four 0/1 flags")
        if self.page_margin[1] >= 0.4 or self.perspective[1] >= 0.1:
            raise CorpusError("page_margin/perspective leave no room for the page body")

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise CorpusError(f"unknown corpus config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if isinstance(value, list) and key not in ("flag_cycle",):
                value = tuple(value)
            kwargs[key] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


# --- rendering ---------------------------------------------------------------

PARA_TINTS = np.array(
    [
        [0.80, 0.86, 0.98],
        [0.98, 0.84, 0.78],
        [0.80, 0.96, 0.80],
        [0.96, 0.94, 0.72],
        [0.90, 0.80, 0.96],
        [0.78, 0.94, 0.94],
        [0.97, 0.78, 0.90],
        [0.86, 0.86, 0.86],
    ]
)


def _para_tint(class_id: int) -> np.ndarray:
    if class_id < len(PARA_TINTS):
        return PARA_TINTS[class_id]
    rng = np.random.default_rng(class_id)
    return 0.7 + 0.3 * rng.random(3)


def _paint(canvas: np.ndarray, polygon: np.ndarray, color) -> np.ndarray:
    h, w = canvas.shape[:2]
    m = geometry.rasterize_polygon(polygon, h, w).astype(bool)
    canvas[m] = color
    return m


def _band(x0: float, x1: float, center, half: float, n: int, rounded: bool) -> np.ndarray:
    """Polygon around the curve ``y = center(x)`` between ``x0`` and ``x1``.

    With ``rounded`` the two ends get elliptical caps of width ``half``.
    """
    cap = min(half, (x1 - x0) / 2) if rounded else 0.0
    xs = np.linspace(x0 + cap, x1 - cap, n)
    top = np.stack([xs, center(xs) - half], axis=1)
    bottom = np.stack([xs[::-1], center(xs[::-1]) + half], axis=1)
    parts = [top]
    if rounded and cap > 0:
        t = np.linspace(-math.pi / 2, math.pi / 2, 5)[1:-1]
        yc = center(np.array([x1 - cap]))[0]
        parts.append(np.stack([x1 - cap + cap * np.cos(t), yc + half * np.sin(t)], axis=1))
    parts.append(bottom)
    if rounded and cap > 0:
        t = np.linspace(math.pi / 2, 3 * math.pi / 2, 5)[1:-1]
        yc = center(np.array([x0 + cap]))[0]
        parts.append(np.stack([x0 + cap + cap * np.cos(t), yc + half * np.sin(t)], axis=1))
    return np.vstack(parts)


def _uniform(rng, bounds) -> float:
    lo, hi = bounds
    return float(lo if lo == hi else rng.uniform(lo, hi))


def _integer(rng, bounds) -> int:
    lo, hi = bounds
    return int(rng.integers(lo, hi + 1))


def _sample_flags(cfg: CorpusConfig, index: int, rng) -> dict[str, int]:
    if cfg.flag_cycle is not None:
        row = cfg.flag_cycle[index % len(cfg.flag_cycle)]
        return {n: int(v) for n, v in zip(GRANULARITY_NAMES, row)}
    draws = rng.random(4)
    return {
        n: int(draws[i] < cfg.keep_probability.get(n, 1.0))
        for i, n in enumerate(GRANULARITY_NAMES)
    }


def generate_sample(cfg: CorpusConfig, index: int) -> tuple[SampleRecord, np.ndarray]:
    """Render sample ``index``; returns the record and an ``(H, W, 3)`` uint8 raster.

    Output depends only on ``(cfg, index)``.
    """
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.image_size
    s = float(size)

    margin = _uniform(rng, cfg.page_margin) * s
    skew = _uniform(rng, cfg.perspective) * s
    rect = np.array([[margin, margin], [s - margin, margin], [s - margin, s - margin], [margin, s - margin]])
    page = rect + rng.uniform(-skew, skew, size=(4, 2))
    page = np.clip(page, 0.0, s)
    # content area stays clear of the skewed page edges
    inset = skew + 0.03 * s
    cx0, cy0, cx1, cy1 = margin + inset, margin + inset, s - margin - inset, s - margin - inset

    n_para = _integer(rng, cfg.paragraphs)
    line_h = _uniform(rng, cfg.line_height) * s
    pitch = 1.3 * line_h
    para_pad = 0.25 * line_h
    amp_max = cfg.curvature[1] * s
    lines_per_para = [_integer(rng, cfg.lines_per_paragraph) for _ in range(n_para)]
    para_heights = [n * pitch + 2 * para_pad + 2 * amp_max for n in lines_per_para]
    gap = 0.4 * line_h
    needed = sum(para_heights) + gap * (n_para - 1)
    if needed > cy1 - cy0:
        raise CorpusError(
            f"paragraphs x lines_per_paragraph x line_height need {needed:.1f}px "
            f"but the page body offers {cy1 - cy0:.1f}px"
        )
    word_h = 0.7 * line_h
    min_word_w = cfg.word_aspect[0] * word_h
    if min_word_w + 2 * para_pad + 0.3 * line_h > cx1 - cx0:
        raise CorpusError(
            f"word_aspect/line_height give words at least {min_word_w:.1f}px wide "
            f"but the page body is only {cx1 - cx0:.1f}px wide"
        )

    img = np.empty((size, size, 3))
    img[:] = 0.93 + 0.04 * rng.random(3)
    page_shade = 0.62 + 0.1 * rng.random()
    _paint(img, page, [page_shade, page_shade, page_shade * 0.97])

    words, lines, paras = [], [], []
    slack = (cy1 - cy0) - needed
    y = cy0 + rng.uniform(0, slack / 2 if slack > 0 else 0)
    for p_i in range(n_para):
        ph = para_heights[p_i]
        width_frac = rng.uniform(0.6, 1.0)
        pw = (cx1 - cx0) * width_frac
        px0 = cx0 + rng.uniform(0, (cx1 - cx0) - pw)
        px1 = px0 + pw
        class_id = int(rng.integers(cfg.num_para_classes))
        para_poly = geometry.box_polygon(geometry.AABox(px0, y, px1, y + ph))
        para_color = _para_tint(class_id) * page_shade / 0.62 * 0.9
        _paint(img, para_poly, para_color)
        paras.append(TextInstance(Granularity.PARA, class_id, para_poly))

        base = y + para_pad + amp_max
        for _ in range(lines_per_para[p_i]):
            curved = rng.random() < cfg.curved_probability
            amp = _uniform(rng, cfg.curvature) * s if curved else 0.0
            period = rng.uniform(0.8, 1.6) * pw
            phase = rng.uniform(0, 2 * math.pi)
            mid = base + 0.5 * line_h

            def center(x, mid=mid, amp=amp, period=period, phase=phase):
                return mid + amp * np.sin(2 * math.pi * x / period + phase)

            inner_x0 = px0 + para_pad
            inner_x1 = px1 - para_pad
            n_words = _integer(rng, cfg.words_per_line)
            widths = [_uniform(rng, cfg.word_aspect) * word_h for _ in range(n_words)]
            word_gap = 0.45 * word_h
            while len(widths) > 1 and sum(widths) + word_gap * (len(widths) - 1) > inner_x1 - inner_x0:
                widths.pop()
            if widths[0] > inner_x1 - inner_x0:
                widths[0] = inner_x1 - inner_x0
            used = sum(widths) + word_gap * (len(widths) - 1)
            x = inner_x0 + rng.uniform(0, max(inner_x1 - inner_x0 - used, 0.0)) * 0.5
            word_polys = []
            for ww in widths:
                word_polys.append(_band(x, x + ww, center, word_h / 2, 6, rounded=True))
                x += ww + word_gap
            lx0 = word_polys[0][:, 0].min() - 0.12 * line_h
            lx1 = word_polys[-1][:, 0].max() + 0.12 * line_h
            line_poly = _band(lx0, lx1, center, 0.45 * line_h, 12, rounded=False)
            lines.append(TextInstance(Granularity.LINE, 0, line_poly))
            _paint(img, line_poly, para_color * 0.9)
            ink = 0.08 + 0.12 * rng.random()
            for wp in word_polys:
                _paint(img, wp, [ink, ink, ink])
                words.append(TextInstance(Granularity.WORD, 0, wp))
            base += pitch
        y += ph + gap

    if cfg.noise > 0:
        img = img + rng.normal(0.0, cfg.noise, size=img.shape)
    raster = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)

    flags = _sample_flags(cfg, index, rng)
    by_level = {
        Granularity.WORD: words,
        Granularity.LINE: lines,
        Granularity.PARA: paras,
        Granularity.PAGE: [TextInstance(Granularity.PAGE, 0, page)],
    }
    instances = [
        inst for level in LEVELS if flags[level.key] for inst in by_level[level]
    ]
    sid = f"{cfg.seed:04d}-{index:06d}"
    record = SampleRecord(
        id=sid,
        image=f"images/{sid}.png",
        width=size,
        height=size,
        flags=flags,
        instances=instances,
    )
    return record, raster


def generate_corpus(cfg: CorpusConfig, count: int, start: int = 0):
    return [generate_sample(cfg, start + i) for i in range(count)]


# --- augmentation --------------------------------------------------------------

def flip_augment(record: SampleRecord, raster: np.ndarray) -> tuple[SampleRecord, np.ndarray]:
    """Mirror the raster and every polygon horizontally; flags are untouched."""
    w = record.width
    flipped = []
    for inst in record.instances:
        poly = inst.polygon.copy()
        poly[:, 0] = w - poly[:, 0]
        mask = inst.mask_rle
        if mask is not None:
            m = geometry.rle_to_mask(mask, record.height, record.width)[:, ::-1]
            mask = geometry.mask_to_rle(m)
        flipped.append(replace(inst, polygon=poly, mask_rle=mask))
    return replace(record, instances=flipped, flags=dict(record.flags)), np.ascontiguousarray(raster[:, ::-1])


# --- dataset IO ----------------------------------------------------------------

INDEX_FILE = "index.jsonl"


def _instance_from_json(obj: dict, where: str) -> TextInstance:
    for key in ("granularity", "polygon"):
        if key not in obj:
            raise DatasetFormatError(f"{where}: instance missing {key!r}")
    try:
        level = Granularity.parse(obj["granularity"])
        polygon = geometry.as_polygon(obj["polygon"])
    except ValueError as exc:
        raise DatasetFormatError(f"{where}: {exc}") from None
    return TextInstance(
        granularity=level,
        class_id=int(obj.get("class_id", 0)),
        polygon=polygon,
        score=None if obj.get("score") is None else float(obj["score"]),
        mask_rle=obj.get("mask_rle"),
    )


def record_from_json(obj: dict, where: str = "<record>") -> SampleRecord:
    if not isinstance(obj, dict):
        raise DatasetFormatError(f"{where}: expected a JSON object")
    for key in ("id", "image", "width", "height", "flags", "instances"):
        if key not in obj:
            raise DatasetFormatError(f"{where}: missing {key!r}")
    flags = obj["flags"]
    if not isinstance(flags, dict) or set(flags) != set(GRANULARITY_NAMES):
        raise DatasetFormatError(f"{where}: 'flags' must map each of {GRANULARITY_NAMES} to 0/1")
    if any(v not in (0, 1) for v in flags.values()):
        raise DatasetFormatError(f"{where}: flag values must be 0 or 1")
    instances = [
        _instance_from_json(inst, f"{where}: instance {k}") for k, inst in enumerate(obj["instances"])
    ]
    return SampleRecord(
        id=str(obj["id"]),
        image=str(obj["image"]),
        width=int(obj["width"]),
        height=int(obj["height"]),
        flags={n: int(flags[n]) for n in GRANULARITY_NAMES},
        instances=instances,
    )


def write_records(records: Iterable[SampleRecord], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")))
            fh.write("\n")


def read_records(path: str | os.PathLike) -> list[SampleRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{where}: invalid JSON ({exc.msg})") from None
            records.append(record_from_json(obj, where))
    return records


def write_dataset(samples: Sequence[tuple[SampleRecord, np.ndarray]], directory: str | os.PathLike) -> None:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for rec, raster in samples:
        Image.fromarray(raster).save(root / rec.image, optimize=False)
    write_records([rec for rec, _ in samples], root / INDEX_FILE)


def read_dataset(directory: str | os.PathLike, load_images: bool = True):
    """Read a dataset directory.

    Returns a list of records, or of ``(record, raster)`` pairs when
    ``load_images`` is true.
    """
    root = Path(directory)
    index = root / INDEX_FILE
    if not index.exists():
        raise DatasetFormatError(f"{root}: no {INDEX_FILE}")
    records = read_records(index)
    for lineno, rec in enumerate(records, start=1):
        for inst in rec.instances:
            if not rec.flags[inst.granularity.key]:
                raise DatasetFormatError(
                    f"{index}:{lineno}: {inst.granularity.key} instance present but its flag is 0"
                )
    if not load_images:
        return records
    out = []
    for rec in records:
        raster = load_raster(root / rec.image)
        if raster.shape[:2] != (rec.height, rec.width):
            raise DatasetFormatError(
                f"{root / rec.image}: raster is {raster.shape[1]}x{raster.shape[0]}, "
                f"record says {rec.width}x{rec.height}"
            )
        out.append((rec, raster))
    return out


def load_raster(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
