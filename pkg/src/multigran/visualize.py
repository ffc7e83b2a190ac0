"""SVG and PNG overlays of detections on their source images.

Colors per granularity: word yellow, line green, paragraph brown, page
magenta. Instance masks, when present, are drawn as translucent fills of
the same color; polygons as outlines.
"""
from __future__ import annotations

import os
from pathlib import Path
from typing import Optional
from xml.sax.saxutils import quoteattr

import numpy as np
from PIL import Image, ImageDraw

from . import geometry
from .corpus import Granularity, SampleRecord

COLORS = {
    "word": (255, 255, 0),
    "line": (0, 200, 0),
    "para": (139, 69, 19),
    "page": (255, 0, 255),
}
MASK_ALPHA = 0.35
STROKE = 1.5


def _hex(rgb) -> str:
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _points(poly: np.ndarray) -> str:
    return " ".join(f"{x:.2f},{y:.2f}" for x, y in poly)


def _mask_path(mask: np.ndarray) -> str:
    """One ``M x y h w v 1 h -w z`` rectangle per horizontal run of ones."""
    parts = []
    for y, row in enumerate(mask.astype(bool)):
        padded = np.concatenate([[False], row, [False]])
        edges = np.flatnonzero(padded[1:] != padded[:-1])
        for start, stop in zip(edges[::2], edges[1::2]):
            parts.append(f"M{start} {y}h{stop - start}v1h{start - stop}z")
    return "".join(parts)


def render_svg(record: SampleRecord, image_href: Optional[str]) -> str:
    """SVG overlay; one ``<g>`` layer per granularity that has instances."""
    w, h = record.width, record.height
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" '
        f'width="{w}" height="{h}" viewBox="0 0 {w} {h}">'
    ]
    if image_href is not None:
        out.append(f'<image x="0" y="0" width="{w}" height="{h}" xlink:href={quoteattr(image_href)}/>')
    # coarse to fine so words end up on top
    for level in reversed(Granularity):
        insts = record.instances_of(level)
        if not insts:
            continue
        color = _hex(COLORS[level.key])
        out.append(f'<g class="{level.key}" stroke="{color}" fill="none" stroke-width="{STROKE}">')
        for inst in insts:
            if inst.mask_rle is not None:
                mask = geometry.rle_to_mask(inst.mask_rle, h, w)
                out.append(f'<path d="{_mask_path(mask)}" fill="{color}" fill-opacity="{MASK_ALPHA}" stroke="none"/>')
            title = f"{level.key} class {inst.class_id}"
            if inst.score is not None:
                title += f" score {inst.score:.3f}"
            out.append(f'<polygon points="{_points(inst.polygon)}"><title>{title}</title></polygon>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_png(record: SampleRecord, raster: Optional[np.ndarray]) -> Image.Image:
    """Raster version of :func:`render_svg`."""
    w, h = record.width, record.height
    if raster is None:
        raster = np.full((h, w, 3), 255, dtype=np.uint8)
    canvas = np.asarray(raster, dtype=np.float64)[..., :3].copy()
    for level in reversed(Granularity):
        color = np.array(COLORS[level.key], dtype=np.float64)
        for inst in record.instances_of(level):
            if inst.mask_rle is not None:
                m = geometry.rle_to_mask(inst.mask_rle, h, w).astype(bool)
                canvas[m] = (1 - MASK_ALPHA) * canvas[m] + MASK_ALPHA * color
    img = Image.fromarray(np.clip(np.rint(canvas), 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(img)
    for level in reversed(Granularity):
        for inst in record.instances_of(level):
            pts = [tuple(map(float, p)) for p in inst.polygon]
            draw.line(pts + pts[:1], fill=COLORS[level.key], width=1)
    return img


def write_overlays(
    records, dataset_dir: str | os.PathLike, out_dir: str | os.PathLike, rasters: Optional[dict] = None
) -> list[Path]:
    """Write ``<id>.svg`` and ``<id>.png`` for every prediction record.

    The SVG references the dataset image by a path relative to ``out_dir``.
    ``rasters`` maps record ids to images; missing ones use a white page.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for rec in records:
        href = os.path.relpath(Path(dataset_dir) / rec.image, out).replace(os.sep, "/")
        svg_path = out / f"{rec.id}.svg"
        svg_path.write_text(render_svg(rec, href), encoding="utf-8")
        raster = None if rasters is None else rasters.get(rec.id)
        render_png(rec, raster).save(out / f"{rec.id}.png")
        written.append(svg_path)
    return written


__all__ = ["COLORS", "render_png", "render_svg", "write_overlays"]
