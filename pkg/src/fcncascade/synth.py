"""Procedural stand-in for a face dataset.

Images are smooth coloured textures with clutter (plain discs, bars,
rectangles).  A "face" is a disc with a darker rim, two dark eye blobs and a
mouth bar; its ground-truth box is the square bounding the disc.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import read_image, write_image
from .pyramid import resize


@dataclass
class AnnotatedImage:
    image_id: str
    image: np.ndarray
    boxes: list[tuple[int, int, int, int]] = field(default_factory=list)


@dataclass
class SynthParams:
    long_edge: tuple[int, int] = (320, 480)
    aspect: tuple[float, float] = (0.7, 1.0)  # short / long
    faces: tuple[int, int] = (1, 3)
    face_side: tuple[int, int] = (30, 300)
    max_face_fraction: float = 0.7  # of the short edge
    clutter: tuple[int, int] = (4, 10)
    n_backgrounds: int | None = None  # default: a quarter of n_images


def _smooth_field(rng, h, w, cells, channels, amp):
    grid = rng.uniform(-amp, amp, (cells[0], cells[1], channels))
    return resize(grid, w, h)


def _background(rng, h, w, clutter):
    base = rng.uniform(0.2, 0.8, 3)
    img = base + _smooth_field(rng, h, w, (4, 5), 3, 0.25)
    img += _smooth_field(rng, h, w, (20, 26), 3, 0.08)
    for _ in range(rng.integers(clutter[0], clutter[1] + 1)):
        kind = rng.integers(3)
        color = rng.uniform(0, 1, 3)
        size = rng.uniform(15, 0.5 * min(h, w))
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        # paint only the shape's bounding square; the mask is zero outside it
        reach = (size if kind == 2 else size / 2) + 1
        x0, x1 = max(0, int(cx - reach)), min(w, int(cx + reach) + 1)
        y0, y1 = max(0, int(cy - reach)), min(h, int(cy + reach) + 1)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        if kind == 0:  # plain disc
            mask = np.clip(size / 2 - np.hypot(xx - cx, yy - cy) + 0.5, 0, 1)
        elif kind == 1:  # rectangle
            ax, ay = size / 2, rng.uniform(0.3, 1.0) * size / 2
            mask = np.clip(np.minimum(ax - np.abs(xx - cx), ay - np.abs(yy - cy)) + 0.5, 0, 1)
        else:  # bar
            t = rng.uniform(0, np.pi)
            d = np.abs((xx - cx) * np.sin(t) - (yy - cy) * np.cos(t))
            along = np.abs((xx - cx) * np.cos(t) + (yy - cy) * np.sin(t))
            mask = np.clip(np.minimum(rng.uniform(2, 6) - d, size - along) + 0.5, 0, 1)
        patch = img[y0:y1, x0:x1]
        img[y0:y1, x0:x1] = patch * (1 - mask[..., None]) + color * mask[..., None]
    img += rng.normal(0, 0.02, img.shape)
    return img


def draw_face(img, rng, x, y, s):
    """Paint a face pattern into the square box (x, y, s, s) in place."""
    h, w = img.shape[:2]
    x1, y1 = min(w, x + s), min(h, y + s)
    yy, xx = np.mgrid[y:y1, x:x1].astype(np.float64)
    r = s / 2.0
    u, v = (xx + 0.5 - x - r) / r, (yy + 0.5 - y - r) / r  # unit disc coordinates
    px = r  # pixels per unit, used for one-pixel soft edges

    def soft(dist):
        return np.clip(dist * px + 0.5, 0, 1)[..., None]

    skin = rng.uniform(0.55, 1.0, 3)
    rim = skin * rng.uniform(0.25, 0.5)
    dark = rng.uniform(0.0, 0.15, 3)
    disc = soft(1 - np.hypot(u, v))
    inner = soft(0.82 - np.hypot(u, v))
    face = rim * (1 - inner) + skin * inner
    ex = rng.uniform(0.3, 0.4)
    ey = rng.uniform(-0.3, -0.15)
    er = rng.uniform(0.13, 0.18)
    for sx in (-1, 1):
        eye = soft(er - np.hypot(u - sx * ex, v - ey))
        face = face * (1 - eye) + dark * eye
    mouth = soft(np.minimum(0.08 - np.abs(v - 0.42), 0.35 - np.abs(u)))
    face = face * (1 - mouth) + dark * mouth
    patch = img[y:y1, x:x1]
    img[y:y1, x:x1] = patch * (1 - disc) + face * disc


def _place_faces(rng, h, w, params):
    n = int(rng.integers(params.faces[0], params.faces[1] + 1))
    hi = min(params.face_side[1], int(params.max_face_fraction * min(h, w)))
    lo = params.face_side[0]
    boxes = []
    for _ in range(n):
        for _attempt in range(50):
            s = int(round(np.exp(rng.uniform(np.log(lo), np.log(hi)))))
            bx, by = int(rng.integers(0, w - s + 1)), int(rng.integers(0, h - s + 1))
            gap = 4
            if all(bx + s + gap <= ox or ox + os_ + gap <= bx or by + s + gap <= oy or oy + os_ + gap <= by
                   for ox, oy, os_, _ in boxes):
                boxes.append((bx, by, s, s))
                break
    return boxes


def _size(rng, params):
    long = int(rng.integers(params.long_edge[0], params.long_edge[1] + 1))
    short = int(round(long * rng.uniform(*params.aspect)))
    return (short, long) if rng.random() < 0.5 else (long, short)


def synth_dataset(seed: int, n_images: int, params: SynthParams | None = None):
    """Return ``(annotated_images, background_images)``, deterministic in ``seed``."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    params = params or SynthParams()
    rng = np.random.default_rng(seed)
    annotated = []
    for i in range(n_images):
        h, w = _size(rng, params)
        img = _background(rng, h, w, params.clutter)
        boxes = _place_faces(rng, h, w, params)
        for bx, by, s, _ in boxes:
            draw_face(img, rng, bx, by, s)
        annotated.append(AnnotatedImage(f"img{i:05d}", np.clip(img, 0, 1), boxes))
    n_bg = params.n_backgrounds if params.n_backgrounds is not None else max(1, n_images // 4)
    backgrounds = []
    for i in range(n_bg):
        h, w = _size(rng, params)
        backgrounds.append(AnnotatedImage(f"bg{i:05d}", np.clip(_background(rng, h, w, params.clutter), 0, 1), []))
    return annotated, backgrounds


def quantize(images):
    """Round pixel values to the 8-bit grid so in-memory data equals on-disk data."""
    for a in images:
        a.image = np.rint(a.image * 255.0) / 255.0
    return images


def write_dataset(out_dir, annotated, backgrounds) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for a in list(annotated) + list(backgrounds):
        write_image(a.image, out / "images" / f"{a.image_id}.ppm")
        lines.append(json.dumps({"image": a.image_id, "boxes": [list(b) for b in a.boxes]}))
    (out / "annotations.jsonl").write_text("\n".join(lines) + "\n")


def read_dataset(data_dir):
    """Load a dataset directory; images without boxes are returned as backgrounds."""
    data = Path(data_dir)
    annotated, backgrounds = [], []
    for line in (data / "annotations.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        item = AnnotatedImage(str(doc["image"]), read_image(data / "images" / f"{doc['image']}.ppm"),
                              [tuple(int(v) for v in b) for b in doc["boxes"]])
        (annotated if item.boxes else backgrounds).append(item)
    return annotated, backgrounds
