"""Image pyramid and shared-parameter multi-stream evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensor_nn import NetGeometry, NetworkSpec, forward_batch, heatmap_shape, net_geometry

log = logging.getLogger(__name__)

DEFAULT_TARGETS = (600, 400, 260, 170, 100, 60)
MAX_UPSCALE = 2.0


class DegenerateImage(ValueError):
    pass


class EmptyPyramid(ValueError):
    pass


@dataclass
class PyramidConfig:
    target_long_edges: tuple[int, ...] = DEFAULT_TARGETS
    interpolation: str = "bilinear"

    def __post_init__(self):
        t = tuple(int(v) for v in self.target_long_edges)
        if not t or any(b >= a for a, b in zip(t, t[1:])) or min(t) < 1:
            raise ValueError("target_long_edges must be non-empty, positive and strictly decreasing")
        if self.interpolation != "bilinear":
            raise ValueError("only bilinear interpolation is supported")
        self.target_long_edges = t


@dataclass
class ScaledImage:
    tensor: np.ndarray
    scale_factor: float
    original_size: tuple[int, int]  # (width, height)

    @property
    def size(self) -> tuple[int, int]:
        return self.tensor.shape[1], self.tensor.shape[0]


@dataclass
class Stream:
    """One pyramid level together with its heatmap."""
    heatmap: np.ndarray  # (rows, cols) in [0, 1]
    level: ScaledImage
    geometry: NetGeometry = field(default=None)


def _axis_coords(n_out: int, n_in: int, start: float = 0.0, extent: float | None = None):
    # Pixel-centre sampling of the source span [start, start + extent).
    extent = n_in if extent is None else extent
    src = start + (np.arange(n_out) + 0.5) * (extent / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def crop_resize(image: np.ndarray, box, out_w: int, out_h: int) -> np.ndarray:
    """Bilinearly resample the region ``box = (x, y, w, h)`` to out_h x out_w."""
    x, y, w, h = box
    y0, y1, fy = _axis_coords(out_h, image.shape[0], y, h)
    x0, x1, fx = _axis_coords(out_w, image.shape[1], x, w)
    # separable: rows first, then columns
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    rows = image[y0] * (1 - fy) + image[y1] * fy
    return rows[:, x0] * (1 - fx) + rows[:, x1] * fx


def resize(image: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    if (out_h, out_w) == image.shape[:2]:
        return image.copy()
    return crop_resize(image, (0, 0, image.shape[1], image.shape[0]), out_w, out_h)


def scaled_size(width: int, height: int, target: int) -> tuple[int, int, float]:
    """(w, h, scale) so that the longer edge becomes ``target``."""
    scale = target / max(width, height)
    if width >= height:
        return target, max(1, round(height * scale)), scale
    return max(1, round(width * scale)), target, scale


def build_pyramid(image: np.ndarray, cfg: PyramidConfig | None = None) -> list[ScaledImage]:
    cfg = cfg or PyramidConfig()
    if image.ndim != 3 or image.shape[2] != 3:
        raise DegenerateImage(f"expected an RGB image, got shape {image.shape}")
    h, w = image.shape[:2]
    if min(h, w) < 8:
        raise DegenerateImage(f"image {w}x{h} is too small; both edges must be >= 8")
    levels = []
    for target in cfg.target_long_edges:
        lw, lh, scale = scaled_size(w, h, target)
        if scale > MAX_UPSCALE:
            log.info("skipping pyramid level %d: more than %gx upscale", target, MAX_UPSCALE)
            continue
        levels.append(ScaledImage(resize(image, lw, lh), scale, (w, h)))
    return levels


def run_streams(net: NetworkSpec, pyramid: list[ScaledImage], dtype=np.float64) -> list[Stream]:
    """Evaluate ``net`` on each level; levels smaller than one window are skipped."""
    geom = net_geometry(net)
    streams = []
    for level in pyramid:
        lh, lw = level.tensor.shape[:2]
        if min(lh, lw) < geom.window:
            log.info("skipping %dx%d level: smaller than the %d px window", lw, lh, geom.window)
            continue
        heatmap_shape(net, lh, lw)
        hm = forward_batch(net, level.tensor[None], dtype=dtype)[0]
        streams.append(Stream(hm.astype(np.float64), level, geom))
    if not streams:
        raise EmptyPyramid("every pyramid level is smaller than the network window")
    return streams
