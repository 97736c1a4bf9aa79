"""Back-projection of heatmaps, score-map fusion and box proposals.

A candidate box is scored by its mass on the score map times its mean
density, ``omega = mass * mass / area``, read from a summed-area table in
four lookups.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .evaluation import iou_matrix
from .tensor_nn import NetGeometry


class GeometryMismatch(ValueError):
    pass


@dataclass
class ScoreMap:
    values: np.ndarray  # (height, width), >= 0
    contributing_streams: int = 1

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def normalized(self) -> np.ndarray:
        return self.values / max(self.contributing_streams, 1)


@dataclass
class Proposal:
    box: tuple[int, int, int, int]
    omega: float
    mean_score: float
    source_stage: int = 1
    confidence: float = 0.0
    # region a refinement may not leave: the context-padded stage-1 box
    root: tuple[int, int, int, int] | None = None
    trace: list = field(default_factory=list)


@dataclass
class ProposalConfig:
    threshold: float = 0.25  # omega cut as a fraction of the window area
    enlarge_factor: float = 1.2
    dedup_iou: float = 0.5
    max_proposals: int = 50
    # candidates must be omega peaks within this many cells of their own
    # stream's grid; 0 keeps every cell
    peak_radius: int = 2

    def __post_init__(self):
        if self.threshold < 0 or self.enlarge_factor < 1 or not 0 < self.dedup_iou <= 1 \
                or self.max_proposals < 1 or self.peak_radius < 0:
            raise ValueError(f"invalid proposal config {self}")


def field_rects(geom: NetGeometry, scale: float, rows: int, cols: int):
    """Float receptive-field edges of every heatmap cell in original pixels.

    Returns ``(x0, x1, y0, y1)`` as arrays of length cols, cols, rows, rows.
    """
    xs = geom.offset + np.arange(cols) * geom.stride
    ys = geom.offset + np.arange(rows) * geom.stride
    return xs / scale, (xs + geom.window) / scale, ys / scale, (ys + geom.window) / scale


def _pixel_edges(lo, hi, limit):
    a = np.clip(np.rint(lo), 0, limit).astype(np.intp)
    b = np.clip(np.rint(hi), 0, limit).astype(np.intp)
    return a, b


def accumulate_fields(heatmap, geom: NetGeometry, scale: float, width: int, height: int):
    """Summed scores and coverage counts of every cell's clamped field."""
    hm = np.asarray(heatmap, dtype=np.float64)
    if hm.ndim == 3:
        hm = hm[:, :, 0]
    rows, cols = hm.shape
    fx0, fx1, fy0, fy1 = field_rects(geom, scale, rows, cols)
    x0, x1 = _pixel_edges(fx0, fx1, width)
    y0, y1 = _pixel_edges(fy0, fy1, height)
    ok = (x1 > x0)[None, :] & (y1 > y0)[:, None]
    Y0, X0 = np.meshgrid(y0, x0, indexing="ij")
    Y1, X1 = np.meshgrid(y1, x1, indexing="ij")
    diff_s = np.zeros((height + 1, width + 1))
    diff_c = np.zeros((height + 1, width + 1))
    w = np.where(ok, hm, 0.0)
    c = ok.astype(np.float64)
    for yy, xx, sign in ((Y0, X0, 1), (Y0, X1, -1), (Y1, X0, -1), (Y1, X1, 1)):
        np.add.at(diff_s, (yy.ravel(), xx.ravel()), sign * w.ravel())
        np.add.at(diff_c, (yy.ravel(), xx.ravel()), sign * c.ravel())
    total = diff_s.cumsum(0).cumsum(1)[:height, :width]
    cover = np.rint(diff_c.cumsum(0).cumsum(1)[:height, :width])
    return total, cover


def project_heatmap(heatmap, geom: NetGeometry, level, normalize: bool = True) -> ScoreMap:
    """Paint each cell's score over its receptive field at original resolution.

    With ``normalize`` the per-pixel sum is divided by the number of fields
    covering the pixel, so values stay in [0, 1].
    """
    hm = np.asarray(heatmap, dtype=np.float64)
    if hm.ndim == 3:
        hm = hm[:, :, 0]
    lw, lh = level.size
    if geom.offset == 0:
        expected = ((lh - geom.window) // geom.stride + 1, (lw - geom.window) // geom.stride + 1)
        if hm.shape != expected:
            raise GeometryMismatch(f"heatmap {hm.shape} does not match level {lw}x{lh}, expected {expected}")
    width, height = level.original_size
    total, cover = accumulate_fields(hm, geom, level.scale_factor, width, height)
    if normalize:
        total = np.where(cover > 0, total / np.maximum(cover, 1), 0.0)
    return ScoreMap(np.maximum(total, 0.0), 1)


def fuse_streams(maps: list[ScoreMap]) -> ScoreMap:
    if not maps:
        raise ValueError("nothing to fuse")
    shape = maps[0].values.shape
    total = np.zeros(shape)
    for m in maps:
        if m.values.shape != shape:
            raise GeometryMismatch(f"score map {m.values.shape} differs from {shape}")
        total += m.values
    return ScoreMap(total, sum(m.contributing_streams for m in maps))


def integral_image(values) -> np.ndarray:
    """Summed-area table with a leading zero row and column."""
    v = values.values if isinstance(values, ScoreMap) else np.asarray(values, dtype=np.float64)
    table = np.zeros((v.shape[0] + 1, v.shape[1] + 1))
    np.cumsum(np.cumsum(v, axis=0), axis=1, out=table[1:, 1:])
    return table


def box_mass(table: np.ndarray, x, y, w, h):
    return table[y + h, x + w] - table[y, x + w] - table[y + h, x] + table[y, x]


def box_score(table: np.ndarray, box) -> float:
    x, y, w, h = (int(v) for v in box)
    H, W = table.shape[0] - 1, table.shape[1] - 1
    if w * h < 1 or x < 0 or y < 0 or x + w > W or y + h > H:
        raise ValueError(f"box {box} is outside the {W}x{H} map or empty")
    mass = box_mass(table, x, y, w, h)
    return float(mass * (mass / (h * w)))


def box_scores(table: np.ndarray, boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised (omega, mass) for integer boxes of shape (n, 4)."""
    x, y, w, h = boxes.T
    mass = box_mass(table, x, y, w, h)
    return mass * mass / (w * h), mass


def candidate_grid(stream, width: int, height: int, enlarge: float = 1.0) -> np.ndarray:
    """Integer boxes (x, y, w, h) of shape (rows, cols, 4), one per heatmap cell.

    Each field is scaled by ``enlarge`` about its centre and clamped, so
    boxes of cells outside the image may be empty.
    """
    rows, cols = stream.heatmap.shape
    fx0, fx1, fy0, fy1 = field_rects(stream.geometry, stream.level.scale_factor, rows, cols)
    half_w = (fx1 - fx0) * enlarge / 2
    half_h = (fy1 - fy0) * enlarge / 2
    cx, cy = (fx0 + fx1) / 2, (fy0 + fy1) / 2
    x0, x1 = _pixel_edges(cx - half_w, cx + half_w, width)
    y0, y1 = _pixel_edges(cy - half_h, cy + half_h, height)
    Y0, X0 = np.meshgrid(y0, x0, indexing="ij")
    Y1, X1 = np.meshgrid(y1, x1, indexing="ij")
    return np.stack([X0, Y0, X1 - X0, Y1 - Y0], -1)


def candidate_boxes(streams, width: int, height: int, enlarge: float = 1.0) -> np.ndarray:
    """Non-empty candidate boxes of every stream, flattened in row-major cell order."""
    out = [candidate_grid(s, width, height, enlarge).reshape(-1, 4) for s in streams]
    if not out:
        return np.zeros((0, 4), dtype=np.intp)
    boxes = np.concatenate(out)
    return boxes[(boxes[:, 2] >= 1) & (boxes[:, 3] >= 1)]


def local_peaks(values: np.ndarray, radius: int) -> np.ndarray:
    """Mask of cells not exceeded anywhere in their (2r+1)^2 neighbourhood."""
    if radius < 1:
        return np.ones(values.shape, dtype=bool)
    padded = np.pad(values, radius, constant_values=-np.inf)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (2 * radius + 1, 2 * radius + 1))
    return values >= windows.max(axis=(2, 3))


def rank_order(scores: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties by smaller (y, x, w, h)."""
    return np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 0], boxes[:, 1], -scores))


def greedy_dedup(boxes: np.ndarray, order: np.ndarray, iou_thresh: float, limit: int) -> list[int]:
    """Greedy suppression along ``order``; returns kept indices (at most ``limit``)."""
    alive = np.ones(len(order), dtype=bool)
    ordered = boxes[order]
    keep = []
    pos = 0
    while len(keep) < limit:
        nxt = np.flatnonzero(alive[pos:])
        if nxt.size == 0:
            break
        pos += nxt[0]
        keep.append(int(order[pos]))
        alive[pos] = False
        ov = iou_matrix(ordered[pos : pos + 1], ordered[pos + 1 :])[0]
        alive[pos + 1 :] &= ov < iou_thresh
        pos += 1
    return keep


def propose_boxes(score: ScoreMap, streams, cfg: ProposalConfig | None = None,
                  window: int | None = None, stream_maps=None) -> list[Proposal]:
    """Threshold, deduplicate and rank candidate boxes by omega.

    ``streams`` carries each stream's geometry, scale and heatmap size.  The
    omega cut is ``cfg.threshold * window**2`` on the map normalised by its
    stream count; ``window`` defaults to the first stream's network window.

    Within each stream only cells whose omega is a local peak over
    ``cfg.peak_radius`` neighbouring cells remain candidates.  Peaks are
    found on the stream's own projected map when ``stream_maps`` is given
    (one per stream), otherwise on ``score``.  Ranking always uses ``score``.
    """
    cfg = cfg or ProposalConfig()
    if not streams:
        return []
    if stream_maps is not None and len(stream_maps) != len(streams):
        raise ValueError(f"{len(stream_maps)} stream maps for {len(streams)} streams")
    table = integral_image(score.normalized())
    parts = []
    for i, s in enumerate(streams):
        grid = candidate_grid(s, score.width, score.height, cfg.enlarge_factor)
        flat = grid.reshape(-1, 4)
        valid = (flat[:, 2] >= 1) & (flat[:, 3] >= 1)
        own = table if stream_maps is None else integral_image(stream_maps[i].normalized())
        omega = np.zeros(len(flat))
        omega[valid] = box_scores(own, flat[valid])[0]
        peak = local_peaks(omega.reshape(grid.shape[:2]), cfg.peak_radius).ravel()
        parts.append(flat[valid & peak])
    boxes = np.concatenate(parts)
    if len(boxes) == 0:
        return []
    omega, mass = box_scores(table, boxes)
    window = window or streams[0].geometry.window
    cut = cfg.threshold * window * window
    sel = (omega >= cut) & (omega > 0)
    boxes, omega, mass = boxes[sel], omega[sel], mass[sel]
    order = rank_order(omega, boxes)
    keep = greedy_dedup(boxes, order, cfg.dedup_iou, cfg.max_proposals)
    return [Proposal(tuple(int(v) for v in boxes[i]), float(omega[i]),
                     float(mass[i] / (boxes[i, 2] * boxes[i, 3])), 1)
            for i in keep]
