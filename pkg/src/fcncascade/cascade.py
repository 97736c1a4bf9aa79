"""Three-stage detector: multi-scale proposals, then two zoom-in verifiers."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_nn as tn
from .pyramid import PyramidConfig, ScaledImage, Stream, build_pyramid, crop_resize, run_streams
from .score_map import (
    Proposal, ProposalConfig, ScoreMap, candidate_boxes, fuse_streams, greedy_dedup,
    integral_image, box_scores, project_heatmap, propose_boxes, rank_order,
)

# Inference precision; training and tests always use float64.
INFERENCE_DTYPE = np.dtype(os.environ.get("FCNCASCADE_INFER_DTYPE", "float64"))


class ModelError(ValueError):
    pass


def stage1_net(name: str = "stage1") -> tn.NetworkSpec:
    """Two conv layers and a fully convolutional head: stride 4, window 30."""
    return tn.NetworkSpec([
        tn.conv(3, 16, 3), tn.maxpool(2), tn.relu(),
        tn.conv(16, 16, 5), tn.maxpool(2), tn.relu(),
        tn.head(16, 5),
    ], name)


def stage2_net(name: str = "stage2") -> tn.NetworkSpec:
    """Four conv layers and a head: stride 4, window 32."""
    return tn.NetworkSpec([
        tn.conv(3, 16, 3), tn.relu(),
        tn.conv(16, 16, 3), tn.maxpool(2), tn.relu(),
        tn.conv(16, 24, 3), tn.relu(),
        tn.conv(24, 24, 3), tn.maxpool(2), tn.relu(),
        tn.head(24, 5),
    ], name)


def stage3_net(name: str = "stage3") -> tn.NetworkSpec:
    """Five conv layers and a head: stride 4, window 36."""
    return tn.NetworkSpec([
        tn.conv(3, 16, 3), tn.relu(),
        tn.conv(16, 16, 3), tn.maxpool(2), tn.relu(),
        tn.conv(16, 32, 3), tn.relu(),
        tn.conv(32, 32, 3), tn.maxpool(2), tn.relu(),
        tn.conv(32, 32, 3), tn.relu(),
        tn.head(32, 4),
    ], name)


@dataclass
class VerifyConfig:
    context: float = 0.25  # total growth of each side before cropping
    zooms: tuple[float, ...] = (1.0, 1.25, 1.5625, 1.953125)
    dedup_iou: float = 0.5


@dataclass
class CascadeModel:
    stage1: tn.NetworkSpec
    stage2: tn.NetworkSpec
    stage3: tn.NetworkSpec
    stage_thresholds: tuple[float, float] = (0.5, 0.7)
    proposal_cfg: ProposalConfig = field(default_factory=ProposalConfig)
    pyramid_cfg: PyramidConfig = field(default_factory=PyramidConfig)
    verify_cfg: VerifyConfig = field(default_factory=VerifyConfig)
    trained_stages: int = 3  # stages past this one still hold untrained weights

    def __post_init__(self):
        if not 1 <= self.trained_stages <= 3:
            raise ModelError(f"trained_stages must be 1, 2 or 3, got {self.trained_stages}")
        for t in self.stage_thresholds:
            if not 0.0 <= t <= 1.0:
                raise ModelError(f"stage threshold {t} outside [0, 1]")
        sizes = [self.stage1.n_params, self.stage2.n_params, self.stage3.n_params]
        if sizes != sorted(sizes):
            raise ModelError(f"stage capacities must not decrease: {sizes}")

    @property
    def stages(self):
        return [self.stage1, self.stage2, self.stage3]


@dataclass
class Detection:
    box: tuple[int, int, int, int]
    confidence: float
    trace: list = field(default_factory=list)


@dataclass
class DetectResult:
    detections: list[Detection]
    counts: tuple[int, int, int]
    score_map: ScoreMap | None = None
    proposals: list[list[Proposal]] = field(default_factory=list)


def context_region(box, context: float, width: int, height: int, root=None):
    """``box`` grown by ``context`` of its side (half on each side), clamped."""
    x, y, w, h = box
    x0, x1 = x - w * context / 2, x + w + w * context / 2
    y0, y1 = y - h * context / 2, y + h + h * context / 2
    bx0, by0, bx1, by1 = 0, 0, width, height
    if root is not None:
        rx, ry, rw, rh = root
        bx0, by0, bx1, by1 = max(rx, 0), max(ry, 0), min(rx + rw, width), min(ry + rh, height)
    x0, x1 = int(max(np.floor(x0), bx0)), int(min(np.ceil(x1), bx1))
    y0, y1 = int(max(np.floor(y0), by0)), int(min(np.ceil(y1), by1))
    return (x0, y0, max(x1 - x0, 1), max(y1 - y0, 1))


@dataclass
class RegionScan:
    """Local multi-zoom evaluation of one region."""
    region: tuple[int, int, int, int]
    frame_scale: float  # local frame pixels per original pixel
    streams: list[Stream]
    boxes: np.ndarray  # candidate windows in original coordinates
    scores: np.ndarray  # heatmap score of each candidate's cell
    omega: np.ndarray  # omega of each candidate on the local score map
    logits: np.ndarray  # pre-squash head output of each cell, for unsaturated ranking


def _local_levels(region, window: int, zooms):
    _, _, rw, rh = region
    short = min(rw, rh)
    out = []
    for z in zooms:
        f = window * z / short
        lw, lh = max(window, round(rw * f)), max(window, round(rh * f))
        out.append((lw, lh, f))
    return out


def scan_regions(regions, net: tn.NetworkSpec, image: np.ndarray, cfg: VerifyConfig,
                 dtype=None) -> list[RegionScan]:
    """Run ``net`` on every region at each zoom, batching equal-sized crops."""
    dtype = INFERENCE_DTYPE if dtype is None else dtype
    geom = tn.net_geometry(net)
    plans = [_local_levels(r, geom.window, cfg.zooms) for r in regions]
    groups: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for i, levels in enumerate(plans):
        for j, (lw, lh, _) in enumerate(levels):
            groups.setdefault((lh, lw), []).append((i, j))
    heat: dict[tuple[int, int], np.ndarray] = {}
    for (lh, lw), members in sorted(groups.items()):
        batch = np.stack([crop_resize(image, regions[i], lw, lh) for i, _ in members])
        maps = tn.forward_logits(net, batch.astype(dtype)).astype(np.float64)
        for (i, j), z in zip(members, maps):
            heat[i, j] = z

    scans = []
    for i, (region, levels) in enumerate(zip(regions, plans)):
        rw, rh = region[2], region[3]
        g = geom.window * max(cfg.zooms) / min(rw, rh)
        fw, fh = max(1, round(rw * g)), max(1, round(rh * g))
        logits = [heat[i, j] for j in range(len(levels))]
        streams = [Stream(tn.sigmoid(z), ScaledImage(None, f / g, (fw, fh)), geom)
                   for z, (_, _, f) in zip(logits, levels)]
        maps = [project_heatmap(s.heatmap, geom, _Level(s.level, lw, lh))
                for s, (lw, lh, _) in zip(streams, levels)]
        fused = fuse_streams(maps)
        local = candidate_boxes(streams, fw, fh, 1.0)
        omega, _ = box_scores(integral_image(fused.normalized()), local)
        cell_scores = np.concatenate([s.heatmap.ravel() for s in streams])
        boxes = _to_original(local, region, g)
        cell_logits = np.concatenate([z.ravel() for z in logits])
        scans.append(RegionScan(region, g, streams, boxes, cell_scores, omega, cell_logits))
    return scans


class _Level:
    """Level stand-in carrying its pixel size without the pixels."""

    def __init__(self, level: ScaledImage, width: int, height: int):
        self.scale_factor = level.scale_factor
        self.original_size = level.original_size
        self.size = (width, height)


def _to_original(local: np.ndarray, region, g: float) -> np.ndarray:
    rx, ry, rw, rh = region
    x0 = np.clip(np.rint(rx + local[:, 0] / g), rx, rx + rw - 1)
    y0 = np.clip(np.rint(ry + local[:, 1] / g), ry, ry + rh - 1)
    x1 = np.clip(np.rint(rx + (local[:, 0] + local[:, 2]) / g), x0 + 1, rx + rw)
    y1 = np.clip(np.rint(ry + (local[:, 1] + local[:, 3]) / g), y0 + 1, ry + rh)
    return np.stack([x0, y0, x1 - x0, y1 - y0], 1).astype(np.int64)


def verify_stage(proposals: list[Proposal], net: tn.NetworkSpec, image: np.ndarray,
                 threshold: float, cfg: VerifyConfig | None = None, stage: int | None = None) -> list[Proposal]:
    """Rescan each proposal's context region, refine its box and drop weak ones.

    The refined box is the candidate window the net scores highest, with
    ties broken by omega on the region's local score map and then by box.
    A proposal survives when that peak heatmap score reaches ``threshold``.
    Survivors are deduplicated greedily by confidence.
    """
    cfg = cfg or VerifyConfig()
    if not proposals:
        return []
    h, w = image.shape[:2]
    stage = stage if stage is not None else proposals[0].source_stage + 1
    regions = [context_region(p.box, cfg.context, w, h, p.root) for p in proposals]
    scans = scan_regions(regions, net, image, cfg)
    kept = []
    for p, scan in zip(proposals, scans):
        peak = float(scan.scores.max())
        if peak < threshold:
            continue
        # logits keep their order where the squashed scores round to 1
        b = scan.boxes
        best = np.lexsort((b[:, 3], b[:, 2], b[:, 1], b[:, 0], -scan.omega, -scan.logits))[0]
        box = tuple(int(v) for v in scan.boxes[best])
        root = p.root if p.root is not None else context_region(p.box, cfg.context, w, h)
        kept.append(Proposal(box, float(scan.omega[best]), peak, stage, peak, root,
                             p.trace + [(p.source_stage, p.box, p.confidence or p.mean_score)]))
    if not kept:
        return []
    boxes = np.array([k.box for k in kept])
    conf = np.array([k.confidence for k in kept])
    keep = greedy_dedup(boxes, rank_order(conf, boxes), cfg.dedup_iou, len(kept))
    return [kept[i] for i in keep]


def stage1_proposals(image: np.ndarray, model: CascadeModel, dtype=None):
    pyr = build_pyramid(image, model.pyramid_cfg)
    streams = run_streams(model.stage1, pyr, INFERENCE_DTYPE if dtype is None else dtype)
    # fixed fusion order: largest target edge first
    maps = [project_heatmap(s.heatmap, s.geometry, s.level) for s in streams]
    fused = fuse_streams(maps)
    props = propose_boxes(fused, streams, model.proposal_cfg, stream_maps=maps)
    h, w = image.shape[:2]
    for p in props:
        p.root = context_region(p.box, model.verify_cfg.context, w, h)
        p.confidence = p.mean_score
    return props, fused


def detect(image: np.ndarray, model: CascadeModel, return_info: bool = False):
    """Run all three stages; detections are ordered by descending confidence."""
    image = tn.as_tensor3(image)
    if image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    props, fused = stage1_proposals(image, model)
    s2 = verify_stage(props, model.stage2, image, model.stage_thresholds[0], model.verify_cfg, 2)
    s3 = verify_stage(s2, model.stage3, image, model.stage_thresholds[1], model.verify_cfg, 3)
    dets = [Detection(p.box, p.confidence, p.trace + [(3, p.box, p.confidence)]) for p in s3]
    dets.sort(key=lambda d: (-d.confidence, d.box))
    if return_info:
        return DetectResult(dets, (len(props), len(s2), len(s3)), fused, [props, s2, s3])
    return dets


def format_detections(image_id: str, dets: list[Detection]) -> str:
    return "".join(f"{image_id} {d.box[0]} {d.box[1]} {d.box[2]} {d.box[3]} {d.confidence:.6f}\n"
                   for d in dets)


def detections_json(image_id: str, result: DetectResult) -> dict:
    return {
        "image": image_id,
        "counts": list(result.counts),
        "detections": [{"box": list(d.box), "confidence": d.confidence,
                        "trace": [{"stage": s, "box": list(b), "score": float(c)} for s, b, c in d.trace]}
                       for d in result.detections],
    }


# ---------------------------------------------------------------- persistence

STAGE_NAMES = ("stage1", "stage2", "stage3")


def save_model(model: CascadeModel, path) -> None:
    """Write a JSON manifest at ``path`` and one weight file per stage beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, net in zip(STAGE_NAMES, model.stages):
        fname = f"{path.stem}.{name}.fcnw"
        tn.save_network(net, path.parent / fname)
        files[name] = fname
    manifest = {
        "stages": files,
        "stage_thresholds": {"stage2": model.stage_thresholds[0], "stage3": model.stage_thresholds[1]},
        "proposal": asdict(model.proposal_cfg),
        "pyramid": list(model.pyramid_cfg.target_long_edges),
        "verify": {**asdict(model.verify_cfg), "zooms": list(model.verify_cfg.zooms)},
        "trained_stages": model.trained_stages,
    }
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2) + "\n")
    tmp.replace(path)


def load_model(path, require_complete: bool = True) -> CascadeModel:
    """Read a model written by :func:`save_model`.

    Partially trained models are refused unless ``require_complete`` is false.
    """
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelError(f"cannot read model manifest {path}: {exc}") from exc
    stages = manifest.get("stages", {})
    nets = []
    for name in STAGE_NAMES:
        if name not in stages:
            raise ModelError(f"manifest {path} is missing {name}")
        try:
            nets.append(tn.load_network(path.parent / stages[name]))
        except OSError as exc:
            raise ModelError(f"cannot read {name} weights: {exc}") from exc
    extra = set(stages) - set(STAGE_NAMES)
    if extra:
        raise ModelError(f"manifest lists {len(stages)} stages, expected 3: {sorted(extra)}")
    th = manifest.get("stage_thresholds", {})
    verify = manifest.get("verify", {})
    if "zooms" in verify:
        verify["zooms"] = tuple(verify["zooms"])
    trained = int(manifest.get("trained_stages", 3))
    if require_complete and trained < 3:
        raise ModelError(f"model {path} has only {trained} trained stage(s); train stages "
                         f"{trained + 1}..3 first")
    return CascadeModel(
        *nets,
        trained_stages=trained,
        stage_thresholds=(float(th.get("stage2", 0.5)), float(th.get("stage3", 0.7))),
        proposal_cfg=ProposalConfig(**manifest.get("proposal", {})),
        pyramid_cfg=PyramidConfig(tuple(manifest.get("pyramid", PyramidConfig().target_long_edges))),
        verify_cfg=VerifyConfig(**verify),
    )
