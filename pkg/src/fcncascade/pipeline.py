"""End-to-end training of all three stages plus threshold calibration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor_nn as tn
from .cascade import (
    CascadeModel, stage1_net, stage1_proposals, stage2_net, stage3_net, verify_stage,
)
from .evaluation import iou_matrix
from .trainer import (
    IoUConfig, TrainConfig, assemble_stage1_samples, mine_hard_examples, train, with_replay,
)

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    seed: int = 0
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=6, positives=2400, negatives=4800, learning_rate=0.02, copies=3,
        jitter_shift=0.1, jitter_scale=1.2, near_negatives=0.3))
    verify_plain: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=4, positives=1200, negatives=2400, learning_rate=0.02, copies=2,
        jitter_shift=0.1, jitter_scale=1.2, near_negatives=0.3))
    verify_mined: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=5, positives=600, negatives=2400, learning_rate=0.01))
    mine_images: int = 80
    mine_backgrounds: int = 30
    holdout: float = 0.08  # share of face images kept out of training for calibration
    target_recall: float = 0.99
    iou: IoUConfig = field(default_factory=IoUConfig)

    def __post_init__(self):
        if not 0 <= self.holdout < 1 or self.mine_images < 0 or self.mine_backgrounds < 0:
            raise ValueError(f"invalid pipeline config {self}")


def split_holdout(annotated, fraction: float):
    """``(train, calibration)``: the last ``fraction`` of the face images are held out.

    With no held-out images the training images double as calibration data.
    """
    n = int(round(len(annotated) * fraction))
    if n == 0 or n >= len(annotated):
        return list(annotated), list(annotated)
    return list(annotated[:-n]), list(annotated[-n:])


class StageCache:
    """Per-image stage outputs computed with that stage's own cut open.

    A threshold only filters these lists: both the omega dedup and the
    verification NMS run greedily in score order, so dropping low scorers
    never changes which high scorers survive.  Entries are keyed on the
    upstream thresholds, so recalibrating an earlier stage recomputes the
    later ones.  Stage nets must not change while a cache is in use.
    """

    def __init__(self):
        self._open: dict = {}

    def _key(self, model: CascadeModel, stage: int, item):
        upstream = (model.proposal_cfg.threshold,) + tuple(model.stage_thresholds[: max(0, stage - 2)])
        return stage, item.image_id, upstream if stage > 1 else ()

    def open_outputs(self, model: CascadeModel, stage: int, item) -> list:
        key = self._key(model, stage, item)
        if key not in self._open:
            if stage == 1:
                probe = replace(model, proposal_cfg=replace(model.proposal_cfg, threshold=0.0))
                out, _ = stage1_proposals(item.image, probe)
            else:
                prev = self.outputs(model, stage - 1, item)
                net = model.stage2 if stage == 2 else model.stage3
                out = verify_stage(prev, net, item.image, 0.0, model.verify_cfg, stage)
            self._open[key] = out
        return self._open[key]

    def outputs(self, model: CascadeModel, stage: int, item) -> list:
        """What ``detect`` would produce after ``stage`` under the model's thresholds."""
        out = self.open_outputs(model, stage, item)
        if stage == 1:
            window = tn.net_geometry(model.stage1).window
            cut = model.proposal_cfg.threshold * window * window
            return [p for p in out if p.omega >= cut]
        th = model.stage_thresholds[stage - 2]
        return [p for p in out if p.confidence >= th]


def _recall_cut(model: CascadeModel, stage: int, annotated, target_recall: float, iou_thresh: float,
                cache: StageCache, score) -> float | None:
    # best score per face among open outputs matching it (zero when none match)
    best = []
    for item in annotated:
        if not item.boxes:
            continue
        out = cache.open_outputs(model, stage, item)
        if not out:
            best += [0.0] * len(item.boxes)
            continue
        ov = iou_matrix([p.box for p in out], item.boxes)
        values = np.array([score(p) for p in out])
        for g in range(len(item.boxes)):
            hit = ov[:, g] >= iou_thresh
            best.append(values[hit].max() if hit.any() else 0.0)
    found = [b for b in best if b > 0]
    if not found:
        return None
    return float(np.quantile(found, 1.0 - target_recall, method="lower"))


def calibrate_omega(model: CascadeModel, annotated, target_recall: float, iou_thresh: float = 0.5,
                    cache: StageCache | None = None) -> float:
    """Omega threshold (as a window-area fraction) reaching ``target_recall``.

    Proposals are generated with no omega cut.  Each face reached by a
    proposal with IoU >= iou_thresh records the best such omega and the
    threshold is the matching lower quantile.  Faces no proposal reaches
    cannot be recovered by any cut and are left out.
    """
    cut = _recall_cut(model, 1, annotated, target_recall, iou_thresh, cache or StageCache(), lambda p: p.omega)
    if cut is None:
        return model.proposal_cfg.threshold
    return cut / tn.net_geometry(model.stage1).window ** 2


def calibrate_stage(model: CascadeModel, stage: int, annotated, target_recall: float,
                    iou_thresh: float = 0.5, cache: StageCache | None = None) -> float:
    """Verification threshold keeping ``target_recall`` of the faces that reach it."""
    cut = _recall_cut(model, stage, annotated, target_recall, iou_thresh, cache or StageCache(),
                      lambda p: p.confidence)
    return model.stage_thresholds[stage - 2] if cut is None else cut


def train_stage1(annotated, backgrounds, cfg: PipelineConfig | None = None,
                 histories: dict | None = None, cache: StageCache | None = None) -> CascadeModel:
    """Train the proposal net and calibrate the omega threshold.

    Stages 2 and 3 hold untrained placeholders until :func:`train_verifier`.
    """
    cfg = cfg or PipelineConfig()
    histories = {} if histories is None else histories
    cache = cache or StageCache()
    fit, calib = split_holdout(annotated, cfg.holdout)
    s1cfg = replace(cfg.stage1, seed=cfg.seed)
    samples = assemble_stage1_samples(fit, backgrounds, s1cfg, tn.net_geometry(stage1_net()).window)
    net1 = train(tn.init_network(stage1_net(), cfg.seed), samples, s1cfg, histories.setdefault("stage1", []))
    model = CascadeModel(net1, tn.init_network(stage2_net(), cfg.seed + 2),
                         tn.init_network(stage3_net(), cfg.seed + 3), trained_stages=1)
    model.proposal_cfg = replace(model.proposal_cfg,
                                 threshold=calibrate_omega(model, calib, cfg.target_recall, cache=cache))
    log.info("stage1 omega threshold %.5f", model.proposal_cfg.threshold)
    return model


def train_verifier(model: CascadeModel, stage: int, annotated, backgrounds,
                   cfg: PipelineConfig | None = None, histories: dict | None = None,
                   cache: StageCache | None = None) -> CascadeModel:
    """Train verification stage 2 or 3 of ``model`` in place and return it.

    The net is first fit to plain samples at its own window, then refined on
    hard examples mined from the earlier stages plus a replay of the plain
    set, and finally its threshold is calibrated for the target recall on
    the held-out face images.
    """
    if stage not in (2, 3):
        raise ValueError(f"verification stages are 2 and 3, not {stage}")
    if model.trained_stages < stage - 1:
        raise ValueError(f"stage {stage} needs stages 1..{stage - 1} trained first")
    cfg = cfg or PipelineConfig()
    histories = {} if histories is None else histories
    cache = cache or StageCache()
    fit, calib = split_holdout(annotated, cfg.holdout)
    make = stage2_net if stage == 2 else stage3_net
    window = tn.net_geometry(make()).window
    pcfg = replace(cfg.verify_plain, seed=cfg.seed + 10 * stage)
    plain = assemble_stage1_samples(fit, backgrounds, pcfg, window)
    net = train(tn.init_network(make(), cfg.seed + stage), plain, pcfg,
                histories.setdefault(f"stage{stage}_plain", []))

    # the miner hands back the image arrays it was given; map them to their items
    mine_items = {id(a.image): a for a in fit[: cfg.mine_images] + backgrounds[: cfg.mine_backgrounds]}

    def detector(image):
        return [p.box for p in cache.outputs(model, stage - 1, mine_items[id(image)])]

    mined = mine_hard_examples(net, fit[: cfg.mine_images], backgrounds[: cfg.mine_backgrounds], detector,
                               model.stage_thresholds[stage - 2], cfg.iou, model.verify_cfg,
                               seed=cfg.seed + stage)
    kinds = {}
    for s in mined:
        kinds[s.kind] = kinds.get(s.kind, 0) + 1
    log.info("stage%d mined %s", stage, kinds)
    mixed = with_replay(mined, plain, cfg.iou.replay, seed=cfg.seed + stage)
    mcfg = replace(cfg.verify_mined, seed=cfg.seed + 10 * stage + 1)
    net = train(net, mixed, mcfg, histories.setdefault(f"stage{stage}_mined", []))
    if stage == 2:
        model.stage2 = net
    else:
        model.stage3 = net
    th = list(model.stage_thresholds)
    th[stage - 2] = calibrate_stage(model, stage, calib, cfg.target_recall, cache=cache)
    model.stage_thresholds = tuple(th)
    model.trained_stages = max(model.trained_stages, stage)
    log.info("stage%d threshold %.6f", stage, th[stage - 2])
    return model


def train_cascade(annotated, backgrounds, cfg: PipelineConfig | None = None,
                  histories: dict | None = None) -> CascadeModel:
    """All three stages in order, sharing one output cache."""
    cache = StageCache()
    model = train_stage1(annotated, backgrounds, cfg, histories, cache)
    for stage in (2, 3):
        model = train_verifier(model, stage, annotated, backgrounds, cfg, histories, cache)
    return model
