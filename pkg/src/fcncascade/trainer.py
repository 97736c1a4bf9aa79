"""Sample assembly, minibatch SGD and hard-example mining."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor_nn as tn
from .cascade import VerifyConfig, context_region, scan_regions
from .evaluation import iou_matrix
from .pyramid import crop_resize
from .synth import AnnotatedImage

log = logging.getLogger(__name__)

PLAIN = "plain"
HARD_NEGATIVE = "hard_negative"
HARD_POSITIVE = "hard_positive"
PARTIAL_OVERLAP = "partial_overlap"
_KIND_LABEL = {HARD_NEGATIVE: 0, HARD_POSITIVE: 1, PARTIAL_OVERLAP: 0}


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"loss became non-finite in epoch {epoch}")
        self.epoch = epoch


class SamplingError(ValueError):
    pass


@dataclass
class TrainSample:
    patch: np.ndarray
    label: int
    kind: str = PLAIN
    source: tuple = ("", (0, 0, 0, 0))

    def __post_init__(self):
        if self.kind != PLAIN and _KIND_LABEL[self.kind] != self.label:
            raise ValueError(f"label {self.label} inconsistent with kind {self.kind}")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.05
    lr_decay: float = 0.1  # applied once, after two thirds of the epochs
    momentum: float = 0.9
    seed: int = 0
    positives: int = 60
    negatives: int = 800
    max_face_side: int = 300
    # positive crops are jittered copies of the annotated box
    copies: int = 1
    jitter_shift: float = 0.0  # max centre shift as a fraction of the side
    jitter_scale: float = 1.0  # side multiplied by a log-uniform factor in [1/j, j]
    near_negatives: float = 0.0  # share of negatives drawn around faces
    near_band: tuple[float, float] = (0.1, 0.45)  # their IoU range against the face

    def __post_init__(self):
        self.near_band = tuple(float(v) for v in self.near_band)
        if self.copies < 1 or not 0 <= self.jitter_shift < 0.5 or self.jitter_scale < 1 \
                or not 0 <= self.near_negatives <= 1:
            raise ValueError(f"invalid jitter settings in {self}")
        if len(self.near_band) != 2 or not 0 <= self.near_band[0] < self.near_band[1] < 1:
            raise ValueError(f"near_band must be an increasing IoU pair in [0, 1), got {self.near_band}")
        if self.positives < 1 or self.negatives < self.positives:
            raise ValueError("need positives >= 1 and a negative/positive ratio of at least 1")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError(f"invalid training config {self}")

    @property
    def neg_pos_ratio(self) -> float:
        return self.negatives / self.positives


@dataclass
class IoUConfig:
    positive: float = 0.5  # "contains a face"
    partial: tuple[float, float] = (0.1, 0.3)
    background: float = 0.1  # below this a box holds no face
    per_image_cap: int = 12  # per kind, per image
    replay: float = 0.25


# ---------------------------------------------------------------- sampling

def crop_patch(image: np.ndarray, box, window: int) -> np.ndarray:
    return crop_resize(image, box, window, window)


def _random_negative(rng, item: AnnotatedImage, window: int, max_side: int):
    h, w = item.image.shape[:2]
    hi = min(max_side, h, w)
    if hi < window:
        return None
    for _ in range(30):
        side = int(round(math.exp(rng.uniform(math.log(window), math.log(hi)))))
        x, y = int(rng.integers(0, w - side + 1)), int(rng.integers(0, h - side + 1))
        box = (x, y, side, side)
        if not item.boxes or iou_matrix([box], item.boxes).max() < 0.1:
            return box
    return None


def jitter_box(rng, box, shift: float, scale: float):
    """Square box around ``box`` with a random centre shift and side scaling."""
    x, y, w, h = box
    side = max(w, h) * math.exp(rng.uniform(-math.log(scale), math.log(scale)))
    cx = x + w / 2 + rng.uniform(-shift, shift) * w
    cy = y + h / 2 + rng.uniform(-shift, shift) * h
    return (cx - side / 2, cy - side / 2, side, side)


def _near_negative(rng, item: AnnotatedImage, face, window: int, band):
    """A box near ``face`` whose largest IoU against any face lies inside ``band``."""
    x, y, w, h = face
    H, W = item.image.shape[:2]
    for _ in range(30):
        side = w * math.exp(rng.uniform(math.log(0.3), math.log(2.5)))
        side = max(window / 2, min(side, W, H))
        cx = x + w / 2 + rng.uniform(-1.0, 1.0) * (w + side) / 2
        cy = y + h / 2 + rng.uniform(-1.0, 1.0) * (h + side) / 2
        box = (int(round(cx - side / 2)), int(round(cy - side / 2)), int(round(side)), int(round(side)))
        if box[0] < 0 or box[1] < 0 or box[0] + box[2] > W or box[1] + box[3] > H:
            continue
        ov = iou_matrix([box], item.boxes)[0]
        if band[0] <= ov.max() <= band[1]:
            return box
    return None


def assemble_stage1_samples(annotated: list[AnnotatedImage], backgrounds: list[AnnotatedImage],
                            cfg: TrainConfig, window: int = 30) -> list[TrainSample]:
    """Face crops as positives, random face-free crops as negatives.

    Each face yields ``cfg.copies`` jittered crops; the positive count is
    ``min(cfg.positives, available crops)`` and negatives follow at the
    configured ratio.  A ``cfg.near_negatives`` share of the negatives are
    boxes around faces with IoU inside ``cfg.near_band`` (wrong scale or
    position); the rest come alternately from background images and from
    face images (IoU < 0.1 against every face).
    """
    faces = [(a, b) for a in annotated for b in a.boxes for _ in range(cfg.copies)]
    if not faces:
        raise SamplingError("no annotated faces to sample positives from")
    if not backgrounds:
        raise SamplingError("no background images to sample negatives from")
    rng = np.random.default_rng(cfg.seed)
    n_pos = min(cfg.positives, len(faces))
    n_neg = int(round(n_pos * cfg.neg_pos_ratio))
    chosen = sorted(rng.choice(len(faces), n_pos, replace=False)) if n_pos < len(faces) else range(len(faces))
    samples = []
    for i in chosen:
        item, box = faces[i]
        if cfg.jitter_shift or cfg.jitter_scale > 1:
            box = jitter_box(rng, box, cfg.jitter_shift, cfg.jitter_scale)
        samples.append(TrainSample(crop_patch(item.image, box, window), 1, PLAIN, (item.image_id, box)))
    n_near = int(round(n_neg * cfg.near_negatives))
    misses = 0
    while len(samples) < n_pos + n_near:
        item, face = faces[int(rng.integers(len(faces)))]
        box = _near_negative(rng, item, face, window, cfg.near_band)
        if box is None:
            misses += 1
            if misses > 1000 + 10 * n_near:
                raise SamplingError("could not place enough near-face negatives")
            continue
        samples.append(TrainSample(crop_patch(item.image, box, window), 0, PLAIN, (item.image_id, box)))
    pools = [backgrounds, annotated] if annotated else [backgrounds]
    while len(samples) < n_pos + n_neg:
        pool = pools[(len(samples) - n_pos - n_near) % len(pools)]
        item = pool[int(rng.integers(len(pool)))]
        box = _random_negative(rng, item, window, cfg.max_face_side)
        if box is None:
            misses += 1
            if misses > 1000 + 10 * n_neg:
                raise SamplingError("could not find enough face-free regions for negatives")
            continue
        samples.append(TrainSample(crop_patch(item.image, box, window), 0, PLAIN, (item.image_id, box)))
    return samples


# ---------------------------------------------------------------- SGD

def _stack(samples):
    x = np.stack([s.patch for s in samples]).astype(np.float64)
    y = np.array([s.label for s in samples], dtype=np.float64)
    return x, y


def evaluate_patches(net: tn.NetworkSpec, samples, batch: int = 256):
    """(mean loss, accuracy) of the 1x1 heatmap scores against labels."""
    x, y = _stack(samples)
    z = np.concatenate([tn.forward_logits(net, x[i : i + batch])[:, 0, 0] for i in range(0, len(x), batch)])
    return tn.cross_entropy(z, y), float(np.mean((z >= 0) == (y > 0.5)))


def train(net: tn.NetworkSpec, samples: list[TrainSample], cfg: TrainConfig,
          history: list | None = None) -> tn.NetworkSpec:
    """Minibatch SGD with momentum on mean cross-entropy.

    Batch order comes from ``cfg.seed`` only, so runs are bit-reproducible.
    Per-epoch ``(epoch, loss, train_acc)`` rows, averaged over the epoch's
    minibatches, are appended to ``history``.
    """
    labels = {s.label for s in samples}
    if labels != {0, 1}:
        raise ValueError("training needs both face and background samples")
    net = net.copy()
    x, y = _stack(samples)
    rng = np.random.default_rng(cfg.seed)
    params = net.params()
    velocity = [np.zeros_like(p) for p in params]
    decay_at = int(math.ceil(2 * cfg.epochs / 3))
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * (cfg.lr_decay if epoch >= decay_at else 1.0)
        order = rng.permutation(len(x))
        total, correct = 0.0, 0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads, z = tn.net_backward(net, x[idx], y[idx], return_logits=True)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            total += loss * len(idx)
            correct += int(np.sum((z[:, 0, 0] >= 0) == (y[idx] > 0.5)))
            flat = [g for pair in grads if pair is not None for g in pair]
            for p, v, g in zip(params, velocity, flat):
                v *= cfg.momentum
                v -= lr * g
                p += v
        # running figures over the epoch's minibatches
        epoch_loss, acc = total / len(x), correct / len(x)
        log.info("%s epoch %d loss %.5f acc %.4f", net.name, epoch, epoch_loss, acc)
        if history is not None:
            history.append((epoch, epoch_loss, acc))
    return net


# ---------------------------------------------------------------- mining

def classify_box(best_iou: float, score: float, threshold: float, on_face_image: bool,
                 cfg: IoUConfig | None = None) -> str | None:
    """Hard-example kind of one scored box, or None when it fits no rule."""
    cfg = cfg or IoUConfig()
    if best_iou >= cfg.positive:
        return HARD_POSITIVE if score < threshold else None
    if cfg.partial[0] <= best_iou <= cfg.partial[1]:
        return PARTIAL_OVERLAP
    if best_iou < cfg.background and score >= threshold:
        return HARD_NEGATIVE
    return None


def mine_hard_examples(model_stage: tn.NetworkSpec, annotated: list[AnnotatedImage],
                       backgrounds: list[AnnotatedImage], prev_stage_detector, threshold: float,
                       iou_cfg: IoUConfig | None = None, verify_cfg: VerifyConfig | None = None,
                       seed: int = 0) -> list[TrainSample]:
    """Collect hard examples among the windows a verifier would scan.

    ``prev_stage_detector(image) -> list of boxes`` supplies proposals.  Each
    proposal and every window of its context-padded scan is scored by
    ``model_stage`` and classified with :func:`classify_box`; at most
    ``iou_cfg.per_image_cap`` samples of each kind are kept per image.
    """
    iou_cfg = iou_cfg or IoUConfig()
    verify_cfg = verify_cfg or VerifyConfig()
    window = tn.net_geometry(model_stage).window
    rng = np.random.default_rng(seed)
    out = []
    for item in list(annotated) + list(backgrounds):
        boxes = [tuple(int(v) for v in b) for b in prev_stage_detector(item.image)]
        if not boxes:
            continue
        h, w = item.image.shape[:2]
        regions = [context_region(b, verify_cfg.context, w, h) for b in boxes]
        scans = scan_regions(regions, model_stage, item.image, verify_cfg, dtype=np.float64)
        cand = np.concatenate([np.asarray(boxes)] + [s.boxes for s in scans])
        # proposal boxes themselves are scored on their own crop
        own = tn.forward_batch(model_stage, np.stack([crop_patch(item.image, b, window) for b in boxes]))[:, 0, 0]
        scores = np.concatenate([own] + [s.scores for s in scans])
        best = iou_matrix(cand, item.boxes).max(axis=1) if item.boxes else np.zeros(len(cand))
        by_kind: dict[str, list[int]] = {}
        seen = set()
        for i in range(len(cand)):
            key = tuple(cand[i])
            if key in seen:
                continue
            seen.add(key)
            kind = classify_box(float(best[i]), float(scores[i]), threshold, bool(item.boxes), iou_cfg)
            if kind is not None:
                by_kind.setdefault(kind, []).append(i)
        for kind in sorted(by_kind):
            idx = by_kind[kind]
            if len(idx) > iou_cfg.per_image_cap:
                idx = sorted(rng.choice(idx, iou_cfg.per_image_cap, replace=False))
            for i in idx:
                box = tuple(int(v) for v in cand[i])
                out.append(TrainSample(crop_patch(item.image, box, window), _KIND_LABEL[kind], kind,
                                       (item.image_id, box)))
    return out


def with_replay(mined: list[TrainSample], plain: list[TrainSample], fraction: float = 0.25,
                seed: int = 0) -> list[TrainSample]:
    """Mined samples plus a seeded ``fraction`` of the plain set."""
    rng = np.random.default_rng(seed)
    n = int(round(fraction * len(plain)))
    idx = sorted(rng.choice(len(plain), n, replace=False)) if n < len(plain) else range(len(plain))
    return list(mined) + [plain[i] for i in idx]
