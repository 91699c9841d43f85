"""Two-stage coarse-to-fine training and inference.

Stage 1 segments a block-downsampled copy of the case; its foreground,
brought back to full resolution, bounds the region stage 2 looks at and is
fed to stage 2 as the second input channel.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Adam, Tensor, backward, inverse_frequency_weights, weighted_cross_entropy
from .preprocessing import (
    DEFAULT_ROI_MARGIN,
    DEFAULT_SKIN_THRESHOLD_HU,
    BoundingBox,
    EmptyMaskError,
    MixConfig,
    body_mask,
    downsample,
    mix,
    normalize,
    roi_from_mask,
    upsample,
)
from .unet import Checkpoint, CheckpointError, UNetConfig, build, load_checkpoint
from .volume import MAX_LABEL, DectPair, LabelVolume, MaskVolume

log = logging.getLogger(__name__)

N_CLASSES = MAX_LABEL + 1
PAD_VALUE = -1.0


@dataclass(frozen=True)
class StagePlan:
    """Training/inference settings of one cascade stage."""

    stage: int = 1
    downsample: int = 2
    patch: tuple = (32, 32, 32)
    batch_size: int = 2
    iterations: int = 1000
    learning_rate: float = 1e-3
    foreground_fraction: float = 0.5
    alpha_training: float = 0.6
    init_checkpoint: object = None
    eval_every: int = 0
    roi_margin: int = DEFAULT_ROI_MARGIN
    overlap: float = 0.5

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))
        if len(self.patch) != 3 or min(self.patch) < 1:
            raise ValueError(f"patch must be three positive extents, got {self.patch}")
        if not 0.0 <= self.foreground_fraction <= 1.0:
            raise ValueError("foreground_fraction must lie in [0, 1]")
        if self.downsample < 1 or self.batch_size < 1 or self.iterations < 0:
            raise ValueError("downsample and batch_size must be >= 1, iterations >= 0")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError("overlap must lie in [0, 1)")
        MixConfig(self.alpha_training)

    def check(self, config):
        config.check_patch(self.patch)

    def to_dict(self):
        d = asdict(self)
        d["patch"] = list(self.patch)
        if not isinstance(d["init_checkpoint"], (str, type(None))):
            d["init_checkpoint"] = str(d["init_checkpoint"])
        return d


def default_plans(**overrides):
    """``(stage1, stage2)`` plans with the desk-scale defaults."""
    # stage 1 patches smaller than the downsampled volume, so it sees shifted views
    s1 = StagePlan(**{"stage": 1, "downsample": 2, "patch": (24, 24, 24), **overrides})
    s2 = StagePlan(**{"stage": 2, "downsample": 1, "iterations": 900, **overrides})
    return s1, s2


@dataclass
class CaseInput:
    """A case after mixing, masking and normalization."""

    pair: DectPair
    alpha: float
    mixed: object
    body: MaskVolume
    normalized: object
    labels: LabelVolume = None

    @property
    def identifier(self):
        return self.pair.identifier

    @property
    def dims(self):
        return self.pair.dims


def prepare_case(pair, alpha, labels=None, threshold_hu=DEFAULT_SKIN_THRESHOLD_HU):
    """mix -> body_mask -> normalize, keeping every intermediate."""
    mixed = mix(pair, MixConfig(alpha))
    body = body_mask(mixed, threshold_hu)
    norm = normalize(mixed, body)
    if labels is not None and labels.dims != pair.dims:
        raise ValueError(f"labels dims {labels.dims} != image dims {pair.dims}")
    return CaseInput(pair, float(alpha), mixed, body, norm, labels)


# -- per-stage training volumes ---------------------------------------------------

@dataclass
class StageVolume:
    """Arrays (z, y, x) a stage trains or predicts on."""

    identifier: str
    image: np.ndarray
    guide: np.ndarray
    loss_mask: np.ndarray
    labels: np.ndarray = None

    @property
    def shape(self):
        return self.image.shape

    def channels(self):
        return np.stack([self.image, np.where(self.guide, 1.0, -1.0).astype(np.float32)])


def stage1_volume(case, factor):
    """Block-downsampled image, body mask (guide and loss mask) and labels."""
    image = downsample(case.normalized, factor).values
    body = downsample(case.body, factor).values
    labels = downsample(case.labels, factor).values if case.labels is not None else None
    return StageVolume(case.identifier, image, body, body, labels)


def ground_truth_box(case, margin):
    return roi_from_mask(case.labels.values > 0, margin)


def stage2_volume(case, guide, box):
    """Full-resolution crop to ``box``; ``guide`` is the stage-1 foreground (full grid)."""
    sl = box.slices
    labels = case.labels.values[sl] if case.labels is not None else None
    guide = guide.values if isinstance(guide, MaskVolume) else np.asarray(guide, bool)
    return StageVolume(case.identifier, case.normalized.values[sl], guide[sl], case.body.values[sl], labels)


# -- patch sampling ------------------------------------------------------------------

@dataclass
class Patch:
    inputs: np.ndarray  # (2, D, H, W)
    target: np.ndarray  # (D, H, W)
    loss_mask: np.ndarray
    center: tuple
    start: tuple


def _pad_to(volume, patch):
    pad = [(0, max(p - s, 0)) for s, p in zip(volume.shape, patch)]
    if not any(hi for _, hi in pad):
        return volume
    return StageVolume(
        volume.identifier,
        np.pad(volume.image, pad, constant_values=PAD_VALUE),
        np.pad(volume.guide, pad),
        np.pad(volume.loss_mask, pad),
        None if volume.labels is None else np.pad(volume.labels, pad),
    )


_NO_FOREGROUND_WARNED = set()


def draw_patch(volume, plan, rng):
    """One patch; its centre is a foreground voxel with probability ``foreground_fraction``."""
    volume = _pad_to(volume, plan.patch)
    use_fg = rng.random() < plan.foreground_fraction
    pool = None
    if use_fg:
        pool = np.flatnonzero(volume.labels > 0)
        if pool.size == 0:
            if volume.identifier not in _NO_FOREGROUND_WARNED:
                log.warning("case %s has no foreground; sampling inside the body", volume.identifier)
                _NO_FOREGROUND_WARNED.add(volume.identifier)
            pool = None
    if pool is None:
        pool = np.flatnonzero(volume.loss_mask)
        if pool.size == 0:
            pool = np.arange(volume.image.size)
    center = np.unravel_index(pool[rng.integers(pool.size)], volume.shape)
    start = tuple(
        int(min(max(c - p // 2, 0), s - p)) for c, p, s in zip(center, plan.patch, volume.shape)
    )
    sl = tuple(slice(a, a + p) for a, p in zip(start, plan.patch))
    inputs = np.stack([volume.image[sl], np.where(volume.guide[sl], 1.0, -1.0)]).astype(np.float32)
    return Patch(inputs, volume.labels[sl], volume.loss_mask[sl], tuple(int(c) for c in center), start)


def sample_patches(volume, plan, seed):
    """Endless deterministic stream of training patches from one stage volume."""
    if volume.labels is None:
        raise ValueError("patch sampling needs labels")
    rng = np.random.default_rng(seed)
    while True:
        yield draw_patch(volume, plan, rng)


# -- training ----------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list
    scores: list = field(default_factory=list)


def _initial_network(plan, config, seed):
    init = plan.init_checkpoint
    if init is None:
        return build(config, seed)
    ckpt = init if isinstance(init, Checkpoint) else load_checkpoint(init)
    if ckpt.config != config:
        raise CheckpointError(f"init checkpoint config {ckpt.config} != {config}")
    if ckpt.stage not in (None, plan.stage):
        raise CheckpointError(f"init checkpoint is for stage {ckpt.stage}, plan is stage {plan.stage}")
    return ckpt.network()


def batch_loss(net, patches, weights, mode="train"):
    x = Tensor(np.stack([p.inputs for p in patches]))
    target = np.stack([p.target for p in patches])
    mask = np.stack([p.loss_mask for p in patches])
    if not mask.any():
        mask = np.ones_like(mask)
    return weighted_cross_entropy(net(x, mode), target, weights, mask)


def train_stage(volumes, plan, seed, config=None, validate=None, log_path=None):
    """Patch-wise training of one stage.

    ``validate(net) -> float`` is called every ``plan.eval_every`` iterations
    and after the last; the best-scoring snapshot (first one on ties) is
    returned.  Without ``validate`` the final parameters are returned.
    """
    config = config or UNetConfig()
    plan.check(config)
    volumes = list(volumes)
    if not volumes:
        raise ValueError("empty training set")
    net = _initial_network(plan, config, seed)
    weights = inverse_frequency_weights([v.labels for v in volumes], N_CLASSES, masks=[v.loss_mask for v in volumes])
    rng = np.random.default_rng([seed, plan.stage])
    opt = Adam(net.params, lr=plan.learning_rate)
    losses, scores = [], []
    best = None
    rows = []
    t0 = time.perf_counter()

    def evaluate(iteration):
        nonlocal best
        score = float(validate(net))
        scores.append((iteration, score))
        if best is None or score > best[1]:
            best = (iteration, score, {k: v.copy() for k, v in net.state_arrays().items()})

    for it in range(plan.iterations):
        patches = [draw_patch(volumes[rng.integers(len(volumes))], plan, rng) for _ in range(plan.batch_size)]
        opt.zero_grad()
        loss = batch_loss(net, patches, weights)
        backward(loss)
        opt.step()
        losses.append(float(loss.item()))
        rows.append((it, losses[-1], plan.learning_rate))
        if (it + 1) % 100 == 0:
            log.info("stage %d iteration %d loss %.4f (%.1fs)", plan.stage, it + 1, losses[-1], time.perf_counter() - t0)
        if validate is not None and plan.eval_every and (it + 1) % plan.eval_every == 0:
            evaluate(it + 1)
    if validate is not None and (not scores or scores[-1][0] != plan.iterations):
        evaluate(plan.iterations)

    metadata = {
        "stage": plan.stage,
        "alpha_training": plan.alpha_training,
        "iteration": plan.iterations,
        "loss_tail": losses[-10:],
        "seed": int(seed),
        "downsample": plan.downsample,
        "patch": list(plan.patch),
        "roi_margin": plan.roi_margin,
        "overlap": plan.overlap,
        "class_weights": [float(w) for w in weights],
        "fine_tuned": plan.init_checkpoint is not None,
    }
    if best is not None:
        metadata["iteration"] = best[0]
        metadata["validation_score"] = best[1]
        ckpt = Checkpoint(config, best[2], metadata)
    else:
        ckpt = Checkpoint.from_network(net, **metadata)
    if log_path is not None:
        write_training_log(rows, log_path)
    return TrainResult(ckpt, losses, scores)


def write_training_log(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "loss", "learning_rate"])
        for it, loss, lr in rows:
            writer.writerow([it, repr(loss), repr(lr)])


# -- inference ----------------------------------------------------------------------

def tile_starts(extent, patch, overlap):
    """Patch origins along one axis; the last patch is shifted inward to end at ``extent``."""
    if extent <= patch:
        return [0]
    step = max(1, int(round(patch * (1.0 - overlap))))
    starts = list(range(0, extent - patch + 1, step))
    if starts[-1] != extent - patch:
        starts.append(extent - patch)
    return starts


def tile_inference(channels, net, patch, overlap=0.5, order=None, return_logits=False):
    """Softmax probabilities over a (C, D, H, W) region from overlapping patches.

    Logits are averaged uniformly where patches overlap.  Accumulation runs
    in a fixed raster order whatever ``order`` the patches are evaluated in,
    so the result is bit-identical for any evaluation order.
    """
    channels = np.asarray(channels, np.float32)
    region = channels.shape[1:]
    padded = tuple(max(r, p) for r, p in zip(region, patch))
    if padded != region:
        pad = [(0, 0)] + [(0, p - r) for r, p in zip(region, padded)]
        channels = np.pad(channels, pad, constant_values=PAD_VALUE)
    grid = [(a, b, c) for a in tile_starts(padded[0], patch[0], overlap)
            for b in tile_starts(padded[1], patch[1], overlap)
            for c in tile_starts(padded[2], patch[2], overlap)]
    evaluation = range(len(grid)) if order is None else order
    results = {}
    for i in evaluation:
        a, b, c = grid[i]
        x = channels[None, :, a : a + patch[0], b : b + patch[1], c : c + patch[2]]
        results[i] = net(Tensor(x), "eval").data[0]
    k = next(iter(results.values())).shape[0]
    acc = np.zeros((k,) + padded, np.float64)
    count = np.zeros(padded, np.float64)
    for i, (a, b, c) in enumerate(grid):
        acc[:, a : a + patch[0], b : b + patch[1], c : c + patch[2]] += results[i]
        count[a : a + patch[0], b : b + patch[1], c : c + patch[2]] += 1.0
    logits = (acc / count)[:, : region[0], : region[1], : region[2]]
    if return_logits:
        return logits
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=0, keepdims=True)).astype(np.float32)


def argmax_labels(probabilities):
    """Per-voxel argmax over classes; ties resolve to the smallest class index."""
    return np.argmax(probabilities, axis=0).astype(np.uint8)


@dataclass
class Stage1Result:
    probabilities: np.ndarray
    roi: BoundingBox
    mask: MaskVolume
    fallback: bool = False


def _resolve(ckpt, stage, net=None):
    if isinstance(ckpt, (str, Path)):
        ckpt = load_checkpoint(ckpt)
    if ckpt.stage != stage:
        raise CheckpointError(f"expected a stage-{stage} checkpoint, got stage {ckpt.stage}")
    return ckpt, net if net is not None else ckpt.network()


def predict_stage1(case, checkpoint1, margin=None, net=None):
    ckpt, net1 = _resolve(checkpoint1, 1, net)
    meta = ckpt.metadata
    factor = int(meta.get("downsample", 2))
    margin = int(meta.get("roi_margin", DEFAULT_ROI_MARGIN)) if margin is None else margin
    coarse = stage1_volume(case, factor)
    probs = tile_inference(coarse.channels(), net1, tuple(meta["patch"]), float(meta.get("overlap", 0.5)))
    # the loss never sees voxels outside the body, so the net's output there is meaningless
    fg = MaskVolume((argmax_labels(probs) != 0) & coarse.guide, case.normalized.spacing)
    full = upsample(fg, factor, case.dims)
    mask = MaskVolume(full.values, case.body.spacing)
    try:
        roi = roi_from_mask(mask, margin)
        fallback = False
    except EmptyMaskError:
        log.warning("stage 1 found no foreground in %s; using the body bounding box", case.identifier)
        roi = roi_from_mask(case.body, 0)
        fallback = True
    return Stage1Result(probs, roi, mask, fallback)


def predict_stage2(case, stage1, checkpoint2, net=None):
    """Stage-2 labels on the full grid given a stage-1 result."""
    ckpt, net2 = _resolve(checkpoint2, 2, net)
    meta = ckpt.metadata
    vol = stage2_volume(case, stage1.mask, stage1.roi)
    probs = tile_inference(vol.channels(), net2, tuple(meta["patch"]), float(meta.get("overlap", 0.5)))
    labels = np.zeros(case.normalized.values.shape, np.uint8)
    labels[stage1.roi.slices] = argmax_labels(probs)
    labels[~case.body.values] = 0
    return LabelVolume(labels, case.normalized.spacing)


def check_cascade(checkpoint1, checkpoint2):
    if checkpoint1.stage != 1 or checkpoint2.stage != 2:
        raise CheckpointError(
            f"cascade needs stage-1 and stage-2 checkpoints, got {checkpoint1.stage} and {checkpoint2.stage}"
        )
    c1, c2 = checkpoint1.config, checkpoint2.config
    if c1.in_channels != 2 or c2.in_channels != 2 or c1.out_channels != c2.out_channels:
        raise CheckpointError(f"incompatible stage configs {c1} / {c2}")


def predict_cascade(pair, alpha, checkpoint1, checkpoint2, threshold_hu=DEFAULT_SKIN_THRESHOLD_HU):
    """Full-volume labels for one DECT pair."""
    if isinstance(checkpoint1, (str, Path)):
        checkpoint1 = load_checkpoint(checkpoint1)
    if isinstance(checkpoint2, (str, Path)):
        checkpoint2 = load_checkpoint(checkpoint2)
    check_cascade(checkpoint1, checkpoint2)
    case = prepare_case(pair, alpha, threshold_hu=threshold_hu)
    s1 = predict_stage1(case, checkpoint1)
    return predict_stage2(case, s1, checkpoint2)


# -- both stages -------------------------------------------------------------------

def organ_dice_mean(pred, truth):
    from .evaluation import dice

    return float(np.mean([dice(pred, truth, organ) for organ in range(1, N_CLASSES)]))


def fit_cascade(cases, plan1, plan2, seed, config=None, validation=None, init=(None, None), log_dir=None):
    """Train stage 1, derive stage-1 guides for the training cases, then train stage 2.

    ``cases``/``validation`` are labelled :class:`CaseInput` lists.  ``init``
    holds optional pretrained checkpoints per stage (fine-tuning).
    Returns ``(checkpoint1, checkpoint2, info)``.
    """
    config = config or UNetConfig()
    if init[0] is not None:
        plan1 = replace(plan1, init_checkpoint=init[0])
    if init[1] is not None:
        plan2 = replace(plan2, init_checkpoint=init[1])
    log_dir = Path(log_dir) if log_dir else None

    vols1 = [stage1_volume(c, plan1.downsample) for c in cases]
    validate1 = None
    if validation:
        val1 = [stage1_volume(c, plan1.downsample) for c in validation]

        def validate1(net):
            scores = []
            for v in val1:
                probs = tile_inference(v.channels(), net, plan1.patch, plan1.overlap)
                pred = LabelVolume(argmax_labels(probs) * v.loss_mask)
                scores.append(organ_dice_mean(pred, LabelVolume(v.labels)))
            return float(np.mean(scores))

    r1 = train_stage(vols1, plan1, seed, config, validate1, log_dir / "stage1_log.csv" if log_dir else None)
    ckpt1 = r1.checkpoint
    net1 = ckpt1.network()

    vols2 = []
    for c in cases:
        guide = predict_stage1(c, ckpt1, plan2.roi_margin, net=net1).mask
        vols2.append(stage2_volume(c, guide, ground_truth_box(c, plan2.roi_margin)))
    validate2 = None
    if validation:
        s1_val = [predict_stage1(c, ckpt1, plan2.roi_margin, net=net1) for c in validation]
        meta2 = {"stage": 2, "patch": list(plan2.patch), "overlap": plan2.overlap}

        def validate2(net):
            probe = Checkpoint(config, {}, meta2)
            scores = [
                organ_dice_mean(predict_stage2(c, s1, probe, net=net), c.labels) for c, s1 in zip(validation, s1_val)
            ]
            return float(np.mean(scores))

    r2 = train_stage(vols2, plan2, seed + 1, config, validate2, log_dir / "stage2_log.csv" if log_dir else None)
    ckpt1.metadata["roi_margin"] = plan2.roi_margin
    return ckpt1, r2.checkpoint, {"stage1": r1, "stage2": r2}
