"""Mixed-image computation, body masking, normalization and grid resampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import DectPair, LabelVolume, MaskVolume, Volume

DEFAULT_SKIN_THRESHOLD_HU = -500.0
DEFAULT_ROI_MARGIN = 8
HU_CLAMP = 1024.0

# face-connected neighbourhood
SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


class EmptyBodyError(ValueError):
    """No voxel reached the skin threshold."""


class EmptyMaskError(ValueError):
    """A bounding box was requested for an all-false mask."""


@dataclass(frozen=True)
class MixConfig:
    alpha: float = 0.6

    def __post_init__(self):
        a = float(self.alpha)
        if not (0.0 <= a <= 1.0):
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        object.__setattr__(self, "alpha", a)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in array index order ``(z, y, x)``; ``lo`` inclusive, ``hi`` exclusive."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lo)
        hi = tuple(int(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError("BoundingBox needs 3-D corners")
        if any(l < 0 for l in lo) or any(l >= h for l, h in zip(lo, hi)):
            raise ValueError(f"invalid box lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def shape(self):
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    @property
    def slices(self):
        return tuple(slice(l, h) for l, h in zip(self.lo, self.hi))

    def fits(self, shape):
        return all(h <= s for h, s in zip(self.hi, shape))

    def contains(self, index):
        return all(l <= i < h for l, i, h in zip(self.lo, index, self.hi))

    @classmethod
    def full(cls, shape):
        return cls((0, 0, 0), tuple(shape))


def mix(pair, cfg):
    """Blend the two spectra: ``alpha * low + (1 - alpha) * high`` per voxel."""
    if not isinstance(cfg, MixConfig):
        cfg = MixConfig(cfg)
    low, high = pair.low, pair.high
    if low.dims != high.dims or low.spacing != high.spacing:
        raise ValueError("low/high images are not co-registered")
    a = np.float64(cfg.alpha)
    out = a * low.values.astype(np.float64) + (1.0 - a) * high.values.astype(np.float64)
    return Volume(out.astype(np.float32), low.spacing)


def body_mask(mixed, threshold_hu=DEFAULT_SKIN_THRESHOLD_HU):
    """Skin-contour mask: largest 6-connected component above threshold, cavities filled."""
    above = mixed.values >= threshold_hu
    if not above.any():
        raise EmptyBodyError(f"empty body: no voxel >= {threshold_hu} HU")
    labels, count = ndimage.label(above, structure=SIX_CONNECTED)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)
    sizes[0] = 0
    body = labels == int(np.argmax(sizes))
    # exterior = background reachable from the grid border
    bg_labels, _ = ndimage.label(~body, structure=SIX_CONNECTED)
    border = np.zeros_like(body)
    border[0, :, :] = border[-1, :, :] = True
    border[:, 0, :] = border[:, -1, :] = True
    border[:, :, 0] = border[:, :, -1] = True
    exterior_ids = np.unique(bg_labels[border & ~body])
    exterior = np.isin(bg_labels, exterior_ids[exterior_ids > 0])
    return MaskVolume(~exterior, mixed.spacing)


def normalize(volume, mask):
    """Clamp to +-1024 HU, map affinely onto [-1, 1]; voxels outside ``mask`` become -1."""
    if volume.dims != mask.dims:
        raise ValueError(f"volume dims {volume.dims} != mask dims {mask.dims}")
    v = np.clip(volume.values.astype(np.float64), -HU_CLAMP, HU_CLAMP) / HU_CLAMP
    v[~mask.values] = -1.0
    return Volume(v.astype(np.float32), volume.spacing)


def _factor3(factor):
    if np.isscalar(factor):
        factor = (factor,) * 3
    factor = tuple(int(f) for f in factor)
    if len(factor) != 3 or any(f <= 0 for f in factor):
        raise ValueError(f"downsample factor must be positive, got {factor}")
    return factor


def _blocks(array, factor):
    """Edge-pad to a multiple of ``factor`` (array order z, y, x) and expose blocks."""
    pad = [(0, (-s) % f) for s, f in zip(array.shape, factor)]
    a = np.pad(array, pad, mode="edge")
    nz, ny, nx = (s // f for s, f in zip(a.shape, factor))
    fz, fy, fx = factor
    return a.reshape(nz, fz, ny, fy, nx, fx).transpose(0, 2, 4, 1, 3, 5).reshape(nz, ny, nx, -1)


def majority_vote(blocks, n_classes):
    """Most frequent value along the last axis; ties go to the smallest value."""
    counts = np.stack([(blocks == c).sum(axis=-1) for c in range(n_classes)], axis=-1)
    return np.argmax(counts, axis=-1)


def downsample(volume, factor):
    """Block-reduce by an integer factor per axis, given in ``(x, y, z)`` order.

    Scalar volumes use the block mean, labels and masks a majority vote.
    """
    fx, fy, fz = _factor3(factor)
    order = (fz, fy, fx)
    spacing = tuple(s * f for s, f in zip(volume.spacing, (fx, fy, fz)))
    if order == (1, 1, 1):
        return volume
    blocks = _blocks(volume.values, order)
    if isinstance(volume, MaskVolume):
        return MaskVolume(majority_vote(blocks.astype(np.uint8), 2).astype(bool), spacing)
    if isinstance(volume, LabelVolume):
        return LabelVolume(majority_vote(blocks, 5).astype(np.uint8), spacing)
    return Volume(blocks.mean(axis=-1, dtype=np.float64).astype(np.float32), spacing)


def upsample(volume, factor, dims=None):
    """Nearest-neighbour replication by ``factor``, cropped to ``dims`` (x, y, z) if given."""
    fx, fy, fz = _factor3(factor)
    a = volume.values
    for axis, f in enumerate((fz, fy, fx)):
        a = np.repeat(a, f, axis=axis)
    if dims is not None:
        a = a[: dims[2], : dims[1], : dims[0]]
    spacing = tuple(s / f for s, f in zip(volume.spacing, (fx, fy, fz)))
    return type(volume)(a, spacing)


def roi_from_mask(mask, margin=DEFAULT_ROI_MARGIN):
    """Tight bounding box of true voxels, grown by ``margin`` and clipped to the grid."""
    values = mask.values if isinstance(mask, Volume) else np.asarray(mask, bool)
    if not values.any():
        raise EmptyMaskError("cannot derive a bounding box from an empty mask")
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        idx = np.flatnonzero(values.any(axis=other))
        lo.append(max(int(idx[0]) - margin, 0))
        hi.append(min(int(idx[-1]) + 1 + margin, values.shape[axis]))
    return BoundingBox(tuple(lo), tuple(hi))


def crop(volume, box):
    if not box.fits(volume.values.shape):
        raise ValueError(f"box {box} exceeds grid {volume.values.shape}")
    return type(volume)(volume.values[box.slices], volume.spacing)


def embed(cropped, box, full_dims, fill_value=0):
    """Place ``cropped`` at ``box`` inside a fresh grid of ``full_dims`` (x, y, z)."""
    shape = tuple(full_dims)[::-1]
    if not box.fits(shape) or box.shape != cropped.values.shape:
        raise ValueError(f"box {box} incompatible with crop {cropped.values.shape} / grid {shape}")
    out = np.full(shape, fill_value, dtype=cropped.values.dtype)
    out[box.slices] = cropped.values
    return type(cropped)(out, cropped.spacing)
