"""Synthetic dual-energy abdominal phantoms with exact organ labels.

Geometry is expressed as fractions of the grid extents so the same
specification scales from 32^3 smoke tests to 64^3 experiments.  Patient
orientation is radiological: the patient's right side sits at low x, the
back at high y.
"""
from __future__ import annotations

import json
from itertools import combinations
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import DectPair, LabelVolume, Volume, read_metaimage, write_metaimage

# (HU at 70 kV, HU at Sn 150 kV); invented values with energy-dependent contrast
DECT_MATERIALS = {
    "air": (-1000.0, -1000.0),
    "soft_tissue": (60.0, 45.0),
    "liver": (120.0, 70.0),
    "spleen": (110.0, 65.0),
    "kidney": (140.0, 75.0),
}
# single-spectrum 120 kV-like table for the pretraining corpus
SECT_MATERIALS = {
    "air": (-1000.0, -1000.0),
    "soft_tissue": (50.0, 50.0),
    "liver": (95.0, 95.0),
    "spleen": (88.0, 88.0),
    "kidney": (115.0, 115.0),
}

SECT_NOISE_SIGMA = 15.0

ORGANS = ("liver", "spleen", "r_kidney", "l_kidney")
ORGAN_MATERIAL = {"liver": "liver", "spleen": "spleen", "r_kidney": "kidney", "l_kidney": "kidney"}
ORGAN_LABEL = {name: i + 1 for i, name in enumerate(ORGANS)}

# per structure: centre offset from the grid centre and radius range, both as
# fractions of (nx, ny, nz)
DEFAULT_GEOMETRY = {
    "body": {"offset": (0.0, 0.0, 0.0), "radius": ((0.40, 0.44), (0.31, 0.34), (0.42, 0.46))},
    "liver": {"offset": (-0.13, -0.06, 0.11), "radius": ((0.16, 0.19), (0.13, 0.16), (0.15, 0.18))},
    "spleen": {"offset": (0.22, 0.02, 0.10), "radius": ((0.09, 0.11), (0.08, 0.10), (0.10, 0.13))},
    "r_kidney": {"offset": (-0.14, 0.12, -0.15), "radius": ((0.065, 0.08), (0.065, 0.08), (0.10, 0.12))},
    "l_kidney": {"offset": (0.14, 0.12, -0.15), "radius": ((0.065, 0.08), (0.065, 0.08), (0.10, 0.12))},
}
CENTER_JITTER = 0.03


class PlacementError(RuntimeError):
    """Organs could not be placed disjointly inside the body."""


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    dims: tuple = (64, 64, 64)
    spacing: tuple = (0.9, 0.9, 0.6)
    materials: dict = field(default_factory=lambda: dict(DECT_MATERIALS))
    noise_sigma: tuple = (25.0, 12.0)
    blur_sigma: float = 0.7
    geometry: dict = field(default_factory=lambda: dict(DEFAULT_GEOMETRY))
    center_jitter: float = CENTER_JITTER
    max_retries: int = 50

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ValueError(f"dims must be three extents >= 8, got {self.dims}")
        missing = {"air", "soft_tissue", "liver", "spleen", "kidney"} - set(self.materials)
        if missing:
            raise ValueError(f"material table lacks {sorted(missing)}")
        if min(self.noise_sigma) < 0 or self.blur_sigma < 0:
            raise ValueError("noise and blur sigmas must be non-negative")

    def with_seed(self, seed):
        d = asdict(self)
        d["seed"] = int(seed)
        return PhantomSpec(**d)

    def to_dict(self):
        d = asdict(self)
        d["dims"], d["spacing"], d["noise_sigma"] = list(self.dims), list(self.spacing), list(self.noise_sigma)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("dims", "spacing", "noise_sigma"):
            if key in d:
                d[key] = tuple(d[key])
        if "materials" in d:
            d["materials"] = {k: tuple(v) for k, v in d["materials"].items()}
        return cls(**d)


def _ellipsoid(shape, center, radii):
    """Boolean ellipsoid on a grid of ``shape`` (z, y, x); center/radii given in (x, y, z) voxels."""
    z, y, x = np.ogrid[: shape[0], : shape[1], : shape[2]]
    cx, cy, cz = center
    rx, ry, rz = radii
    return ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2 <= 1.0


def sample_geometry(spec, rng):
    """Draw body and organ ellipsoids; returns ``{name: (center, radii)}`` in voxels (x, y, z)."""
    dims = np.asarray(spec.dims, float)
    mid = (dims - 1) / 2.0
    shape = tuple(spec.dims[::-1])

    def draw(name, jitter):
        g = spec.geometry[name]
        offset = np.asarray(g["offset"]) + rng.uniform(-jitter, jitter, 3)
        radii = np.array([rng.uniform(lo, hi) for lo, hi in g["radius"]]) * dims
        return tuple(mid + offset * dims), tuple(radii)

    body = draw("body", 0.0)
    body_mask = _ellipsoid(shape, *body)
    # organs must sit strictly inside the body and keep a one-voxel gap to each other
    interior = ndimage.binary_erosion(body_mask, iterations=2)
    for _ in range(spec.max_retries):
        organs = {name: draw(name, spec.center_jitter) for name in ORGANS}
        masks = {name: _ellipsoid(shape, *organs[name]) for name in ORGANS}
        if any(not m.any() or (m & ~interior).any() for m in masks.values()):
            continue
        grown = {n: ndimage.binary_dilation(m) for n, m in masks.items()}
        if any((grown[a] & masks[b]).any() for a, b in combinations(ORGANS, 2)):
            continue
        return {"body": body, **organs}
    raise PlacementError(f"no disjoint organ placement after {spec.max_retries} attempts (seed {spec.seed})")


def render(spec, geometry, rng, materials=None, single_spectrum=False):
    materials = materials or spec.materials
    shape = tuple(spec.dims[::-1])
    labels = np.zeros(shape, np.uint8)
    body = _ellipsoid(shape, *geometry["body"])
    for name in ORGANS:
        labels[_ellipsoid(shape, *geometry[name])] = ORGAN_LABEL[name]
    images = []
    for k in range(1 if single_spectrum else 2):
        hu = np.full(shape, materials["air"][k], np.float64)
        hu[body] = materials["soft_tissue"][k]
        for name in ORGANS:
            hu[labels == ORGAN_LABEL[name]] = materials[ORGAN_MATERIAL[name]][k]
        if spec.blur_sigma > 0:
            hu = ndimage.gaussian_filter(hu, spec.blur_sigma, mode="nearest")
        hu += rng.normal(0.0, spec.noise_sigma[k], shape)
        images.append(Volume(hu.astype(np.float32), spec.spacing))
    if single_spectrum:
        images.append(images[0])
    return images[0], images[1], LabelVolume(labels, spec.spacing)


def generate_phantom(spec):
    """Return ``(low, high, labels)``; identical specs give bit-identical output."""
    rng = np.random.default_rng(spec.seed)
    geometry = sample_geometry(spec, rng)
    return render(spec, geometry, rng)


def generate_sect_phantom(spec, materials=None):
    """Single-spectrum phantom: ``low`` and ``high`` are the same volume."""
    rng = np.random.default_rng(spec.seed)
    geometry = sample_geometry(spec, rng)
    sect = PhantomSpec(**{**asdict(spec), "noise_sigma": (SECT_NOISE_SIGMA, SECT_NOISE_SIGMA)})
    return render(sect, geometry, rng, materials=materials or SECT_MATERIALS, single_spectrum=True)


def phantom_geometry(spec):
    """Geometry only (same draws as :func:`generate_phantom`)."""
    return sample_geometry(spec, np.random.default_rng(spec.seed))


# -- datasets -------------------------------------------------------------------

@dataclass
class CaseEntry:
    id: str
    low: str
    high: str
    labels: str
    seed: int


@dataclass
class DatasetManifest:
    """Case list with paths relative to ``root``."""

    root: Path
    cases: list
    kind: str = "dect"

    @property
    def ids(self):
        return [c.id for c in self.cases]

    def entry(self, case_id):
        for c in self.cases:
            if c.id == case_id:
                return c
        raise KeyError(case_id)

    def load(self, case_id):
        """Return ``(DectPair, LabelVolume)`` for one case."""
        c = self.entry(case_id)
        low = read_metaimage(self.root / c.low)
        high = read_metaimage(self.root / c.high)
        labels = read_metaimage(self.root / c.labels, kind="labels")
        return DectPair(low, high, c.id), labels

    def to_json(self):
        payload = {"kind": self.kind, "cases": [asdict(c) for c in self.cases]}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def save(self, path=None):
        path = Path(path) if path else self.root / "manifest.json"
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path):
        path = Path(path)
        payload = json.loads(path.read_text(encoding="utf-8"))
        cases = [CaseEntry(**c) for c in payload["cases"]]
        seeds = [c.seed for c in cases]
        if len(set(seeds)) != len(seeds):
            raise ValueError(f"{path}: duplicate case seeds")
        return cls(path.parent, cases, payload.get("kind", "dect"))


def _write_dataset(n, base_seed, out_dir, spec, generator, kind, prefix):
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = spec or PhantomSpec()
    cases = []
    for i in range(n):
        seed = int(base_seed) + i
        cid = f"{prefix}{i:03d}"
        low, high, labels = generator(spec.with_seed(seed))
        names = {part: f"{cid}_{part}.mhd" for part in ("low", "high", "labels")}
        write_metaimage(low, out / names["low"])
        write_metaimage(high, out / names["high"])
        write_metaimage(labels, out / names["labels"])
        cases.append(CaseEntry(cid, names["low"], names["high"], names["labels"], seed))
    manifest = DatasetManifest(out, cases, kind)
    manifest.save()
    return manifest


def generate_dataset(n, base_seed, out_dir, spec=None):
    """Write ``n`` dual-energy phantoms (seeds ``base_seed + i``) and a JSON manifest."""
    return _write_dataset(n, base_seed, out_dir, spec, generate_phantom, "dect", "case")


def sect_like_dataset(n, base_seed, out_dir, spec=None):
    """Write ``n`` single-spectrum phantoms for pretraining the general model."""
    return _write_dataset(n, base_seed, out_dir, spec, generate_sect_phantom, "sect", "sect")
