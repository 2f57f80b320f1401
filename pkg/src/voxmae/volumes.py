"""Volume data model, preprocessing, augmentation, synthetic data and splits.

Voxel arrays are held as numpy arrays indexed ``[x, y, z]``.  Whenever a
volume is flattened (on disk, inside a patch token) the x index varies
fastest, i.e. Fortran order.
"""

from __future__ import annotations

import dataclasses
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import FormatError, InvalidArgument

HU = "HU"
NORMALIZED = "normalized"
AXES = {"x": 0, "y": 1, "z": 2}


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    unit: str = NORMALIZED

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise InvalidArgument(f"voxels must be a non-empty 3-D array, got {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise InvalidArgument(f"spacing must be 3 positive values, got {self.spacing}")
        if self.unit not in (HU, NORMALIZED):
            raise InvalidArgument(f"unknown unit {self.unit!r}")

    @property
    def dims(self):
        return tuple(int(d) for d in self.voxels.shape)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def equals(self, other):
        """Bit-exact comparison of voxels, spacing and unit."""
        return (self.dims == other.dims and self.spacing == other.spacing
                and self.unit == other.unit
                and self.voxels.dtype == other.voxels.dtype
                and np.ascontiguousarray(self.voxels).tobytes() == np.ascontiguousarray(other.voxels).tobytes())


# ---------------------------------------------------------------------------
# preprocessing


def _linear_axis(arr, axis, new_len):
    """Linear interpolation along one axis with pixel-centre alignment."""
    old_len = arr.shape[axis]
    pos = (np.arange(new_len, dtype=np.float64) + 0.5) * (old_len / new_len) - 0.5
    pos = np.clip(pos, 0.0, old_len - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, old_len - 1)
    w = (pos - lo).astype(arr.dtype)
    shape = [1] * arr.ndim
    shape[axis] = new_len
    w = w.reshape(shape)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    return a + (b - a) * w


def trilinear_resize(arr, new_size):
    """Separable trilinear resize of a 3-D array; sample coordinates clamp at the edges."""
    out = arr
    for axis, n in enumerate(new_size):
        if out.shape[axis] != n:
            out = _linear_axis(out, axis, n)
    return out


def resample_volume(v: Volume, new_size) -> Volume:
    """Resize to ``new_size`` voxels keeping the physical extent of every axis."""
    new_size = tuple(int(n) for n in new_size)
    if len(new_size) != 3 or min(new_size) <= 0:
        raise InvalidArgument(f"new_size must be 3 positive integers, got {new_size}")
    spacing = tuple(o * s / n for o, s, n in zip(v.dims, v.spacing, new_size))
    if new_size == v.dims:
        return Volume(v.voxels.copy(), v.spacing, v.unit)
    return Volume(trilinear_resize(v.voxels, new_size), spacing, v.unit)


def clip_normalize(v: Volume, lo: float = -1200.0, hi: float = 800.0) -> Volume:
    """Clip Hounsfield units to ``[lo, hi]`` and min-max scale to [0, 1]."""
    if v.unit != HU:
        raise InvalidArgument(f"clip_normalize expects a HU volume, got unit {v.unit!r}")
    if not lo < hi:
        raise InvalidArgument(f"need lo < hi, got [{lo}, {hi}]")
    x = np.clip(v.voxels, lo, hi)
    out = ((x - lo) / (hi - lo)).astype(np.float32)
    return Volume(out, v.spacing, NORMALIZED)


def flip(v: Volume, axes) -> Volume:
    idx = tuple(AXES[a] if isinstance(a, str) else int(a) for a in axes)
    if not idx:
        return Volume(v.voxels.copy(), v.spacing, v.unit)
    return Volume(np.flip(v.voxels, axis=idx).copy(), v.spacing, v.unit)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationSpec:
    flip_prob: tuple = (0.0, 0.0, 0.0)
    rotation_max_deg: float = 0.0
    scale_range: tuple = (1.0, 1.0)
    noise_sigma: float = 0.0
    smooth_sigma_range: tuple = (0.0, 0.0)
    contrast_gamma_range: tuple = (1.0, 1.0)
    translation_max_voxels: int = 0

    def __post_init__(self):
        if len(self.flip_prob) != 3 or any(not 0.0 <= p <= 1.0 for p in self.flip_prob):
            raise InvalidArgument(f"flip probabilities must be 3 values in [0,1]: {self.flip_prob}")
        for name in ("scale_range", "smooth_sigma_range", "contrast_gamma_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidArgument(f"{name} must be ordered, got {(lo, hi)}")
        if self.rotation_max_deg < 0 or self.noise_sigma < 0 or self.translation_max_voxels < 0:
            raise InvalidArgument("magnitudes must be non-negative")
        if self.smooth_sigma_range[0] < 0 or self.contrast_gamma_range[0] <= 0 or self.scale_range[0] <= 0:
            raise InvalidArgument("sigma must be >= 0, gamma and scale > 0")

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def pretrain(cls):
        # sagittal and axial flips only
        return cls(flip_prob=(0.5, 0.0, 0.5))

    @classmethod
    def finetune(cls):
        return cls(rotation_max_deg=10.0, scale_range=(0.9, 1.1), noise_sigma=0.01,
                   smooth_sigma_range=(0.0, 1.0), contrast_gamma_range=(0.8, 1.25),
                   translation_max_voxels=4)

    @classmethod
    def aggressive(cls):
        """Test-time augmentation preset used for uncertainty estimates."""
        return cls(flip_prob=(0.5, 0.5, 0.5), rotation_max_deg=20.0, scale_range=(0.9, 1.1),
                   noise_sigma=0.02, smooth_sigma_range=(0.0, 1.0),
                   contrast_gamma_range=(0.8, 1.25), translation_max_voxels=4)


PRESETS = {
    "identity": AugmentationSpec.identity,
    "pretrain": AugmentationSpec.pretrain,
    "finetune": AugmentationSpec.finetune,
    "aggressive": AugmentationSpec.aggressive,
}


def _rotation_matrix(angles_rad):
    ax, ay, az = angles_rad
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def augment(v: Volume, spec: AugmentationSpec, rng_seed) -> Volume:
    """Apply flip, affine, smoothing, noise and contrast, in that order.

    Every random draw comes from a generator seeded by ``rng_seed``, and
    the draws happen unconditionally so that toggling one transform does
    not shift the randomness of the others.
    """
    if v.unit != NORMALIZED:
        raise InvalidArgument("augment expects a normalized volume")
    rng = np.random.default_rng(rng_seed)
    x = v.voxels.astype(np.float32, copy=True)

    flips = rng.random(3) < np.asarray(spec.flip_prob)
    angles = np.deg2rad(rng.uniform(-1.0, 1.0, 3) * spec.rotation_max_deg)
    scale = rng.uniform(*spec.scale_range)
    shift = rng.integers(-spec.translation_max_voxels, spec.translation_max_voxels + 1, 3)
    sigma = rng.uniform(*spec.smooth_sigma_range)
    gamma = rng.uniform(*spec.contrast_gamma_range)
    noise_seed = rng.integers(2**63)

    axes = tuple(np.flatnonzero(flips))
    if axes:
        x = np.flip(x, axis=axes).copy()

    matrix = _rotation_matrix(angles) / scale
    if not (np.allclose(matrix, np.eye(3), rtol=0, atol=0) and not shift.any()):
        # output coordinate o samples input at M (o - c) + c - shift
        centre = (np.asarray(x.shape) - 1) / 2.0
        offset = centre - matrix @ centre - shift
        x = ndimage.affine_transform(x, matrix, offset=offset, order=1, mode="nearest")

    if sigma > 0:
        x = ndimage.gaussian_filter(x, sigma, mode="nearest")
    if spec.noise_sigma > 0:
        x = x + np.random.default_rng(noise_seed).normal(0.0, spec.noise_sigma, x.shape).astype(np.float32)
    if gamma != 1.0:
        x = np.power(np.clip(x, 0.0, 1.0), gamma)
    x = np.clip(x, 0.0, 1.0).astype(np.float32)
    return Volume(x, v.spacing, v.unit)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class Record:
    path: str
    labels: tuple
    subject: str | None = None

    @property
    def source(self):
        """Records are grouped into sources by their parent directory."""
        return os.path.dirname(self.path)


@dataclass
class DatasetManifest:
    records: list
    class_names: list

    def __post_init__(self):
        k = len(self.class_names)
        seen = set()
        for r in self.records:
            if len(r.labels) != k:
                raise InvalidArgument(f"{r.path}: expected {k} labels, got {len(r.labels)}")
            if any(l not in (0, 1) for l in r.labels):
                raise InvalidArgument(f"{r.path}: labels must be 0/1")
            if r.path in seen:
                raise InvalidArgument(f"duplicate path {r.path}")
            seen.add(r.path)

    def __len__(self):
        return len(self.records)

    @property
    def labels(self):
        return np.array([r.labels for r in self.records], dtype=np.int64).reshape(len(self.records), len(self.class_names))

    def subset(self, indices):
        return DatasetManifest([self.records[i] for i in indices], list(self.class_names))


def write_manifest(m: DatasetManifest, path) -> None:
    lines = ["#classes:" + ",".join(m.class_names)]
    for r in m.records:
        fields = [r.path, ",".join(str(int(l)) for l in r.labels)]
        if r.subject is not None:
            fields.append(r.subject)
        lines.append("\t".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("#classes:"):
        raise FormatError(f"{path}: first line must start with '#classes:'")
    header = text[0][len("#classes:"):]
    class_names = [c for c in header.split(",") if c] if header else []
    records = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) not in (2, 3):
            raise FormatError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields")
        try:
            labels = tuple(int(x) for x in fields[1].split(",")) if fields[1] else ()
        except ValueError:
            raise FormatError(f"{path}:{lineno}: bad label field {fields[1]!r}") from None
        records.append(Record(fields[0], labels, fields[2] if len(fields) == 3 else None))
    try:
        return DatasetManifest(records, class_names)
    except InvalidArgument as e:
        raise FormatError(f"{path}: {e}") from None


def resolve_path(manifest_path, record_path):
    """Record paths are relative to the manifest's directory unless absolute."""
    p = Path(record_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


# ---------------------------------------------------------------------------
# TVOL format

MAGIC = b"TVL1"
_HEADER = struct.Struct("<4s3I3fB")
DTYPE_F32 = 0


def write_volume(v: Volume, path) -> None:
    header = _HEADER.pack(MAGIC, *v.dims, *v.spacing, DTYPE_F32)
    payload = np.asarray(v.voxels, dtype="<f4").ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_volume(path, unit=None) -> Volume:
    """Parse a TVOL file.

    The format does not carry a unit; unless given, it is inferred as
    "normalized" when every voxel lies in [0, 1] and "HU" otherwise.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: file too short for header ({len(blob)} bytes)")
    magic, nx, ny, nz, sx, sy, sz, dtype = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{path}: unknown dtype code {dtype}")
    expected = 4 * nx * ny * nz
    actual = len(blob) - _HEADER.size
    if actual != expected:
        raise FormatError(f"{path}: payload has {actual} bytes, expected {expected}")
    voxels = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).astype(np.float32)
    voxels = np.ascontiguousarray(voxels.reshape((nx, ny, nz), order="F"))
    if unit is None:
        unit = NORMALIZED if voxels.size and voxels.min() >= 0 and voxels.max() <= 1 else HU
    return Volume(voxels, (sx, sy, sz), unit)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticSpec:
    dims: tuple = (32, 32, 32)
    n_volumes: int = 64
    class_count: int = 1
    lesion_radius_range: tuple = (4.0, 7.0)
    lesion_intensity_delta: float = 0.5
    background_texture_scale: float = 0.03
    prevalence: tuple = (0.5,)
    seed: int = 0
    class_names: tuple | None = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if isinstance(self.prevalence, (int, float)):
            self.prevalence = (float(self.prevalence),) * self.class_count
        if len(self.prevalence) != self.class_count:
            raise InvalidArgument("need one prevalence per class")
        if any(not 0.0 <= p <= 1.0 for p in self.prevalence):
            raise InvalidArgument("prevalence must lie in [0, 1]")
        lo, hi = self.lesion_radius_range
        if lo <= 0 or lo > hi:
            raise InvalidArgument(f"bad lesion radius range {self.lesion_radius_range}")
        if self.n_volumes < 1 or self.class_count < 1:
            raise InvalidArgument("need at least one volume and one class")
        # each class owns a slab along x; a lesion must fit inside its slab
        slab = self.dims[0] / self.class_count
        if 2 * hi > min(slab, self.dims[1], self.dims[2]):
            raise InvalidArgument(f"lesion radius {hi} does not fit in dims {self.dims}")

    @property
    def names(self):
        return list(self.class_names or [f"class{c}" for c in range(self.class_count)])


def _phantom(rng, dims, scale):
    """Chest-like background: air, a soft-tissue body, two dark lungs, smooth texture.

    Intensities follow the normalized HU scale (air ~0.1, lung ~0.18,
    soft tissue ~0.6).  Body and lung radii jitter per volume.
    """
    grids = np.meshgrid(*[np.linspace(-1, 1, d) for d in dims], indexing="ij")
    body_r = np.array([0.9, 0.75, 0.95]) * rng.uniform(0.9, 1.0, 3)
    body = sum((g / r) ** 2 for g, r in zip(grids, body_r)) <= 1.0
    x = np.where(body, 0.6, 0.1)
    lung_r = np.array([0.32, 0.5, 0.75]) * rng.uniform(0.9, 1.1, 3)
    for side in (-1.0, 1.0):
        c = (side * 0.42, 0.0, 0.0)
        lung = sum(((g - ci) / r) ** 2 for g, ci, r in zip(grids, c, lung_r)) <= 1.0
        x = np.where(lung, 0.18, x)
    noise = ndimage.gaussian_filter(rng.standard_normal(dims), 2.0, mode="wrap")
    noise /= noise.std() + 1e-12
    return x + scale * noise


def _ellipsoid(dims, centre, radii):
    grids = np.meshgrid(*[np.arange(d) for d in dims], indexing="ij")
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grids, centre, radii)) <= 1.0


def generate_synthetic(spec: SyntheticSpec, return_masks=False):
    """Generate textured volumes with ellipsoidal "lesions" for positive classes.

    Class ``c`` places its lesion inside the c-th slab along x, so labels in
    a multi-label corpus are spatially distinguishable.  Returns
    ``(volumes, manifest)``, plus a per-volume list of lesion masks
    (``None`` for a negative volume) when ``return_masks`` is set.
    """
    ss = np.random.SeedSequence(spec.seed)
    label_rng = np.random.default_rng(ss.spawn(1)[0])
    labels = (label_rng.random((spec.n_volumes, spec.class_count)) < np.asarray(spec.prevalence)).astype(int)
    # degenerate prevalences are exact, not sampled
    labels[:, np.asarray(spec.prevalence) == 0.0] = 0
    labels[:, np.asarray(spec.prevalence) == 1.0] = 1

    volumes, masks, records = [], [], []
    slab = spec.dims[0] / spec.class_count
    for i, child in enumerate(ss.spawn(spec.n_volumes + 1)[1:]):
        rng = np.random.default_rng(child)
        x = _phantom(rng, spec.dims, spec.background_texture_scale)
        mask = np.zeros(spec.dims, dtype=bool)
        for c in range(spec.class_count):
            radii = rng.uniform(*spec.lesion_radius_range, size=3)
            lo = np.array([c * slab, 0, 0]) + radii
            hi = np.array([(c + 1) * slab, spec.dims[1], spec.dims[2]]) - 1 - radii
            centre = rng.uniform(lo, np.maximum(lo, hi))
            if labels[i, c]:
                m = _ellipsoid(spec.dims, centre, radii)
                x = x + spec.lesion_intensity_delta * m
                mask |= m
        voxels = np.clip(x, 0.0, 1.0).astype(np.float32)
        volumes.append(Volume(voxels, (1.0, 1.0, 1.0), NORMALIZED))
        masks.append(mask if mask.any() else None)
        records.append(Record(f"synth_{i:05d}.tvol", tuple(int(l) for l in labels[i]), f"subject_{i:05d}"))
    manifest = DatasetManifest(records, spec.names)
    if return_masks:
        return volumes, manifest, masks
    return volumes, manifest


# ---------------------------------------------------------------------------
# splits

SPLITS = ("train", "val", "test")


@dataclass
class SplitSpec:
    ratios: tuple = (0.5, 0.1, 0.4)
    seed: int = 0
    stratify: bool = True
    assignment: list | None = field(default=None, repr=False)

    def indices(self, split):
        if self.assignment is None:
            raise InvalidArgument("split has not been computed")
        return [i for i, s in enumerate(self.assignment) if s == split]


def largest_remainder(total, ratios):
    """Integer allocation of ``total`` proportional to ``ratios`` summing exactly to ``total``."""
    quotas = [total * r for r in ratios]
    counts = [math.floor(q + 1e-9) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def split_dataset(m: DatasetManifest, s: SplitSpec) -> SplitSpec:
    """Seeded train/val/test partition, grouped by subject and optionally stratified.

    Groups (records sharing a subject id) are placed greedily: those
    carrying rare positives first, each into the split with the largest
    outstanding positive quota, then negatives by size quota.  For
    ungrouped single-label data this hits every largest-remainder target
    exactly.
    """
    if len(m) == 0:
        raise InvalidArgument("cannot split an empty manifest")
    if len(s.ratios) != 3 or min(s.ratios) < 0 or abs(sum(s.ratios) - 1.0) > 1e-9:
        raise InvalidArgument(f"ratios must be 3 non-negative values summing to 1, got {s.ratios}")
    rng = np.random.default_rng(s.seed)
    labels = m.labels
    n = len(m)

    groups: dict = {}
    for i, r in enumerate(m.records):
        key = r.subject if r.subject is not None else ("__record__", i)
        groups.setdefault(key, []).append(i)
    units = list(groups.values())
    perm = rng.permutation(len(units))
    units = [units[p] for p in perm]

    size_target = np.array(largest_remainder(n, s.ratios))
    k = labels.shape[1]
    pos_total = labels.sum(axis=0)
    pos_target = np.array([largest_remainder(int(p), s.ratios) for p in pos_total]).reshape(k, 3)
    rarity = np.where(pos_total > 0, pos_total, np.inf)

    def unit_key(u):
        pos = labels[u].any(axis=0)
        if s.stratify and pos.any():
            return (0, float(rarity[pos].min()))
        return (1, 0.0)

    units.sort(key=unit_key)  # stable: seeded order within ties
    size_now = np.zeros(3, dtype=int)
    pos_now = np.zeros((k, 3), dtype=int)
    assignment = [None] * n
    for u in units:
        upos = labels[u].sum(axis=0)
        size_need = size_target - size_now
        if s.stratify and upos.any():
            pos_need = (pos_target - pos_now)[upos > 0].sum(axis=0)
            score = list(zip(pos_need, size_need))
        else:
            score = list(zip(size_need, np.zeros(3)))
        best = max(range(3), key=lambda j: (score[j][0], score[j][1], -j))
        for i in u:
            assignment[i] = SPLITS[best]
        size_now[best] += len(u)
        pos_now[:, best] += upos
    if s.stratify:
        _refine(units, labels, assignment, np.asarray(s.ratios), pos_target, size_target)
    return dataclasses.replace(s, assignment=assignment)


def _refine(units, labels, assignment, ratios, pos_target, size_target):
    """Single moves and pairwise swaps of groups until every class is within
    one positive of its exact quota (or no move helps).  Multi-label data
    can defeat the greedy pass; single-label data never reaches here."""
    quota = labels.sum(axis=0)[:, None] * ratios[None, :]
    upos = [labels[u].sum(axis=0) for u in units]
    where = [SPLITS.index(assignment[u[0]]) for u in units]
    pos = np.zeros_like(pos_target)
    size = np.zeros(3, dtype=int)
    for u, p, j in zip(units, upos, where):
        pos[:, j] += p
        size[j] += len(u)

    def cost(pos, size):
        excess = np.maximum(np.abs(pos - quota) - 1.0 - 1e-9, 0.0).sum()
        return 1000.0 * excess + np.abs(pos - pos_target).sum() + np.abs(size - size_target).sum()

    def violated():
        return np.any(np.abs(pos - quota) > 1.0 + 1e-9)

    if not violated():
        return
    current = cost(pos, size)
    improved = True
    while improved and violated():
        improved = False
        for a in range(len(units)):
            for b in [None] + list(range(a + 1, len(units))):
                ja = where[a]
                targets = range(3) if b is None else [where[b]]
                for jb in targets:
                    if jb == ja:
                        continue
                    p2, s2 = pos.copy(), size.copy()
                    p2[:, ja] -= upos[a]
                    p2[:, jb] += upos[a]
                    s2[ja] -= len(units[a])
                    s2[jb] += len(units[a])
                    if b is not None:
                        p2[:, jb] -= upos[b]
                        p2[:, ja] += upos[b]
                        s2[jb] -= len(units[b])
                        s2[ja] += len(units[b])
                    c = cost(p2, s2)
                    if c < current - 1e-9:
                        pos, size, current = p2, s2, c
                        where[a] = jb
                        if b is not None:
                            where[b] = ja
                        improved = True
                        break
                if improved:
                    break
            if improved:
                break
    for u, j in zip(units, where):
        for i in u:
            assignment[i] = SPLITS[j]


def subsample_indices(labels, fraction, seed, groups=None):
    """Seeded stratified subset of row indices.

    Rows are stratified by ``groups`` when given (e.g. data source),
    otherwise by their label pattern.  Each stratum keeps
    ``fraction`` of its rows with largest-remainder rounding across strata.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if groups is None:
        groups = [tuple(row) for row in labels.reshape(n, -1)]
    strata: dict = {}
    for i, g in enumerate(groups):
        strata.setdefault(g, []).append(i)
    keys = sorted(strata, key=str)
    target = largest_remainder(int(round(n * fraction)), [len(strata[k]) / n for k in keys])
    rng = np.random.default_rng(seed)
    chosen = []
    for key, count in zip(keys, target):
        members = np.array(strata[key])
        chosen.extend(rng.permutation(members)[: min(count, len(members))].tolist())
    return sorted(chosen)


def load_volumes(manifest: DatasetManifest, manifest_path) -> list:
    return [read_volume(resolve_path(manifest_path, r.path)) for r in manifest.records]


def stack(volumes: Sequence[Volume]) -> np.ndarray:
    return np.stack([v.voxels for v in volumes]).astype(np.float32)
