"""Training-set construction and VOI geometry.

Vessel samples are centered on skeleton voxels of the label mask; the
same number of background samples is drawn from the candidate region
(minus a safety margin around the vessels), so the manifest is exactly
1:1 balanced. Flip/rotation augmentation indexes the 48-element cube
symmetry group. Everything is a pure function of (inputs, seed).
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from vesselpipe.preprocess import skeletonize
from vesselpipe.volume import Mask3, Volume3, extract_cube

log = logging.getLogger(__name__)

MANIFEST_VERSION = "manifest_v1"
VESSEL, BACKGROUND = "vessel", "background"

# --- cube symmetry group ---------------------------------------------------
#
# A transform is an axis permutation followed by axis flips, applied to
# the last three array dimensions. The 6 x 8 = 48 combinations enumerate
# the full cube symmetry group (24 rotations x optional mirror);
# transform_id = perm_index * 8 + flip_bits with flips packed as
# (fx << 2) | (fy << 1) | fz. Id 0 is the identity.

_PERMS = tuple(itertools.permutations((0, 1, 2)))
TRANSFORM_COUNT = 48


def transform_id(perm, flips) -> int:
    """Index of the transform (axis permutation, per-axis flips)."""
    p = _PERMS.index(tuple(perm))
    fx, fy, fz = (bool(f) for f in flips)
    return p * 8 + (fx << 2) + (fy << 1) + fz


def decode_transform(tid: int):
    if not 0 <= tid < TRANSFORM_COUNT:
        raise ValueError(f"transform_id must be in [0, {TRANSFORM_COUNT}), got {tid}")
    perm = _PERMS[tid // 8]
    bits = tid % 8
    return perm, (bool(bits & 4), bool(bits & 2), bool(bits & 1))


def apply_transform_grid(arr: np.ndarray, tid: int) -> np.ndarray:
    """Apply a cube symmetry to the last three axes of an array."""
    perm, flips = decode_transform(tid)
    lead = arr.ndim - 3
    axes = tuple(range(lead)) + tuple(lead + p for p in perm)
    out = arr.transpose(axes)
    for ax, f in enumerate(flips):
        if f:
            out = np.flip(out, axis=lead + ax)
    return np.ascontiguousarray(out)


ID_IDENTITY = 0
ID_MIRROR_X = transform_id((0, 1, 2), (True, False, False))
ID_MIRROR_Y = transform_id((0, 1, 2), (False, True, False))
ID_MIRROR_Z = transform_id((0, 1, 2), (False, False, True))
ID_ROT_Z_90 = transform_id((1, 0, 2), (True, False, False))
ID_ROT_Z_180 = transform_id((0, 1, 2), (True, True, False))
ID_ROT_Z_270 = transform_id((1, 0, 2), (False, True, False))
ID_ROT_Z_90_MIRROR_Z = transform_id((1, 0, 2), (True, False, True))

# Identity, the three axis mirrors, the quarter-turn z rotations, and one
# rotoreflection: eight distinct flip/rotate symmetries.
DEFAULT_AUGMENT_PLAN = (
    ID_IDENTITY, ID_MIRROR_X, ID_MIRROR_Y, ID_MIRROR_Z,
    ID_ROT_Z_90, ID_ROT_Z_180, ID_ROT_Z_270, ID_ROT_Z_90_MIRROR_Z,
)


@dataclass
class Patch:
    """One multi-channel VOI: channels (C, s, s, s), binary label (s, s, s)."""

    channels: np.ndarray
    label: np.ndarray
    center: tuple[int, int, int]
    transform_id: int = 0

    def __post_init__(self):
        if self.channels.ndim != 4:
            raise ValueError(f"channels must be (C, s, s, s), got {self.channels.shape}")
        if self.label.shape != self.channels.shape[1:]:
            raise ValueError(
                f"label dims {self.label.shape} differ from channels {self.channels.shape[1:]}")


def augment(patch: Patch, tid: int) -> Patch:
    """Apply one cube symmetry identically to every channel and the label."""
    return Patch(
        channels=apply_transform_grid(patch.channels, tid),
        label=apply_transform_grid(patch.label, tid),
        center=patch.center,
        transform_id=tid,
    )


# --- centers ---------------------------------------------------------------


def vessel_centers(skeleton: Mask3) -> list[tuple[int, int, int]]:
    """Skeleton foreground coordinates in ascending x-fastest linear order."""
    flat = skeleton.values.ravel(order="F")
    idx = np.flatnonzero(flat)
    xs, ys, zs = np.unravel_index(idx, skeleton.dims, order="F")
    return list(zip(xs.tolist(), ys.tolist(), zs.tolist()))


def background_centers(region: Mask3, vessel_mask: Mask3, n: int, seed: int) -> list:
    """n centers drawn uniformly from region minus the vessel mask.

    Without replacement when enough candidates exist, with replacement
    otherwise. Deterministic for a given seed.
    """
    if region.dims != vessel_mask.dims:
        raise ValueError(f"dims mismatch {region.dims} vs {vessel_mask.dims}")
    domain = region.values & ~vessel_mask.values
    flat = np.flatnonzero(domain.ravel(order="F"))
    if n == 0:
        return []
    if flat.size == 0:
        raise ValueError("background sampling domain is empty")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(flat, size=n, replace=flat.size < n)
    xs, ys, zs = np.unravel_index(chosen, region.dims, order="F")
    return list(zip(xs.tolist(), ys.tolist(), zs.tolist()))


# --- manifest --------------------------------------------------------------


@dataclass
class ManifestEntry:
    case_id: str
    center: tuple[int, int, int]
    cls: str  # vessel | background
    transform_id: int


@dataclass
class DatasetManifest:
    entries: list
    seed: int
    voi_size: int = 32
    version: str = MANIFEST_VERSION

    def __post_init__(self):
        n_vessel = sum(1 for e in self.entries if e.cls == VESSEL)
        n_bg = len(self.entries) - n_vessel
        if n_vessel != n_bg:
            raise ValueError(f"manifest must be balanced, got {n_vessel} vessel vs {n_bg} background")

    def counts(self):
        n_vessel = sum(1 for e in self.entries if e.cls == VESSEL)
        return n_vessel, len(self.entries) - n_vessel


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "version": manifest.version,
        "seed": manifest.seed,
        "voi_size": manifest.voi_size,
        "entries": [
            [e.case_id, list(e.center), e.cls, e.transform_id] for e in manifest.entries
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def load_manifest(path) -> DatasetManifest:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unknown manifest version {doc.get('version')!r}")
    entries = [ManifestEntry(c, tuple(ctr), cls, tid) for c, ctr, cls, tid in doc["entries"]]
    return DatasetManifest(entries=entries, seed=doc["seed"], voi_size=doc["voi_size"])


@dataclass
class SampleCase:
    """Per-case inputs for dataset construction and patch materialization."""

    case_id: str
    cta: Volume3
    vesselness: Volume3
    label: Mask3
    region: Mask3 | None = None


@dataclass
class SamplingConfig:
    voi_size: int = 32
    augment_plan: tuple = DEFAULT_AUGMENT_PLAN


def build_dataset(cases: list, cfg: SamplingConfig | None = None, seed: int = 0) -> DatasetManifest:
    """Balanced manifest over all cases.

    Vessel entries are the label skeleton centers crossed with the
    augmentation plan; background entries are drawn per case to equalize
    counts exactly, from the candidate region (or the whole volume) minus
    a one-voxel dilation of the vessel mask, with transforms drawn from
    the same plan. The final entry order is a seeded shuffle. Cases with
    an empty skeleton are skipped with a warning; all-empty is an error.
    """
    if cfg is None:
        cfg = SamplingConfig()
    if not cfg.augment_plan:
        raise ValueError("augment plan must be nonempty")
    for tid in cfg.augment_plan:
        decode_transform(tid)

    entries = []
    for case_idx, case in enumerate(cases):
        skel = skeletonize(case.label)
        centers = vessel_centers(skel)
        if not centers:
            log.warning("case %s: empty skeleton, skipped", case.case_id)
            continue
        for c in centers:
            for tid in cfg.augment_plan:
                entries.append(ManifestEntry(case.case_id, c, VESSEL, int(tid)))
        n_bg = len(centers) * len(cfg.augment_plan)

        guard = ndimage.binary_dilation(case.label.values, np.ones((3, 3, 3), dtype=bool))
        domain = case.region if case.region is not None else Mask3(np.ones(case.label.dims, bool))
        rng = np.random.default_rng([seed, case_idx])
        try:
            bg = background_centers(domain, Mask3(guard), n_bg, seed=int(rng.integers(2**63)))
        except ValueError:
            # degenerate region: fall back to anything outside the guard
            bg = background_centers(Mask3(np.ones(case.label.dims, bool)), Mask3(guard),
                                    n_bg, seed=int(rng.integers(2**63)))
        tids = rng.choice(np.asarray(cfg.augment_plan, dtype=np.int64), size=n_bg)
        for c, tid in zip(bg, tids):
            entries.append(ManifestEntry(case.case_id, c, BACKGROUND, int(tid)))

    if not entries:
        raise ValueError("all cases had empty skeletons; nothing to sample")
    order = np.random.default_rng([seed, len(cases)]).permutation(len(entries))
    entries = [entries[i] for i in order]
    return DatasetManifest(entries=entries, seed=seed, voi_size=cfg.voi_size)


def materialize_patch(case: SampleCase, entry: ManifestEntry, voi_size: int) -> Patch:
    """Extract the two-channel patch and label for one manifest entry.

    The CTA channel is taken as stored on the case (windowing happens
    upstream); channel order is (CTA, vesselness).
    """
    ch_cta = extract_cube(case.cta.values, entry.center, voi_size)
    ch_ves = extract_cube(case.vesselness.values, entry.center, voi_size)
    label = extract_cube(case.label.values, entry.center, voi_size, dtype=bool)
    patch = Patch(
        channels=np.stack([ch_cta, ch_ves]),
        label=label,
        center=entry.center,
        transform_id=0,
    )
    if entry.transform_id != ID_IDENTITY:
        patch = augment(patch, entry.transform_id)
    return patch


# --- test-time grid --------------------------------------------------------


def _axis_centers(n: int, size: int, stride: int) -> list[int]:
    lo = size // 2
    last = n - (size - size // 2)
    if last <= lo:  # a single VOI spans the whole axis
        return [max(0, last)]
    cs = list(range(lo, last + 1, stride))
    if cs[-1] != last:
        cs.append(last)
    return cs


def test_grid_centers(dims, region: Mask3 | None = None,
                      voi_size: int = 32, stride: int = 16) -> list:
    """Regular lattice of VOI centers covering every voxel (of the region,
    or the whole volume) at least once.

    The final center per axis is clamped inward so that centers stay
    in bounds; border overhang is handled by zero padding downstream.
    """
    if not 1 <= stride <= voi_size:
        raise ValueError(f"stride must be in [1, voi_size], got {stride}")
    axes = [_axis_centers(n, voi_size, stride) for n in dims]
    centers = [(x, y, z) for x in axes[0] for y in axes[1] for z in axes[2]]
    if region is None:
        return centers
    if region.dims != tuple(dims):
        raise ValueError(f"region dims {region.dims} differ from {tuple(dims)}")
    kept = []
    half = voi_size // 2
    for c in centers:
        sl = tuple(slice(max(ci - half, 0), min(ci - half + voi_size, n))
                   for ci, n in zip(c, dims))
        if region.values[sl].any():
            kept.append(c)
    return kept
