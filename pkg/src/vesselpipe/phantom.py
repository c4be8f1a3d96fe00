"""Synthetic ground-truthed vascular phantoms.

Desk-scale stand-ins for clinical CTA: curved bright tubes (the vessels),
optional bright spherical distractor blobs (non-vessel tissue that fools
intensity thresholds), a constant background, and Gaussian noise. The
ground-truth mask contains exactly the tube voxels; distractors are never
part of the truth, and a spec whose blobs would touch the truth is
rejected.

Tube polylines are sampled every 0.25 voxel before the distance test so
curvature cannot punch holes in the rasterized mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from vesselpipe.volume import Mask3, Volume3

POLYLINE_STEP = 0.25
PRESETS = ("train8", "eval2", "distractor4")


@dataclass
class Tube:
    """A curved tube: polyline control points (voxel coords), radius, intensity."""

    points: tuple
    radius: float
    intensity: float = 1.0


@dataclass
class Blob:
    """A spherical distractor, never part of the ground truth."""

    center: tuple
    radius: float
    intensity: float = 1.0


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int]
    tubes: tuple
    background_intensity: float = 0.0
    noise_sigma: float = 0.1
    distractors: tuple = ()
    seed: int = 0

    def __post_init__(self):
        self.tubes = tuple(self.tubes)
        self.distractors = tuple(self.distractors)
        if any(n < 16 for n in self.dims):
            raise ValueError(f"phantom dims must be >= 16 per axis, got {self.dims}")
        for t in self.tubes:
            if t.radius <= 0:
                raise ValueError("tube radius must be positive")
        for b in self.distractors:
            if b.radius <= 0:
                raise ValueError("blob radius must be positive")


def _sample_polyline(points) -> np.ndarray:
    pts = [np.asarray(p, dtype=np.float64) for p in points]
    if len(pts) == 1:
        return np.array(pts)
    samples = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        seg = b - a
        length = float(np.linalg.norm(seg))
        n = max(1, math.ceil(length / POLYLINE_STEP))
        for i in range(1, n + 1):
            samples.append(a + seg * (i / n))
    return np.array(samples)


def _mark_ball(mask: np.ndarray, center: np.ndarray, radius: float) -> None:
    """Set voxels within Euclidean ``radius`` of a point, clipped to bounds."""
    dims = mask.shape
    lo = [max(int(math.floor(c - radius)), 0) for c in center]
    hi = [min(int(math.ceil(c + radius)), n - 1) for c, n in zip(center, dims)]
    if any(l > h for l, h in zip(lo, hi)):
        return
    xs = np.arange(lo[0], hi[0] + 1, dtype=np.float64) - center[0]
    ys = np.arange(lo[1], hi[1] + 1, dtype=np.float64) - center[1]
    zs = np.arange(lo[2], hi[2] + 1, dtype=np.float64) - center[2]
    d2 = xs[:, None, None] ** 2 + ys[None, :, None] ** 2 + zs[None, None, :] ** 2
    sub = mask[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
    sub |= d2 <= radius * radius


def _tube_mask(dims, tube: Tube) -> np.ndarray:
    out = np.zeros(dims, dtype=bool)
    for p in _sample_polyline(tube.points):
        _mark_ball(out, p, tube.radius)
    return out


def generate_phantom(spec: PhantomSpec) -> tuple[Volume3, Mask3]:
    """Deterministically render a phantom volume and its ground-truth mask."""
    dims = tuple(spec.dims)
    for t in spec.tubes:
        for p in t.points:
            if any(not 0 <= c <= n - 1 for c, n in zip(p, dims)):
                raise ValueError(f"tube control point {tuple(p)} outside dims {dims}")

    truth = np.zeros(dims, dtype=bool)
    vol = np.full(dims, spec.background_intensity, dtype=np.float32)
    for t in spec.tubes:
        tm = _tube_mask(dims, t)
        vol[tm] = t.intensity
        truth |= tm

    for blob in spec.distractors:
        bm = np.zeros(dims, dtype=bool)
        _mark_ball(bm, np.asarray(blob.center, dtype=np.float64), blob.radius)
        if (bm & truth).any():
            raise ValueError("distractor blob overlaps tube ground truth")
        vol[bm] = blob.intensity

    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        vol = vol + rng.normal(0.0, spec.noise_sigma, size=dims).astype(np.float32)
    return Volume3(vol), Mask3(truth)


def _random_tube(rng, dims, n_segments=2, length_range=(12.0, 20.0),
                 radius_range=(1.7, 2.6), margin=5.0) -> Tube:
    """A gently curved tube placed inside the volume with a safety margin."""
    dims = np.asarray(dims, dtype=np.float64)
    radius = float(rng.uniform(*radius_range))
    total = float(rng.uniform(*length_range))
    lo, hi = margin, dims - margin

    start = rng.uniform(lo, hi)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    pts = [start]
    seg_len = total / n_segments
    for _ in range(n_segments):
        kink = rng.normal(scale=0.35, size=3)
        direction = direction + kink
        direction /= np.linalg.norm(direction)
        nxt = np.clip(pts[-1] + direction * seg_len, lo, hi)
        pts.append(nxt)
    return Tube(points=tuple(tuple(p) for p in pts), radius=radius)


def _random_case(rng, dims, n_tubes, length_range, radius_range, noise_sigma, seed) -> PhantomSpec:
    tubes = [_random_tube(rng, dims, length_range=length_range, radius_range=radius_range)
             for _ in range(n_tubes)]
    return PhantomSpec(dims=dims, tubes=tuple(tubes), noise_sigma=noise_sigma, seed=seed)


def _with_distractors(rng, spec: PhantomSpec, n_blobs: int) -> PhantomSpec:
    """Add bright blobs disjoint from the tube truth by rejection sampling."""
    _, truth = generate_phantom(spec)
    dims = np.asarray(spec.dims, dtype=np.float64)
    blobs = []
    placed = np.zeros(spec.dims, dtype=bool)
    while len(blobs) < n_blobs:
        radius = float(rng.uniform(2.0, 3.0))
        center = rng.uniform(radius + 1, dims - radius - 1)
        probe = np.zeros(spec.dims, dtype=bool)
        _mark_ball(probe, center, radius + 1.5)  # keep a clear gap to the truth
        if (probe & truth).any() or (probe & placed).any():
            continue
        placed |= probe
        blobs.append(Blob(center=tuple(center), radius=radius))
    return PhantomSpec(dims=spec.dims, tubes=spec.tubes,
                       background_intensity=spec.background_intensity,
                       noise_sigma=spec.noise_sigma,
                       distractors=tuple(blobs), seed=spec.seed)


def phantom_suite(preset: str, seed: int = 0) -> list[tuple[Volume3, Mask3]]:
    """Fixed-recipe case sets.

    train8: eight 64^3 training cases, 1-3 curved tubes each.
    eval2: two held-out cases of the same flavor.
    distractor4: four cases with longer tubes plus 3-6 bright blobs each,
    for exercising connected-component postprocessing.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}, expected one of {PRESETS}")
    dims = (64, 64, 64)
    cases = []
    if preset == "train8":
        for idx in range(8):
            rng = np.random.default_rng([seed, idx])
            n_tubes = int(rng.integers(1, 3))
            spec = _random_case(rng, dims, n_tubes, (12.0, 20.0), (1.7, 2.6),
                                noise_sigma=0.1, seed=seed * 1000 + idx)
            cases.append(generate_phantom(spec))
    elif preset == "eval2":
        for idx in range(2):
            rng = np.random.default_rng([seed, 100 + idx])
            n_tubes = int(rng.integers(1, 3))
            spec = _random_case(rng, dims, n_tubes, (12.0, 20.0), (1.7, 2.6),
                                noise_sigma=0.1, seed=seed * 1000 + 100 + idx)
            cases.append(generate_phantom(spec))
    else:
        for idx in range(4):
            rng = np.random.default_rng([seed, 200 + idx])
            n_tubes = int(rng.integers(1, 3))
            spec = _random_case(rng, dims, n_tubes, (25.0, 38.0), (2.2, 3.0),
                                noise_sigma=0.1, seed=seed * 1000 + 200 + idx)
            n_blobs = int(rng.integers(3, 7))
            spec = _with_distractors(rng, spec, n_blobs)
            cases.append(generate_phantom(spec))
    return cases
