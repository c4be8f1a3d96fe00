"""Candidate-region construction for vessel sampling.

Thresholding, 3D binary morphology, connected-component labeling with
size-ordered labels, and topology-preserving thinning. 26-connectivity is
the default everywhere a vessel is involved: thin oblique tubes fall
apart under 6-connectivity.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy import ndimage

from vesselpipe.volume import Mask3, Volume3

STRUCT_SHAPES = ("box3", "cross6")
MORPH_OPS = ("erode", "dilate", "open", "close")


def _structure(elem: str) -> np.ndarray:
    if elem == "box3":
        return np.ones((3, 3, 3), dtype=bool)
    if elem == "cross6":
        return ndimage.generate_binary_structure(3, 1)
    raise ValueError(f"unknown structuring element {elem!r}, expected one of {STRUCT_SHAPES}")


def _conn_structure(connectivity: int) -> np.ndarray:
    if connectivity == 26:
        return np.ones((3, 3, 3), dtype=bool)
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


@dataclass
class LabelField:
    """Connected-component labeling, labels 1..K in decreasing size order.

    Ties are broken by the smaller x-fastest linear index of the
    component's first voxel. sizes[k-1] is the voxel count of label k.
    """

    labels: np.ndarray
    sizes: tuple[int, ...]

    @property
    def dims(self):
        return self.labels.shape

    @property
    def num_components(self) -> int:
        return len(self.sizes)

    def component_mask(self, label: int) -> Mask3:
        return Mask3(self.labels == label)


def threshold(vol: Volume3, lo: float | None, hi: float | None) -> Mask3:
    """Binary mask of voxels with lo <= value <= hi (inclusive).

    Either bound may be None, meaning unbounded on that side.
    """
    if lo is not None and hi is not None and lo > hi:
        raise ValueError(f"threshold requires lo <= hi, got [{lo}, {hi}]")
    v = vol.values
    mask = np.ones(v.shape, dtype=bool)
    if lo is not None:
        mask &= v >= lo
    if hi is not None:
        mask &= v <= hi
    return Mask3(mask)


def morph(mask: Mask3, op: str, elem: str = "box3", iterations: int = 1) -> Mask3:
    """Binary morphology with out-of-bounds voxels treated as background.

    open = erode then dilate, close = dilate then erode, each applied
    ``iterations`` times.
    """
    if op not in MORPH_OPS:
        raise ValueError(f"unknown morphology op {op!r}, expected one of {MORPH_OPS}")
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    st = _structure(elem)
    v = mask.values

    def erode(m):
        return ndimage.binary_erosion(m, structure=st, iterations=iterations, border_value=0)

    def dilate(m):
        return ndimage.binary_dilation(m, structure=st, iterations=iterations, border_value=0)

    if op == "erode":
        out = erode(v)
    elif op == "dilate":
        out = dilate(v)
    elif op == "open":
        out = dilate(erode(v))
    else:
        out = erode(dilate(v))
    return Mask3(out)


def connected_components(mask: Mask3, connectivity: int = 26) -> LabelField:
    """Label maximal connected foreground sets, largest component first."""
    st = _conn_structure(connectivity)
    raw, k = ndimage.label(mask.values, structure=st)
    if k == 0:
        return LabelField(np.zeros(mask.dims, dtype=np.int32), ())

    flat = raw.ravel(order="F")
    sizes = np.bincount(flat, minlength=k + 1)
    present, first = np.unique(flat, return_index=True)
    first_idx = dict(zip(present.tolist(), first.tolist()))
    order = sorted(range(1, k + 1), key=lambda lab: (-int(sizes[lab]), first_idx[lab]))

    remap = np.zeros(k + 1, dtype=np.int32)
    for new, old in enumerate(order, start=1):
        remap[old] = new
    return LabelField(remap[raw], tuple(int(sizes[old]) for old in order))


def keep_largest(mask: Mask3, k: int = 1, connectivity: int = 26) -> Mask3:
    """Union of the k largest connected components (all, if fewer exist).

    An empty mask stays empty. The double largest-connected-component
    postprocessing step is keep_largest(mask, 2, 26).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    lf = connected_components(mask, connectivity)
    if lf.num_components == 0:
        return Mask3(np.zeros(mask.dims, dtype=bool))
    return Mask3((lf.labels >= 1) & (lf.labels <= k))


# --- topology-preserving thinning ---------------------------------------
#
# Border peeling in six directional sub-iterations (+x, -x, +y, -y, +z,
# -z), deleting only simple points (26-connectivity for foreground, 6 for
# background) that are not curve endpoints, sequentially re-checked, until
# a full cycle removes nothing. The fixed peeling order makes the output
# deterministic.

_N26 = [(dx, dy, dz) for dx, dy, dz in product((-1, 0, 1), repeat=3) if (dx, dy, dz) != (0, 0, 0)]
_N18 = [d for d in _N26 if abs(d[0]) + abs(d[1]) + abs(d[2]) <= 2]
_FACES = [d for d in _N26 if abs(d[0]) + abs(d[1]) + abs(d[2]) == 1]

_N26_INDEX = {d: i for i, d in enumerate(_N26)}


def _adj(pairs, metric):
    out = [[] for _ in pairs]
    for i, a in enumerate(pairs):
        for j, b in enumerate(pairs):
            if i != j and metric(a, b):
                out[i].append(j)
    return out


def _is26(a, b):
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]), abs(a[2] - b[2])) == 1


def _is6(a, b):
    return abs(a[0] - b[0]) + abs(a[1] - b[1]) + abs(a[2] - b[2]) == 1


_ADJ26 = _adj(_N26, _is26)
_ADJ6_18 = _adj(_N18, _is6)
_FACE_POS_IN_18 = [_N18.index(d) for d in _FACES]


def _component_count(active, adjacency, seeds=None) -> int:
    """Connected components among active nodes; optionally only those
    reachable from seed nodes."""
    seen = [False] * len(active)
    count = 0
    start_nodes = seeds if seeds is not None else range(len(active))
    for s in start_nodes:
        if not active[s] or seen[s]:
            continue
        count += 1
        stack = [s]
        seen[s] = True
        while stack:
            u = stack.pop()
            for v in adjacency[u]:
                if active[v] and not seen[v]:
                    seen[v] = True
                    stack.append(v)
    return count


def _is_simple(nbhd26: list, nbhd18_bg: list) -> bool:
    """Simple-point test: deleting the center preserves topology.

    Requires exactly one 26-connected foreground component in the
    26-neighborhood and exactly one 6-connected background component in
    the 18-neighborhood that touches a face neighbor.
    """
    if _component_count(nbhd26, _ADJ26) != 1:
        return False
    return _component_count(nbhd18_bg, _ADJ6_18, seeds=_FACE_POS_IN_18) == 1


def skeletonize(mask: Mask3) -> Mask3:
    """Thin a mask to a unit-width curve skeleton.

    Guarantees: output is a subset of the input, the number of
    26-connected foreground components is preserved, and the result
    contains no 2x2x2 all-foreground block. Curve endpoints (voxels with
    at most one foreground 26-neighbor) are never removed, so existing
    unit-width lines survive unchanged.
    """
    nx, ny, nz = mask.dims
    w = np.zeros((nx + 2, ny + 2, nz + 2), dtype=bool)
    w[1:-1, 1:-1, 1:-1] = mask.values

    n18_pos = [_N26_INDEX[d] for d in _N18]

    def neighbors_of(x, y, z):
        # 26-neighborhood occupancy in padded coordinates
        return [bool(w[x + dx, y + dy, z + dz]) for dx, dy, dz in _N26]

    changed = True
    while changed:
        changed = False
        for d in _FACES:
            core = w[1:-1, 1:-1, 1:-1]
            nb = w[1 + d[0]:nx + 1 + d[0], 1 + d[1]:ny + 1 + d[1], 1 + d[2]:nz + 1 + d[2]]
            cand = np.argwhere(core & ~nb)
            for x0, y0, z0 in cand:
                x, y, z = int(x0) + 1, int(y0) + 1, int(z0) + 1
                if not w[x, y, z]:
                    continue
                if w[x + d[0], y + d[1], z + d[2]]:
                    continue  # no longer a border point in this direction
                occ = neighbors_of(x, y, z)
                if sum(occ) <= 1:
                    continue  # curve endpoint or isolated voxel
                bg18 = [not occ[i] for i in n18_pos]
                if _is_simple(occ, bg18):
                    w[x, y, z] = False
                    changed = True
    return Mask3(w[1:-1, 1:-1, 1:-1])


@dataclass
class CandidateConfig:
    """Heuristic recipe for the candidate vessel region.

    The HU window [-24, 576] drops air/lung below and dense bone above;
    the vesselness threshold keeps tubular responses; one opening with
    the 6-neighborhood element removes speckle. All values are heuristics
    and configurable. crop is an optional inclusive voxel box
    ((x0, y0, z0), (x1, y1, z1)).
    """

    hu_lo: float = -24.0
    hu_hi: float = 576.0
    v_thresh: float = 0.05
    crop: tuple | None = None


def candidate_region(vesselness: Volume3, cta: Volume3, cfg: CandidateConfig | None = None) -> Mask3:
    """Candidate region: vesselness and HU gates, crop box, one opening."""
    if cfg is None:
        cfg = CandidateConfig()
    if vesselness.dims != cta.dims:
        raise ValueError(f"dims mismatch: vesselness {vesselness.dims} vs cta {cta.dims}")
    mask = (vesselness.values >= cfg.v_thresh) & (cta.values >= cfg.hu_lo) & (cta.values <= cfg.hu_hi)
    if cfg.crop is not None:
        (x0, y0, z0), (x1, y1, z1) = cfg.crop
        box = np.zeros(mask.shape, dtype=bool)
        box[max(x0, 0):x1 + 1, max(y0, 0):y1 + 1, max(z0, 0):z1 + 1] = True
        mask &= box
    return morph(Mask3(mask), "open", "cross6", 1)
