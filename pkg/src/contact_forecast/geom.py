"""Scene/skeleton geometry: distance and contact maps, contact points,
a uniform-grid spatial index and scene-point sampling."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyRegionError, InvalidInputError, InvalidParameterError

DEFAULT_SIGMA = 0.2
DEFAULT_EPSILON = 0.32
DEFAULT_SAMPLE_RADIUS = 2.5
DEFAULT_SAMPLE_COUNT = 5000


@dataclass(frozen=True)
class SceneCloud:
    points: np.ndarray  # (N, 3) meters

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidInputError(f"scene points must be (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise InvalidInputError("scene is empty")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("scene contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class Pose:
    joints: np.ndarray  # (J, 3)
    root_index: int = 0

    def __post_init__(self):
        j = np.asarray(self.joints, dtype=np.float64)
        if j.ndim != 2 or j.shape[1] != 3 or j.shape[0] < 2:
            raise InvalidInputError(f"pose must be (J>=2, 3), got {j.shape}")
        if not np.all(np.isfinite(j)):
            raise InvalidInputError("pose contains non-finite coordinates")
        if not 0 <= self.root_index < j.shape[0]:
            raise InvalidInputError(f"root_index {self.root_index} out of range")
        object.__setattr__(self, "joints", j)


@dataclass(frozen=True)
class MotionSequence:
    frames: np.ndarray  # (F, J, 3)
    fps: float = 30.0
    root_index: int = 0

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 3 or f.shape[2] != 3 or f.shape[0] < 1 or f.shape[1] < 2:
            raise InvalidInputError(f"motion must be (F>=1, J>=2, 3), got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise InvalidInputError("motion contains non-finite coordinates")
        if not self.fps > 0:
            raise InvalidInputError(f"fps must be positive, got {self.fps}")
        if not 0 <= self.root_index < f.shape[1]:
            raise InvalidInputError(f"root_index {self.root_index} out of range")
        object.__setattr__(self, "frames", f)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_joints(self) -> int:
        return self.frames.shape[1]

    @property
    def roots(self) -> np.ndarray:
        return self.frames[:, self.root_index]

    def local(self) -> np.ndarray:
        """Non-root joints relative to the root, shape (F, J-1, 3)."""
        return split_root_local(self.frames, self.root_index)[1]

    def slice(self, start: int, stop: int) -> "MotionSequence":
        return MotionSequence(self.frames[start:stop], self.fps, self.root_index)


def split_root_local(frames, root_index=0):
    """Split (F, J, 3) global joints into roots (F, 3) and local offsets (F, J-1, 3)."""
    frames = np.asarray(frames, dtype=np.float64)
    roots = frames[:, root_index]
    others = np.delete(frames, root_index, axis=1)
    return roots, others - roots[:, None, :]


def assemble_global(roots, local, root_index=0):
    """Inverse of :func:`split_root_local`."""
    roots = np.asarray(roots, dtype=np.float64)
    local = np.asarray(local, dtype=np.float64)
    glob = local + roots[:, None, :]
    return np.insert(glob, root_index, roots, axis=1)


def _as_points(x, what):
    if isinstance(x, SceneCloud):
        return x.points
    if isinstance(x, Pose):
        return x.joints
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise InvalidInputError(f"{what} must be (K, 3), got {a.shape}")
    return a


def distance_map(pose, scene) -> np.ndarray:
    """Per-joint Euclidean distances to every scene point, shape (J, N)."""
    joints = _as_points(pose, "pose")
    pts = _as_points(scene, "scene")
    if joints.shape[0] == 0 or pts.shape[0] == 0:
        raise InvalidInputError("empty pose or scene")
    diff = joints[:, None, :] - pts[None, :, :]
    return np.sqrt(np.einsum("jnk,jnk->jn", diff, diff))


def normalize_to_contact(d, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Gaussian proximity ``exp(-d^2 / (2 sigma^2))``."""
    if not sigma > 0:
        raise InvalidParameterError(f"sigma must be positive, got {sigma}")
    d = np.asarray(d, dtype=np.float64)
    return np.exp(-0.5 * (d / sigma) ** 2)


def contact_sequence(motion, scene, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Contact maps for every frame, shape (F, J, N)."""
    frames = motion.frames if isinstance(motion, MotionSequence) else np.asarray(motion, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[2] != 3:
        raise InvalidInputError(f"motion must be (F, J, 3), got {frames.shape}")
    pts = _as_points(scene, "scene")
    if not sigma > 0:
        raise InvalidParameterError(f"sigma must be positive, got {sigma}")
    return np.stack([normalize_to_contact(distance_map(f, pts), sigma) for f in frames])


def extract_contact_points(frame_map, scene, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Nearest (highest-contact) scene point per joint plus an in-contact flag.

    Args:
        frame_map: (J, N) contact values, or (F, J, N) for a whole sequence.
        scene: SceneCloud or (N, 3) points.
        epsilon: contact threshold in (0, 1).

    Returns:
        (J, 4) or (F, J, 4) array: point coordinates then the 0/1 flag;
        rows for joints not in contact are all zeros.
    """
    if not 0 < epsilon < 1:
        raise InvalidParameterError(f"epsilon must be in (0, 1), got {epsilon}")
    pts = _as_points(scene, "scene")
    c = np.asarray(frame_map, dtype=np.float64)
    if c.ndim not in (2, 3) or c.shape[-1] != pts.shape[0]:
        raise InvalidInputError(
            f"contact map shape {c.shape} does not match {pts.shape[0]} scene points")
    k = np.argmax(c, axis=-1)  # first maximum wins
    best = np.take_along_axis(c, k[..., None], axis=-1)[..., 0]
    hit = best > epsilon
    out = np.zeros(c.shape[:-1] + (4,))
    out[..., :3] = np.where(hit[..., None], pts[k], 0.0)
    out[..., 3] = hit.astype(np.float64)
    return out


def _sqdist(pts, q):
    d = pts - q
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


class SpatialIndex:
    """Uniform-grid index over a point cloud.

    Queries evaluate exact squared distances on candidate points in index
    order, so results (including the lowest-index tie rule) coincide with a
    linear scan.
    """

    def __init__(self, points, cell_size: float | None = None):
        pts = _as_points(points, "points")
        if pts.shape[0] < 1:
            raise InvalidInputError("cannot index an empty cloud")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("cloud contains non-finite coordinates")
        self.points = np.ascontiguousarray(pts)
        self.points.setflags(write=False)
        n = pts.shape[0]
        self.lo = pts.min(axis=0)
        extent = pts.max(axis=0) - self.lo
        if cell_size is None:
            span = float(extent.max())
            cell_size = max(span / max(round(n ** (1 / 3)), 1), 1e-6)
        self.h = float(cell_size)
        self.dims = np.floor(extent / self.h).astype(np.int64) + 1
        cells = self._cell_of(pts)
        keys = self._key(cells)
        order = np.argsort(keys, kind="stable")
        sk = keys[order]
        uniq, start = np.unique(sk, return_index=True)
        stop = np.append(start[1:], len(sk))
        self._cells = {int(u): order[s:e] for u, s, e in zip(uniq, start, stop)}

    def __len__(self):
        return self.points.shape[0]

    def _cell_of(self, p):
        return np.floor((np.asarray(p) - self.lo) / self.h).astype(np.int64)

    def _key(self, c):
        return (c[..., 0] * self.dims[1] + c[..., 1]) * self.dims[2] + c[..., 2]

    def _gather(self, lo, hi):
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, self.dims - 1)
        if np.any(hi < lo):
            return np.empty(0, dtype=np.int64)
        found = []
        for i in range(lo[0], hi[0] + 1):
            for j in range(lo[1], hi[1] + 1):
                base = (i * self.dims[1] + j) * self.dims[2]
                for k in range(lo[2], hi[2] + 1):
                    idx = self._cells.get(int(base + k))
                    if idx is not None:
                        found.append(idx)
        if not found:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(found)

    def _shell(self, c, s):
        """Indices in cells at Chebyshev distance exactly ``s`` from cell ``c``."""
        if s == 0:
            return self._gather(c, c)
        parts = []
        lo, hi = c - s, c + s
        # two faces per axis, shrinking the remaining axes to avoid duplicates
        for ax in range(3):
            for side in (lo[ax], hi[ax]):
                a, b = lo.copy(), hi.copy()
                a[ax] = b[ax] = side
                for other in range(ax):
                    a[other] += 1
                    b[other] -= 1
                parts.append(self._gather(a, b))
        parts = [p for p in parts if p.size]
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)

    def nearest(self, q):
        """Return ``(index, distance)`` of the closest point, lowest index on ties."""
        q = np.asarray(q, dtype=np.float64).reshape(3)
        c = self._cell_of(q)
        # rings closer than this cannot contain any point
        gap = np.maximum(np.maximum(-c, c - (self.dims - 1)), 0)
        s = int(gap.max())
        smax = int(np.max(np.maximum(np.abs(c), np.abs(c - (self.dims - 1)))))
        best_i, best_d2 = -1, math.inf
        while s <= smax:
            idx = self._shell(c, s)
            if idx.size:
                d2 = _sqdist(self.points[idx], q)
                m = d2.min()
                cand = idx[d2 == m].min()
                if m < best_d2 or (m == best_d2 and cand < best_i):
                    best_i, best_d2 = int(cand), float(m)
            # unvisited points lie at distance >= s * h
            if best_i >= 0 and math.sqrt(best_d2) < (s - 1e-3) * self.h:
                break
            s += 1
        return best_i, math.sqrt(best_d2)

    def nearest_many(self, queries):
        """Vectorized front end for :meth:`nearest`; returns (indices, distances)."""
        qs = _as_points(queries, "queries")
        idx = np.empty(len(qs), dtype=np.int64)
        dist = np.empty(len(qs))
        for i, q in enumerate(qs):
            idx[i], dist[i] = self.nearest(q)
        return idx, dist

    def within_radius(self, q, r: float) -> np.ndarray:
        """Sorted indices of points with distance <= r."""
        if r < 0:
            raise InvalidParameterError(f"radius must be >= 0, got {r}")
        q = np.asarray(q, dtype=np.float64).reshape(3)
        lo = self._cell_of(q - r)
        hi = self._cell_of(q + r)
        idx = self._gather(lo, hi)
        if idx.size == 0:
            return idx
        d = np.sqrt(_sqdist(self.points[idx], q))
        return np.sort(idx[d <= r])


def build_spatial_index(scene) -> SpatialIndex:
    return SpatialIndex(_as_points(scene, "scene"))


def brute_force_nearest(points, q):
    """Linear-scan reference for :meth:`SpatialIndex.nearest`."""
    d2 = _sqdist(np.asarray(points, dtype=np.float64), np.asarray(q, dtype=np.float64))
    i = int(np.argmin(d2))
    return i, math.sqrt(d2[i])


def sample_scene_points(scene, anchor, radius: float = DEFAULT_SAMPLE_RADIUS,
                        count: int = DEFAULT_SAMPLE_COUNT, seed=0,
                        index: SpatialIndex | None = None) -> SceneCloud:
    """Uniformly sample up to ``count`` scene points within ``radius`` of ``anchor``.

    Sampling is without replacement; when fewer than ``count`` candidates
    exist, all of them are returned. Output keeps the original point order.
    """
    if not radius > 0:
        raise InvalidParameterError(f"radius must be positive, got {radius}")
    if count < 1:
        raise InvalidParameterError(f"count must be >= 1, got {count}")
    pts = _as_points(scene, "scene")
    index = index or SpatialIndex(pts)
    cand = index.within_radius(anchor, radius)
    if cand.size == 0:
        raise EmptyRegionError(f"no scene point within {radius} m of {np.asarray(anchor).tolist()}")
    if cand.size > count:
        rng = np.random.default_rng(seed)
        cand = np.sort(rng.choice(cand, size=count, replace=False))
    return SceneCloud(pts[cand])


def lattice(n=3, spacing=1.0):
    """Regular ``n^3`` lattice, handy for tests and demos."""
    r = np.arange(n) * spacing
    return np.array(list(itertools.product(r, r, r)), dtype=np.float64)
