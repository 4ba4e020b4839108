"""Two-stage temporal refinement of jittery body tracks against per-frame
observed point clouds.

Stage one fits global rotations (6-D representation) and translations with
the body pose frozen; stage two fits the pose parameters with the refined
global track frozen. Both minimize a Chamfer data term plus 0.1 times a
velocity/acceleration smoothness prior, using Adam and keeping the best
iterate seen.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateRotationError, InvalidInputError, ShapeError
from .geom import SpatialIndex

SMOOTH_WEIGHT = 0.1


# rotations -----------------------------------------------------------------

def rot6d_to_matrix(r) -> np.ndarray:
    """Gram-Schmidt map from 6 numbers (two 3-vectors) to a rotation matrix.

    Accepts (6,) or (..., 6); the result's columns are the orthonormalized
    first vector, the orthonormalized second vector and their cross product.
    """
    r = np.asarray(r, dtype=np.float64)
    a, b = r[..., :3], r[..., 3:6]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na < 1e-12):
        raise DegenerateRotationError("first 6-D column is zero")
    a1 = a / na
    u = b - np.sum(a1 * b, axis=-1, keepdims=True) * a1
    nu = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(nu < 1e-12 * np.maximum(1.0, np.linalg.norm(b, axis=-1, keepdims=True))):
        raise DegenerateRotationError("6-D columns are parallel or the second is zero")
    a2 = u / nu
    a3 = np.cross(a1, a2)
    return np.stack([a1, a2, a3], axis=-1)


def matrix_to_rot6d(M) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    return np.concatenate([M[..., :, 0], M[..., :, 1]], axis=-1)


def _cross(a, b):
    ax, ay, az = a[..., 0:1], a[..., 1:2], a[..., 2:3]
    bx, by, bz = b[..., 0:1], b[..., 1:2], b[..., 2:3]
    return ad.concat([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


def _normalize(v):
    return v / ad.sqrt(ad.tensor_sum(ad.square(v), axis=-1, keepdims=True))


def rot6d_to_matrix_t(r) -> Tensor:
    """Differentiable batch version of :func:`rot6d_to_matrix` for (P, 6) tensors."""
    r = ad.as_tensor(r)
    rot6d_to_matrix(r.data)  # degenerate-input check
    a1 = _normalize(r[..., 0:3])
    b = r[..., 3:6]
    a2 = _normalize(b - ad.tensor_sum(a1 * b, axis=-1, keepdims=True) * a1)
    a3 = _cross(a1, a2)
    shp = r.shape[:-1] + (3, 1)
    return ad.concat([ad.reshape(a, shp) for a in (a1, a2, a3)], axis=-1)


def bmm(A, B):
    """Batched matrix product over leading axes for small trailing matrices."""
    A, B = ad.as_tensor(A), ad.as_tensor(B)
    if A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"bmm: {A.shape} @ {B.shape}")
    a = ad.reshape(A, A.shape + (1,))
    b = ad.reshape(B, B.shape[:-2] + (1,) + B.shape[-2:])
    return ad.tensor_sum(a * b, axis=-2)


def axis_angle_to_matrix_t(w) -> Tensor:
    """Rodrigues' formula for (..., 3) axis-angle tensors."""
    w = ad.as_tensor(w)
    t2 = ad.tensor_sum(ad.square(w), axis=-1, keepdims=True) + 1e-12
    t = ad.sqrt(t2)
    A = ad.reshape(ad.sin(t) / t, w.shape[:-1] + (1, 1))
    B = ad.reshape((1.0 - ad.cos(t)) / t2, w.shape[:-1] + (1, 1))
    x, y, z = w[..., 0:1], w[..., 1:2], w[..., 2:3]
    zero = x * 0.0
    K = ad.reshape(ad.concat([zero, -z, y, z, zero, -x, -y, x, zero], axis=-1),
                   w.shape[:-1] + (3, 3))
    return np.eye(3) + A * K + B * bmm(K, K)


# Chamfer -------------------------------------------------------------------

def _nearest(queries, targets, method):
    if method == "brute" or (method == "auto" and len(queries) * len(targets) <= 2_000_000):
        d = queries[:, None, :] - targets[None, :, :]
        d2 = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
        return np.argmin(d2, axis=1)
    return SpatialIndex(targets).nearest_many(queries)[0]


def chamfer(A, B, method="auto") -> Tensor:
    """Symmetric Chamfer distance with squared distances.

    ``mean_a min_b |a-b|^2 + mean_b min_a |b-a|^2``. Correspondences are
    found on the current values and the result is differentiable through
    the matched pairs. ``method`` selects dense search ("brute"), the grid
    index ("index") or picks by problem size ("auto").
    """
    A, B = ad.as_tensor(A), ad.as_tensor(B)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != 3 or B.shape[1] != 3:
        raise ShapeError(f"chamfer: need (K, 3) point sets, got {A.shape} and {B.shape}")
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise InvalidInputError("chamfer: empty point set")
    ia = _nearest(A.data, B.data, method)
    ib = _nearest(B.data, A.data, method)
    ab = ad.mean(ad.tensor_sum(ad.square(A - ad.gather_rows(B, ia)), axis=1))
    ba = ad.mean(ad.tensor_sum(ad.square(B - ad.gather_rows(A, ib)), axis=1))
    return ab + ba


def brute_chamfer(A, B) -> float:
    """Double-loop reference value."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    ab = np.mean([min(float(np.sum((a - b) ** 2)) for b in B) for a in A])
    ba = np.mean([min(float(np.sum((b - a) ** 2)) for a in A) for b in B])
    return ab + ba


# surrogate body ------------------------------------------------------------

def _sphere_offsets(radius):
    c = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
    # break the cube symmetry so every joint rotation moves its samples
    c = c * np.array([1.0, 0.8, 0.6])
    return radius * c / np.linalg.norm(c, axis=1, keepdims=True)


class SurrogateBody:
    """Kinematic sphere-skeleton standing in for a parametric body mesh.

    Pose parameters are per-joint axis-angle rotations (D = 3K). Each joint
    carries 8 fixed sphere-surface samples rotated with it, so the model
    emits ``8K`` points in its own frame (root at the origin). Shape
    parameters ``beta`` scale bone lengths by ``1 + beta[0]``.
    """

    def __init__(self, parents=None, rest_offsets=None, radius=0.06):
        if parents is None:
            from .synth import PARENTS
            parents = PARENTS
            rest_offsets = default_rest_offsets()
        self.parents = tuple(int(p) for p in parents)
        self.offsets = np.asarray(rest_offsets, dtype=np.float64)
        if self.offsets.shape != (len(self.parents), 3):
            raise ShapeError("rest offsets must be (K, 3)")
        if self.parents[0] != -1 or any(p >= j for j, p in enumerate(self.parents) if j):
            raise InvalidInputError("parents must be topologically ordered with joint 0 as root")
        self.samples = _sphere_offsets(radius)

    @property
    def num_joints(self):
        return len(self.parents)

    @property
    def pose_dim(self):
        return 3 * self.num_joints

    @property
    def num_vertices(self):
        return 8 * self.num_joints

    def joints_and_vertices(self, theta, beta=None):
        """Joint positions (P, K, 3) and surface samples (P, 8K, 3) for (P, D) poses."""
        theta = ad.as_tensor(theta)
        if theta.ndim != 2 or theta.shape[1] != self.pose_dim:
            raise ShapeError(f"theta must be (P, {self.pose_dim}), got {theta.shape}")
        P, K = theta.shape[0], self.num_joints
        scale = 1.0 + (float(np.asarray(beta).reshape(-1)[0]) if beta is not None and np.size(beta) else 0.0)
        local = axis_angle_to_matrix_t(ad.reshape(theta, (P, K, 3)))
        G, pos = [], []
        for k, par in enumerate(self.parents):
            Rk = ad.reshape(local[:, k], (P, 3, 3))
            if par < 0:
                G.append(Rk)
                pos.append(Tensor(np.zeros((P, 3))))
                continue
            off = Tensor(np.broadcast_to(scale * self.offsets[k].reshape(3, 1), (P, 3, 1)).copy())
            pos.append(pos[par] + ad.reshape(bmm(G[par], off), (P, 3)))
            G.append(bmm(G[par], Rk))
        Gs = ad.concat([ad.reshape(g, (P, 1, 3, 3)) for g in G], axis=1)  # (P, K, 3, 3)
        J = ad.concat([ad.reshape(p, (P, 1, 3)) for p in pos], axis=1)  # (P, K, 3)
        S = Tensor(np.broadcast_to(self.samples.T, (P, K, 3, 8)).copy())
        V = bmm(Gs, S)  # (P, K, 3, 8)
        V = ad.transpose(V, (0, 1, 3, 2)) + ad.reshape(J, (P, K, 1, 3))
        return J, ad.reshape(V, (P, 8 * K, 3))

    def __call__(self, theta, beta=None):
        return self.joints_and_vertices(theta, beta)[1]


def default_rest_offsets():
    """Bone offsets of the synthetic 17-joint skeleton in a standing pose (x fwd, y left, z up)."""
    return np.array([
        [0, 0, 0], [0, 0, 0.20], [0, 0, 0.25], [0, 0, 0.15], [0.02, 0, 0.15],
        [0, 0.18, 0.10], [0, 0.02, -0.27], [0, 0, -0.25],
        [0, -0.18, 0.10], [0, -0.02, -0.27], [0, 0, -0.25],
        [0, 0.10, -0.05], [0, 0, -0.44], [0, 0, -0.44],
        [0, -0.10, -0.05], [0, 0, -0.44], [0, 0, -0.44],
    ], dtype=np.float64)


# energies ------------------------------------------------------------------

@dataclass
class ObservationSet:
    clouds: list  # per-frame (N_p, 3) arrays

    def __post_init__(self):
        self.clouds = [np.asarray(c, dtype=np.float64) for c in self.clouds]
        for i, c in enumerate(self.clouds):
            if c.ndim != 2 or c.shape[1] != 3 or c.shape[0] == 0:
                raise InvalidInputError(f"observation {i} must be a non-empty (N, 3) array")

    def __len__(self):
        return len(self.clouds)


def pose_world(R, Tr, vertices):
    """Apply per-frame rotation (6-D) and translation to (P, K, 3) points."""
    M = rot6d_to_matrix_t(R)
    Mt = ad.transpose(M, (0, 2, 1))
    return bmm(vertices, Mt) + ad.reshape(ad.as_tensor(Tr), (-1, 1, 3))


def _frames_chamfer(obs: ObservationSet, world, method="auto"):
    total = None
    for p, o in enumerate(obs.clouds):
        c = chamfer(Tensor(o), ad.reshape(world[p], world.shape[1:]), method)
        total = c if total is None else total + c
    return total * (1.0 / len(obs))


def energy_pcd_global(R, Tr, Theta, beta, body: SurrogateBody, obs: ObservationSet, method="auto"):
    """Mean per-frame Chamfer distance between observations and posed body samples."""
    R, Tr, Theta = ad.as_tensor(R), ad.as_tensor(Tr), ad.as_tensor(Theta)
    P = R.shape[0]
    if Tr.shape[0] != P or Theta.shape[0] != P or len(obs) != P:
        raise ShapeError(f"frame counts differ: R {R.shape[0]}, T {Tr.shape[0]}, "
                         f"Theta {Theta.shape[0]}, observations {len(obs)}")
    return _frames_chamfer(obs, pose_world(R, Tr, body(Theta, beta)), method)


def _diff(x):
    return x[1:] - x[:-1]


def energy_smooth_global(R, Tr):
    """Velocity terms averaged over P-1 frames plus acceleration terms over P-2."""
    R, Tr = ad.as_tensor(R), ad.as_tensor(Tr)
    P = R.shape[0]
    if P < 3:
        raise InvalidInputError(f"smoothness needs at least 3 frames, got {P}")
    dr, dt = _diff(R), _diff(Tr)
    vel = (ad.tensor_sum(ad.square(dr)) + ad.tensor_sum(ad.square(dt))) * (1.0 / (P - 1))
    acc = (ad.tensor_sum(ad.square(_diff(dr))) + ad.tensor_sum(ad.square(_diff(dt)))) * (1.0 / (P - 2))
    return vel + acc


def energy_smooth_pose(Theta):
    """Velocity plus acceleration of pose parameters, both normalized by P-1."""
    Theta = ad.as_tensor(Theta)
    P = Theta.shape[0]
    if P < 3:
        raise InvalidInputError(f"smoothness needs at least 3 frames, got {P}")
    d = _diff(Theta)
    return (ad.tensor_sum(ad.square(d)) + ad.tensor_sum(ad.square(_diff(d)))) * (1.0 / (P - 1))


# optimization --------------------------------------------------------------

@dataclass
class GlobalTrack:
    R: np.ndarray  # (P, 6)
    Tr: np.ndarray  # (P, 3)

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.Tr = np.asarray(self.Tr, dtype=np.float64)
        if self.R.ndim != 2 or self.R.shape[1] != 6 or self.Tr.shape != (self.R.shape[0], 3):
            raise ShapeError(f"track needs R (P, 6) and T (P, 3), got {self.R.shape}, {self.Tr.shape}")
        rot6d_to_matrix(self.R)


@dataclass
class RefineResult:
    value: object
    energies: list = field(default_factory=list)  # objective at every iterate
    best: list = field(default_factory=list)  # best-so-far objective
    best_iter: int = 0


def _adam_minimize(objective, params, iters, lr):
    opt = ad.Adam(params, lr=lr)
    res = RefineResult(None)
    best_val, best_state = np.inf, [p.data.copy() for p in params]
    for it in range(iters + 1):
        opt.zero_grad()
        e = objective()
        val = float(e.data)
        res.energies.append(val)
        if val < best_val:
            best_val, best_state, res.best_iter = val, [p.data.copy() for p in params], it
        res.best.append(best_val)
        if it == iters:
            break
        ad.backward(e)
        opt.step()
    opt.zero_grad()
    for p, s in zip(params, best_state):
        p.data[...] = s
    return res


def stage1_objective(R, Tr, Theta, beta, body, obs, method="auto"):
    return energy_pcd_global(R, Tr, Theta, beta, body, obs, method) + SMOOTH_WEIGHT * energy_smooth_global(R, Tr)


def stage2_objective(R, Tr, Theta, beta, body, obs, method="auto"):
    return energy_pcd_global(R, Tr, Theta, beta, body, obs, method) + SMOOTH_WEIGHT * energy_smooth_pose(Theta)


def refine_global(track: GlobalTrack, Theta, beta, body: SurrogateBody, obs: ObservationSet,
                  iters=300, lr=0.01) -> RefineResult:
    """Optimize rotations and translations with the pose frozen; ``value`` is the best GlobalTrack."""
    R = Tensor(track.R.copy(), requires_grad=True)
    Tr = Tensor(track.Tr.copy(), requires_grad=True)
    Th = Tensor(np.asarray(Theta, dtype=np.float64))
    # vertices do not depend on R or T
    verts = Tensor(body(Th, beta).data)

    def objective():
        pcd = _frames_chamfer(obs, pose_world(R, Tr, verts))
        return pcd + SMOOTH_WEIGHT * energy_smooth_global(R, Tr)

    res = _adam_minimize(objective, [R, Tr], iters, lr)
    res.value = GlobalTrack(R.data.copy(), Tr.data.copy())
    return res


def refine_pose(Theta, track: GlobalTrack, beta, body: SurrogateBody, obs: ObservationSet,
                iters=300, lr=0.01) -> RefineResult:
    """Optimize pose parameters with the refined global track frozen; ``value`` is (P, D)."""
    Th = Tensor(np.array(Theta, dtype=np.float64), requires_grad=True)
    R, Tr = Tensor(track.R), Tensor(track.Tr)

    def objective():
        return stage2_objective(R, Tr, Th, beta, body, obs)

    res = _adam_minimize(objective, [Th], iters, lr)
    res.value = Th.data.copy()
    return res


def refine(track: GlobalTrack, Theta, beta, body, obs, iters=300, lr=0.01):
    """Run both stages; returns (GlobalTrack, Theta, stage-1 result, stage-2 result)."""
    r1 = refine_global(track, Theta, beta, body, obs, iters, lr)
    r2 = refine_pose(Theta, r1.value, beta, body, obs, iters, lr)
    return r1.value, r2.value, r1, r2


def energy_trace_csv(r1: RefineResult, r2: RefineResult | None = None) -> str:
    lines = ["stage,iter,energy,best"]
    for stage, r in ((1, r1), (2, r2)):
        if r is None:
            continue
        lines += [f"{stage},{i},{e:.12g},{b:.12g}" for i, (e, b) in enumerate(zip(r.energies, r.best))]
    return "\n".join(lines) + "\n"


# synthetic data ------------------------------------------------------------

def synthetic_track(P=30, body: SurrogateBody | None = None, seed=0, fps=30.0):
    """Smooth ground-truth (GlobalTrack, Theta) for a walking surrogate body."""
    body = body or SurrogateBody()
    rng = np.random.default_rng(seed)
    t = np.arange(P) / fps
    yaw = rng.uniform(-np.pi, np.pi) + rng.uniform(-0.4, 0.4) * t
    c, s = np.cos(yaw), np.sin(yaw)
    M = np.zeros((P, 3, 3))
    M[:, 0, 0], M[:, 0, 1], M[:, 1, 0], M[:, 1, 1], M[:, 2, 2] = c, -s, s, c, 1.0
    speed = rng.uniform(0.8, 1.3)
    Tr = np.zeros((P, 3))
    Tr[:, 0] = speed * t * c
    Tr[:, 1] = speed * t * s
    Tr[:, 2] = 0.93 + 0.02 * np.cos(2 * np.pi * 2 * t)
    D = body.pose_dim
    amp = rng.uniform(0.05, 0.3, size=D)
    freq = rng.uniform(0.5, 1.5, size=D)
    ph = rng.uniform(0, 2 * np.pi, size=D)
    Theta = amp * np.sin(2 * np.pi * freq * t[:, None] + ph)
    return GlobalTrack(matrix_to_rot6d(M), Tr), Theta


def observe(track: GlobalTrack, Theta, body: SurrogateBody, beta=None):
    """Per-frame clouds of posed body samples."""
    world = pose_world(Tensor(track.R), Tensor(track.Tr), body(Tensor(Theta), beta)).data
    return ObservationSet([w.copy() for w in world])


def corrupt(track: GlobalTrack, Theta, seed=0, trans_sigma=0.02, rot_sigma=0.05, pose_sigma=0.05):
    rng = np.random.default_rng(seed)
    return (GlobalTrack(track.R + rng.normal(0, rot_sigma, track.R.shape),
                        track.Tr + rng.normal(0, trans_sigma, track.Tr.shape)),
            Theta + rng.normal(0, pose_sigma, np.shape(Theta)))


def posed_joints(track: GlobalTrack, Theta, body: SurrogateBody, beta=None):
    J, _ = body.joints_and_vertices(Tensor(Theta), beta)
    return pose_world(Tensor(track.R), Tensor(track.Tr), J).data


def mean_acceleration(x):
    """Mean norm of second differences along the first axis of (P, ..., 3)."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.linalg.norm(np.diff(x, n=2, axis=0), axis=-1).mean())
