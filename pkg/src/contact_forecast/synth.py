"""Procedural scenes and skeleton motion used in place of captured datasets.

Coordinates are meters, z is up and the floor is the plane z = 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError
from .geom import MotionSequence, SceneCloud

SCENES = ("corridor", "room-with-box", "stairs")
MOTIONS = ("straight-walk", "turn", "sit-on-box")

JOINT_NAMES = (
    "pelvis", "spine", "chest", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle",
)
PARENTS = (-1, 0, 1, 2, 3, 2, 5, 6, 2, 8, 9, 0, 11, 12, 0, 14, 15)

PELVIS_HEIGHT = 0.93
ANKLE_HEIGHT = 0.01
THIGH = 0.46
SHIN = 0.46
BOX_TOP = 0.45


@dataclass(frozen=True)
class SynthSpec:
    scene: str = "corridor"
    motion: str = "straight-walk"
    density: float = 100.0  # points per square meter
    frames: int = 120
    fps: float = 30.0
    noise: float = 0.0  # std of joint jitter, meters
    seed: int = 0

    def __post_init__(self):
        if self.scene not in SCENES:
            raise InvalidParameterError(f"unknown scene template {self.scene!r}; choose from {SCENES}")
        if self.motion not in MOTIONS:
            raise InvalidParameterError(f"unknown motion template {self.motion!r}; choose from {MOTIONS}")
        if not (self.density > 0 and self.frames > 0 and self.fps > 0 and self.noise >= 0):
            raise InvalidParameterError("density, frames and fps must be positive; noise >= 0")


# scenes --------------------------------------------------------------------

def _plane(origin, u, v, nu, nv, spacing, rng, jitter=0.25):
    """Grid of points on the parallelogram origin + a*u + b*v with a, b in [0, 1]."""
    origin, u, v = (np.asarray(x, dtype=np.float64) for x in (origin, u, v))
    a = (np.arange(nu) + 0.5) / nu
    b = (np.arange(nv) + 0.5) / nv
    A, B = np.meshgrid(a, b, indexing="ij")
    pts = origin + A.reshape(-1, 1) * u + B.reshape(-1, 1) * v
    nrm = np.cross(u, v)
    nrm /= np.linalg.norm(nrm)
    tang = u / np.linalg.norm(u)
    bit = np.cross(nrm, tang)
    off = rng.uniform(-jitter, jitter, size=(len(pts), 2)) * spacing
    return pts + off[:, :1] * tang + off[:, 1:] * bit


def _rect(origin, u, v, spacing, rng):
    nu = max(int(np.linalg.norm(u) / spacing), 1)
    nv = max(int(np.linalg.norm(v) / spacing), 1)
    return _plane(origin, u, v, nu, nv, spacing, rng)


def _box(center_xy, size, height, spacing, rng):
    cx, cy = center_xy
    sx, sy = size
    x0, y0 = cx - sx / 2, cy - sy / 2
    faces = [
        _rect((x0, y0, height), (sx, 0, 0), (0, sy, 0), spacing, rng),
        _rect((x0, y0, 0), (sx, 0, 0), (0, 0, height), spacing, rng),
        _rect((x0, y0 + sy, 0), (sx, 0, 0), (0, 0, height), spacing, rng),
        _rect((x0, y0, 0), (0, sy, 0), (0, 0, height), spacing, rng),
        _rect((x0 + sx, y0, 0), (0, sy, 0), (0, 0, height), spacing, rng),
    ]
    return np.concatenate(faces)


def make_scene(template, density=100.0, seed=0, length=12.0):
    """Point-sampled floor/wall/box surfaces for a scene template."""
    if template not in SCENES:
        raise InvalidParameterError(f"unknown scene template {template!r}")
    rng = np.random.default_rng(seed)
    h = 1.0 / np.sqrt(density)
    wall_h = 2.5
    if template == "corridor":
        w = 2.4
        parts = [
            _rect((-1.0, -w / 2, 0), (length + 2, 0, 0), (0, w, 0), h, rng),
            _rect((-1.0, -w / 2, 0), (length + 2, 0, 0), (0, 0, wall_h), h, rng),
            _rect((-1.0, w / 2, 0), (length + 2, 0, 0), (0, 0, wall_h), h, rng),
        ]
    elif template == "room-with-box":
        W, D = 8.0, 8.0
        x0, y0 = -1.5, -D / 2
        parts = [
            _rect((x0, y0, 0), (W, 0, 0), (0, D, 0), h, rng),
            _rect((x0, y0, 0), (W, 0, 0), (0, 0, wall_h), h, rng),
            _rect((x0, y0 + D, 0), (W, 0, 0), (0, 0, wall_h), h, rng),
            _rect((x0, y0, 0), (0, D, 0), (0, 0, wall_h), h, rng),
            _rect((x0 + W, y0, 0), (0, D, 0), (0, 0, wall_h), h, rng),
            _box(box_center(), (0.5, 0.5), BOX_TOP, h, rng),
        ]
    else:
        parts = [_rect((-1.0, -1.5, 0), (length + 2, 0, 0), (0, 3.0, 0), h, rng)]
        # staircase beside the walkway, rising along +x
        for k in range(8):
            z = 0.15 * (k + 1)
            x = 1.0 + 0.3 * k
            parts.append(_rect((x, 0.9, z), (0.3, 0, 0), (0, 1.0, 0), h, rng))
            parts.append(_rect((x, 0.9, z - 0.15), (0, 1.0, 0), (0, 0, 0.15), h, rng))
    return SceneCloud(np.concatenate(parts))


def box_center():
    return (3.6, 0.0)


# motion --------------------------------------------------------------------

# body-frame offsets (forward, left, up) relative to the pelvis
_UPPER = {
    1: (0.0, 0.0, 0.20), 2: (0.0, 0.0, 0.45), 3: (0.0, 0.0, 0.60), 4: (0.02, 0.0, 0.75),
    5: (0.0, 0.18, 0.55), 8: (0.0, -0.18, 0.55),
}
_HIP = {11: (0.0, 0.10, -0.05), 14: (0.0, -0.10, -0.05)}


def _heading_frame(psi):
    f = np.stack([np.cos(psi), np.sin(psi), np.zeros_like(psi)], axis=-1)
    l = np.stack([-np.sin(psi), np.cos(psi), np.zeros_like(psi)], axis=-1)
    return f, l


def _knee(hip, ankle, fwd, thigh=THIGH, shin=SHIN):
    d = ankle - hip
    dist = np.linalg.norm(d, axis=-1, keepdims=True)
    mid = hip + d * (thigh / (thigh + shin))
    bend = np.sqrt(np.maximum(thigh ** 2 - (dist * thigh / (thigh + shin)) ** 2, 0.0))
    return mid + fwd * bend


def _path(motion, frames, fps, rng):
    """Root xy, heading, speed and pelvis-height profile per frame."""
    t = np.arange(frames) / fps
    v0 = rng.uniform(0.8, 1.4)
    mod = rng.uniform(0.0, 0.35)
    phase = rng.uniform(0, 2 * np.pi)
    period = rng.uniform(2.5, 4.0)
    speed = v0 * (1.0 + mod * np.sin(2 * np.pi * t / period + phase))
    psi0 = rng.uniform(-0.15, 0.15)
    y0 = rng.uniform(-0.3, 0.3)
    if motion == "turn":
        rate = rng.choice([-1, 1]) * rng.uniform(0.35, 0.8)
        t_on = rng.uniform(0.5, 1.5)
        omega = rate * np.clip((t - t_on) / 0.5, 0.0, 1.0)
    else:
        omega = np.zeros_like(t)
    dt = 1.0 / fps
    psi = psi0 + np.concatenate([[0.0], np.cumsum(omega[:-1] * dt)])
    if motion == "sit-on-box":
        # cruise toward the box, then brake uniformly to stop 0.55 m in front of it
        v0 = rng.uniform(0.8, 1.2)
        dist, brake = box_center()[0] - 0.55, 0.6
        acc = v0 * v0 / (2 * brake)
        t1 = (dist - brake) / v0
        tau = np.clip(t - t1, 0.0, v0 / acc)
        s = np.where(t < t1, v0 * t, dist - brake + v0 * tau - 0.5 * acc * tau * tau)
        psi = np.zeros_like(t)
        y0 = 0.0
    else:
        s = np.concatenate([[0.0], np.cumsum(speed[:-1] * dt)])
    step = np.stack([np.cos(psi[:-1]), np.sin(psi[:-1])], axis=-1) * np.diff(s)[:, None]
    xy = np.concatenate([[[0.0, 0.0]], np.cumsum(step, axis=0)]) + [0.0, y0]
    return t, s, xy, psi


def make_motion(template, frames=120, fps=30.0, seed=0, noise=0.0) -> MotionSequence:
    """Procedurally animated 17-joint skeleton with alternating foot plants."""
    if template not in MOTIONS:
        raise InvalidParameterError(f"unknown motion template {template!r}")
    rng = np.random.default_rng(seed)
    t, s, xy, psi = _path(template, frames, fps, rng)
    F = frames
    stride = rng.uniform(1.1, 1.4)
    phi = s / stride
    fwd, left = _heading_frame(psi)

    pelvis_z = PELVIS_HEIGHT + 0.02 * np.cos(4 * np.pi * phi)
    sit = np.zeros(F)
    turn_back = np.zeros(F)
    if template == "sit-on-box":
        stopped = np.flatnonzero(np.gradient(s) < 1e-4)
        t_stop = stopped[0] if stopped.size else F
        k = np.arange(F)
        turn_back = np.clip((k - t_stop) / (0.8 * fps), 0.0, 1.0)
        sit = np.clip((k - t_stop - 0.8 * fps) / (1.0 * fps), 0.0, 1.0)
        sit = sit * sit * (3 - 2 * sit)
        psi = psi + np.pi * turn_back * turn_back * (3 - 2 * turn_back)
        fwd, left = _heading_frame(psi)

    root = np.zeros((F, 3))
    root[:, :2] = xy
    root[:, 2] = pelvis_z
    if template == "sit-on-box":
        seat = np.array(box_center())
        root[:, :2] = (1 - sit)[:, None] * xy + sit[:, None] * seat
        root[:, 2] = (1 - sit) * pelvis_z + sit * (BOX_TOP + 0.1)

    J = len(JOINT_NAMES)
    X = np.zeros((F, J, 3))
    X[:, 0] = root
    lean = 0.05 * np.gradient(s, 1.0 / fps)[:, None] * fwd
    for j, (a, b, c) in _UPPER.items():
        X[:, j] = root + a * fwd + b * left + np.array([0, 0, c]) + lean * (c / 0.75)

    # feet: stance holds a world-fixed plant, swing moves to the next one
    path_xy = xy
    for side, (hip_j, knee_j, ankle_j, off) in enumerate(((11, 12, 13, 0.0), (14, 15, 16, 0.5))):
        lat = 0.11 if side == 0 else -0.11
        hip = root + _HIP[hip_j][1] * left + np.array([0, 0, _HIP[hip_j][2]])
        u = phi + off
        k = np.floor(u)
        frac = u - k
        def plant(cycle):
            arc = (cycle - off + 0.35) * stride
            i = np.clip(np.searchsorted(s, arc), 0, F - 1)
            base = path_xy[i] + lat * left[i, :2]
            return np.concatenate([base, np.full((len(base), 1), ANKLE_HEIGHT)], axis=1)
        p0 = plant(k)
        p1 = plant(k + 1)
        swing = frac >= 0.6
        w = np.where(swing, (frac - 0.6) / 0.4, 0.0)
        w = w * w * (3 - 2 * w)
        ankle = (1 - w)[:, None] * p0 + w[:, None] * p1
        ankle[:, 2] += np.where(swing, 0.12 * np.sin(np.pi * (frac - 0.6) / 0.4), 0.0)
        if template == "sit-on-box":
            # feet settle under the body once walking stops
            still = (turn_back > 0)
            if still.any():
                first = np.flatnonzero(still)[0]
                rest = root[first, :2] + lat * left[first, :2] * 1.6
                hold = np.concatenate([rest, [ANKLE_HEIGHT]])
                ankle[still] = hold
        X[:, hip_j] = hip
        X[:, ankle_j] = ankle
        X[:, knee_j] = _knee(hip, ankle, fwd)

    # arms swing opposite to the legs
    swing_amp = 0.25 * np.sin(2 * np.pi * phi)
    for sh, el, wr, sign in ((5, 6, 7, -1.0), (8, 9, 10, 1.0)):
        a = sign * swing_amp * (1 - sit)
        X[:, el] = X[:, sh] + 0.5 * a[:, None] * 0.6 * fwd - np.array([0, 0, 0.27])
        X[:, wr] = X[:, sh] + a[:, None] * 0.6 * fwd - np.array([0, 0, 0.52]) + 0.02 * (1 - sit)[:, None] * fwd
        X[:, wr] += sit[:, None] * (0.35 * fwd + np.array([0, 0, 0.2]))
        X[:, el] += sit[:, None] * (0.15 * fwd + np.array([0, 0, 0.05]))

    if noise > 0:
        X = X + rng.normal(0.0, noise, size=X.shape)
    return MotionSequence(X, fps, 0)


def generate_synthetic(spec: SynthSpec):
    """Deterministic (scene, motion) pair for a template spec."""
    scene = make_scene(spec.scene, spec.density, spec.seed)
    motion = make_motion(spec.motion, spec.frames, spec.fps, spec.seed, spec.noise)
    return scene, motion


def stance_frames(motion: MotionSequence, ankle_joint, tol=0.005):
    """Frames where the given ankle is at rest on the floor."""
    a = motion.frames[:, ankle_joint]
    low = a[:, 2] < ANKLE_HEIGHT + tol
    v = np.zeros(len(a))
    v[1:] = np.linalg.norm(np.diff(a, axis=0), axis=1)
    return np.flatnonzero(low & (v < 1e-9))
