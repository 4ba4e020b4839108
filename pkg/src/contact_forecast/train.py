"""Losses, MPJPE metrics, configuration, stage-wise training and evaluation."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidInputError, InvalidParameterError, ParseError, ShapeError
from .geom import (MotionSequence, SceneCloud, SpatialIndex, contact_sequence,
                   extract_contact_points, sample_scene_points, split_root_local)
from .nets import (Arch, ContactNet, MotionNet, forecast, motion_forward,
                   predict_contact_maps)

log = logging.getLogger(__name__)

HORIZONS = (0.5, 1.0, 1.5, 2.0)


# losses --------------------------------------------------------------------

def _check_same(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def loss_map(gt, pred):
    """Mean squared difference over all (frame, joint, point) entries."""
    gt, pred = ad.as_tensor(gt), ad.as_tensor(pred)
    _check_same(gt, pred, "loss_map")
    return ad.mean(ad.square(ad.sub(gt, pred)))


def loss_root(gt, pred):
    gt, pred = ad.as_tensor(gt), ad.as_tensor(pred)
    _check_same(gt, pred, "loss_root")
    return ad.mul(ad.tensor_sum(ad.square(ad.sub(gt, pred))), 1.0 / gt.shape[0])


def loss_local(gt, pred):
    gt, pred = ad.as_tensor(gt), ad.as_tensor(pred)
    _check_same(gt, pred, "loss_local")
    return ad.mul(ad.tensor_sum(ad.square(ad.sub(gt, pred))), 1.0 / (gt.shape[0] * gt.shape[1]))


def loss_contact(pred_global, Q):
    """Squared distance of flagged joints to their contact points, averaged over T*J."""
    pred = ad.as_tensor(pred_global)
    Q = np.asarray(Q, dtype=np.float64)
    if Q.shape != tuple(pred.shape[:2]) + (4,):
        raise ShapeError(f"loss_contact: joints {pred.shape} vs contact points {Q.shape}")
    sq = ad.tensor_sum(ad.square(ad.sub(pred, Tensor(Q[..., :3]))), axis=2)
    T, J = Q.shape[:2]
    return ad.mul(ad.tensor_sum(ad.mul(sq, Q[..., 3])), 1.0 / (T * J))


def loss_motion(l_root, l_local, l_contact, lambdas=(1.0, 1.0, 0.1)):
    l1, l2, l3 = lambdas
    return ad.add(ad.add(ad.mul(l_root, l1), ad.mul(l_local, l2)), ad.mul(l_contact, l3))


# metrics -------------------------------------------------------------------

def horizon_frames(T, fps=30.0, horizons=HORIZONS):
    """0-based frame index for each horizon in seconds; raises if one exceeds T."""
    idx = []
    for h in horizons:
        k = int(round(h * fps))
        if k < 1 or k > T:
            raise InvalidParameterError(f"horizon {h}s = frame {k} is outside 1..{T}")
        idx.append(k - 1)
    return idx


def per_frame_error(gt, pred):
    """Mean joint distance per frame; inputs (T, 3) or (T, K, 3)."""
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise ShapeError(f"mpjpe: shapes {gt.shape} and {pred.shape} differ")
    if gt.ndim == 2:
        gt, pred = gt[:, None], pred[:, None]
    return np.linalg.norm(gt - pred, axis=-1).mean(axis=1)


def _mpjpe(gt, pred, fps, horizons):
    err = per_frame_error(gt, pred) * 1000.0
    idx = horizon_frames(len(err), fps, horizons)
    return {**{f"{h:.1f}s": float(err[i]) for h, i in zip(horizons, idx)},
            "mean": float(err.mean())}


def mpjpe_path(gt_roots, pred_roots, fps=30.0, horizons=HORIZONS):
    """Root position error in millimeters at each horizon and averaged over all frames."""
    return _mpjpe(gt_roots, pred_roots, fps, horizons)


def mpjpe_pose(gt_local, pred_local, fps=30.0, horizons=HORIZONS):
    """Local (root-relative) joint error in millimeters, same layout as :func:`mpjpe_path`."""
    return _mpjpe(gt_local, pred_local, fps, horizons)


# configuration -------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 50
    lr_contact: float = 0.0005
    lr_motion: float = 0.001
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.1
    sigma: float = 0.2
    dct_l: int = 20
    epsilon: float = 0.32
    past: int = 30
    future: int = 60
    sample_radius: float = 2.5
    sample_count: int = 5000
    seed: int = 0
    fps: float = 30.0
    hidden: int = 128
    mlp_layers: int = 6
    root_dct_l: int = 60
    voxel_res: int = 32
    grad_accum: int = 1
    max_steps: int = 0  # 0 = no cap
    window_stride: int = 10
    eval_workers: int = 1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("lambda1", "lambda2", "lambda3", "max_steps", "seed"):
                if v < 0:
                    raise InvalidParameterError(f"{f.name} must be >= 0, got {v}")
            elif not v > 0:
                raise InvalidParameterError(f"{f.name} must be positive, got {v}")
        if not 0 < self.epsilon < 1:
            raise InvalidParameterError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if self.dct_l > self.past + self.future:
            raise InvalidParameterError("dct_l exceeds past + future")

    @property
    def lambdas(self):
        return (self.lambda1, self.lambda2, self.lambda3)

    def arch(self, num_joints, root_index=0) -> Arch:
        return Arch(num_joints=num_joints, past=self.past, future=self.future,
                    dct_l=self.dct_l, root_dct_l=self.root_dct_l, hidden=self.hidden,
                    mlp_layers=self.mlp_layers, voxel_res=self.voxel_res,
                    root_index=root_index)

    def with_overrides(self, **kw):
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def format_kv(d) -> str:
    return "".join(f"{k} = {v!r}\n" if isinstance(v, str) else f"{k} = {v}\n" for k, v in d.items())


def parse_kv(text, path=None) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw!r}", line=lineno, path=path)
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError("empty key", line=lineno, path=path)
        out[key] = val
    return out


def config_from_kv(kv: dict, base: TrainConfig | None = None, path=None) -> TrainConfig:
    base = base or TrainConfig()
    types = {f.name: f.type for f in fields(TrainConfig)}
    vals = {}
    for k, v in kv.items():
        if k not in types:
            raise ParseError(f"unknown config key {k!r}", path=path)
        try:
            vals[k] = int(v) if types[k] in ("int", int) else float(v)
        except ValueError:
            raise ParseError(f"{k}: cannot parse {v!r} as {types[k]}", path=path) from None
    return replace(base, **vals)


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        return config_from_kv(parse_kv(fh.read(), path), path=path)


def save_config(path, cfg: TrainConfig):
    with open(path, "w") as fh:
        fh.write("# training configuration\n" + format_kv(asdict(cfg)))


# data ----------------------------------------------------------------------

@dataclass
class Sample:
    """One training/evaluation window with its scene points sampled around the last observed root."""

    scene: np.ndarray  # (N, 3)
    motion: np.ndarray  # (P+T, J, 3)
    maps: np.ndarray  # (P+T, J, N) ground-truth contact maps
    root_index: int = 0

    def history(self, P):
        return self.motion[:P]

    def future(self, P):
        return self.motion[P:]


def make_windows(motion: MotionSequence, length: int, stride: int):
    F = motion.num_frames
    return [motion.frames[s:s + length] for s in range(0, F - length + 1, stride)]


def prepare_samples(pairs, cfg: TrainConfig):
    """Cut (scene, motion) pairs into windows and precompute sampled points and maps."""
    out = []
    length = cfg.past + cfg.future
    for pi, (scene, motion) in enumerate(pairs):
        index = SpatialIndex(scene.points)
        for wi, win in enumerate(make_windows(motion, length, cfg.window_stride)):
            anchor = win[cfg.past - 1, motion.root_index]
            seed = np.random.SeedSequence([cfg.seed, pi, wi])
            pts = sample_scene_points(scene, anchor, cfg.sample_radius, cfg.sample_count,
                                      np.random.default_rng(seed), index=index).points
            maps = contact_sequence(win, pts, cfg.sigma)
            out.append(Sample(pts, win, maps, motion.root_index))
    if not out:
        raise InvalidInputError("dataset produced no windows of past + future frames")
    return out


# training ------------------------------------------------------------------

@dataclass
class TrainResult:
    net: object
    epoch_losses: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    steps: int = 0


def contact_loss_for(sample: Sample, net: ContactNet, cfg: TrainConfig):
    P = cfg.past
    pred = predict_contact_maps(sample.scene, sample.maps[:P], sample.motion[:P], net, cfg.future)
    return loss_map(sample.maps, pred)


def gt_contact_points(sample: Sample, cfg: TrainConfig):
    return extract_contact_points(sample.maps[cfg.past:], sample.scene, cfg.epsilon)


def motion_loss_for(sample: Sample, net: MotionNet, cfg: TrainConfig, use_contact=True):
    P = cfg.past
    Q = gt_contact_points(sample, cfg)
    if not use_contact:
        Q = np.zeros_like(Q)
    roots, local, glob = motion_forward(sample.motion[:P], Q, net)
    gt_roots, gt_local = split_root_local(sample.motion[P:], sample.root_index)
    lr = loss_root(gt_roots, roots)
    ll = loss_local(gt_local, local)
    lc = loss_contact(glob, Q)
    return loss_motion(lr, ll, lc, cfg.lambdas)


def _fit(samples, net, loss_fn, lr, cfg: TrainConfig, log_path=None):
    if not samples:
        raise InvalidInputError("empty dataset")
    params = net.parameters()
    opt = ad.Adam(params, lr=lr)
    rng = np.random.default_rng(cfg.seed)
    res = TrainResult(net)
    fh = open(log_path, "w") if log_path else None
    try:
        pending = 0
        for epoch in range(cfg.epochs):
            total = 0.0
            seen = 0
            for i in rng.permutation(len(samples)):
                loss = loss_fn(samples[i])
                ad.backward(loss)
                pending += 1
                total += float(loss.data)
                seen += 1
                res.step_losses.append(float(loss.data))
                if pending == cfg.grad_accum:
                    if cfg.grad_accum > 1:
                        for p in params:
                            if p.grad is not None:
                                p.grad /= cfg.grad_accum
                    opt.step()
                    opt.zero_grad()
                    pending = 0
                    res.steps += 1
                    if cfg.max_steps and res.steps >= cfg.max_steps:
                        break
            res.epoch_losses.append(total / max(seen, 1))
            log.info("epoch %d loss %.6g", epoch, res.epoch_losses[-1])
            if fh:
                fh.write(f"epoch {epoch} loss {res.epoch_losses[-1]:.12g}\n")
                fh.flush()
            if cfg.max_steps and res.steps >= cfg.max_steps:
                break
    finally:
        if fh:
            fh.close()
        opt.zero_grad()
    return res


def train_contact_stage(samples, cfg: TrainConfig, net: ContactNet | None = None,
                        log_path=None) -> TrainResult:
    """Fit the contact predictor on prepared samples with Adam at ``cfg.lr_contact``."""
    if not samples:
        raise InvalidInputError("empty dataset")
    J = samples[0].motion.shape[1]
    net = net or ContactNet(cfg.arch(J, samples[0].root_index), seed=cfg.seed)
    return _fit(samples, net, lambda s: contact_loss_for(s, net, cfg), cfg.lr_contact, cfg, log_path)


def train_motion_stage(samples, cfg: TrainConfig, net: MotionNet | None = None,
                       use_contact=True, log_path=None) -> TrainResult:
    """Fit the motion forecaster given ground-truth contact points (zeros if ``use_contact`` is False)."""
    if not samples:
        raise InvalidInputError("empty dataset")
    J = samples[0].motion.shape[1]
    net = net or MotionNet(cfg.arch(J, samples[0].root_index), seed=cfg.seed + 1)
    return _fit(samples, net, lambda s: motion_loss_for(s, net, cfg, use_contact),
                cfg.lr_motion, cfg, log_path)


def dataset_loss(samples, loss_fn):
    return float(np.mean([float(loss_fn(s).data) for s in samples]))


# evaluation ----------------------------------------------------------------

@dataclass
class EvalReport:
    path: dict
    pose: dict
    num_samples: int
    mode: str = "predicted"

    def columns(self):
        return [f"{h:.1f}s" for h in HORIZONS] + ["mean"]

    def rows(self):
        header = ["method"] + [f"path_{c}" for c in self.columns()] + [f"pose_{c}" for c in self.columns()]

        def cell(d, c):
            return f"{d[c]:.3f}" if c in d else ""

        row = [self.mode] + [cell(self.path, c) for c in self.columns()] + [cell(self.pose, c) for c in self.columns()]
        return header, row

    def to_csv(self) -> str:
        header, row = self.rows()
        return ",".join(header) + "\n" + ",".join(row) + "\n"

    def to_table(self) -> str:
        cols = self.columns()
        w = 8
        top = f"{'':<12}" + f"{'Path Error (mm)':^{w * 5}}" + "  " + f"{'Pose Error (mm)':^{w * 5}}"
        head = f"{'method':<12}" + "".join(f"{c:>{w}}" for c in cols) + "  " + "".join(f"{c:>{w}}" for c in cols)
        vals = lambda d: "".join(f"{d[c]:>{w}.1f}" if c in d else f"{'-':>{w}}" for c in cols)
        return "\n".join([top, head, f"{self.mode:<12}" + vals(self.path) + "  " + vals(self.pose)]) + "\n"


def _eval_one(sample, contact_net, motion_net, cfg, mode):
    P = cfg.past
    fc = forecast(sample.scene, sample.motion[:P], contact_net, motion_net,
                  cfg.sigma, cfg.epsilon, contact_mode=mode, future_motion=sample.motion[P:])
    gt_roots, gt_local = split_root_local(sample.motion[P:], sample.root_index)
    return per_frame_error(gt_roots, fc.roots), per_frame_error(gt_local, fc.local)


def evaluate(samples, contact_net, motion_net, cfg: TrainConfig, mode="predicted",
             predictions=None) -> EvalReport:
    """Aggregate path/pose MPJPE (mm) over samples.

    Args:
        mode: contact points from "predicted" maps, "gt" maps, or "none".
        predictions: optional list of (roots, local) arrays used instead of
            running the networks.

    Horizons beyond the forecast length are omitted from the report.
    """
    if not samples:
        raise InvalidInputError("empty dataset")
    if predictions is not None:
        errs = []
        for s, (roots, local) in zip(samples, predictions):
            gr, gl = split_root_local(s.motion[cfg.past:], s.root_index)
            errs.append((per_frame_error(gr, roots), per_frame_error(gl, local)))
    elif cfg.eval_workers > 1:
        with ThreadPoolExecutor(cfg.eval_workers) as ex:
            errs = list(ex.map(lambda s: _eval_one(s, contact_net, motion_net, cfg, mode), samples))
    else:
        errs = [_eval_one(s, contact_net, motion_net, cfg, mode) for s in samples]
    path = np.mean([e[0] for e in errs], axis=0) * 1000.0
    pose = np.mean([e[1] for e in errs], axis=0) * 1000.0
    T = len(path)
    hs = [h for h in HORIZONS if 1 <= int(round(h * cfg.fps)) <= T]
    idx = horizon_frames(T, cfg.fps, hs)

    def pack(e):
        return {**{f"{h:.1f}s": float(e[i]) for h, i in zip(hs, idx)}, "mean": float(e.mean())}

    return EvalReport(pack(path), pack(pose), len(samples), mode)


def is_finite_report(rep: EvalReport):
    return all(math.isfinite(v) and v >= 0 for d in (rep.path, rep.pose) for v in d.values())
