"""Learned components: GRU encoders/decoder, the point-voxel scene encoder,
the contact-map predictor and the motion forecaster.

Positions fed to the networks are expressed relative to the root joint of
the last observed frame, so every prediction is invariant to a rigid
translation of scene and motion.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dct import dct_basis, pad_replicate_last
from .errors import InvalidInputError, ShapeError
from .geom import (DEFAULT_EPSILON, MotionSequence,
                   extract_contact_points, split_root_local)


class Module:
    """Parameter container; parameters and submodules are discovered by attribute."""

    def named_parameters(self, prefix=""):
        out = {}
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[prefix + key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(prefix + key + "."))
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    out.update(m.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise InvalidInputError(
                f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data[...] = arr


def _param(arr):
    return Tensor(np.ascontiguousarray(arr, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in, n_out, rng):
        self.weight = _param(ad.glorot_uniform(rng, n_in, n_out))
        self.bias = _param(np.zeros(n_out))

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def zero_(self):
        self.weight.data[...] = 0.0
        self.bias.data[...] = 0.0


class MLP(Module):
    """Stack of linear layers with tanh between them; the last layer is linear."""

    def __init__(self, sizes, rng):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.tanh(x)
        return x


class GRUCell(Module):
    def __init__(self, n_in, hidden, rng):
        self.n_in, self.hidden = n_in, hidden
        n = n_in + hidden
        self.w_z = _param(ad.glorot_uniform(rng, n, hidden))
        self.b_z = _param(np.zeros(hidden))
        self.w_r = _param(ad.glorot_uniform(rng, n, hidden))
        self.b_r = _param(np.zeros(hidden))
        self.w_n = _param(ad.glorot_uniform(rng, n, hidden))
        self.b_n = _param(np.zeros(hidden))

    def __call__(self, x, h):
        return gru_cell(x, h, self)


def gru_cell(x, h, p: GRUCell):
    """One GRU step on row vectors ``x`` (1, n_in) and ``h`` (1, H)."""
    x, h = ad.as_tensor(x), ad.as_tensor(h)
    if x.shape[-1] != p.n_in or h.shape[-1] != p.hidden:
        raise ShapeError(f"gru_cell: input {x.shape} / hidden {h.shape} vs "
                         f"cell ({p.n_in}, {p.hidden})")
    xh = ad.concat([x, h], axis=1)
    z = ad.sigmoid(ad.matmul(xh, p.w_z) + p.b_z)
    r = ad.sigmoid(ad.matmul(xh, p.w_r) + p.b_r)
    n = ad.tanh(ad.matmul(ad.concat([x, r * h], axis=1), p.w_n) + p.b_n)
    return (1.0 - z) * n + z * h


class MotionEncoder(Module):
    """Single-layer GRU over flattened per-frame joints; returns the last hidden state."""

    def __init__(self, num_joints, hidden, rng):
        self.cell = GRUCell(3 * num_joints, hidden, rng)

    def __call__(self, frames):
        return encode_motion(frames, self)


def encode_motion(frames, enc: MotionEncoder):
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] < 1:
        raise InvalidInputError(f"need a non-empty (P, J, 3) history, got {x.shape}")
    h = Tensor(np.zeros((1, enc.cell.hidden)))
    for frame in x.reshape(x.shape[0], 1, -1):
        h = gru_cell(Tensor(frame), h, enc.cell)
    return h


def relative_history(frames, root_index=0):
    """History expressed relative to the last observed root, and that root."""
    x = np.asarray(frames, dtype=np.float64)
    anchor = x[-1, root_index].copy()
    return x - anchor, anchor


# point-voxel encoder --------------------------------------------------------

def normalize_to_grid(points, resolution):
    """Map points into continuous voxel coordinates ``[0, R-1]^3`` of their bounding cube."""
    pts = np.asarray(points, dtype=np.float64)
    lo = pts.min(axis=0)
    extent = float((pts.max(axis=0) - lo).max())
    if not extent > 1e-12:
        raise InvalidInputError("degenerate scene: all points coincide")
    return (pts - lo) / extent * (resolution - 1)


def trilinear_corners(coords, resolution):
    """Flat voxel indices (N, 8) and weights (N, 8) for trilinear sampling."""
    R = resolution
    base = np.clip(np.floor(coords), 0, max(R - 2, 0)).astype(np.int64)
    frac = coords - base
    idx, wts = [], []
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                c = np.minimum(base + np.array([dx, dy, dz]), R - 1)
                idx.append((c[:, 0] * R + c[:, 1]) * R + c[:, 2])
                w = ((frac[:, 0] if dx else 1 - frac[:, 0])
                     * (frac[:, 1] if dy else 1 - frac[:, 1])
                     * (frac[:, 2] if dz else 1 - frac[:, 2]))
                wts.append(w)
    return np.stack(idx, axis=1), np.stack(wts, axis=1)


def devoxelize(grid, coords, resolution):
    """Trilinearly interpolate a (R^3, C) feature grid at continuous coordinates."""
    idx, wts = trilinear_corners(coords, resolution)
    out = None
    for k in range(8):
        term = ad.mul(ad.gather_rows(grid, idx[:, k]), wts[:, k:k + 1])
        out = term if out is None else out + term
    return out


class Conv3d(Module):
    def __init__(self, c_in, c_out, rng):
        self.weight = _param(ad.glorot_uniform(rng, 27 * c_in, 27 * c_out, (27, c_in, c_out)))
        self.bias = _param(np.zeros(c_out))

    def __call__(self, x):
        return ad.conv3d(x, self.weight, self.bias)


class PointVoxelEncoder(Module):
    """Single-scale point-voxel block with pose conditioning before the output head."""

    def __init__(self, in_channels, hidden=128, embed=128, resolution=32, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.resolution = resolution
        self.convs = [Conv3d(in_channels, hidden, rng), Conv3d(hidden, hidden, rng),
                      Conv3d(hidden, hidden, rng)]
        self.point_mlp = [Linear(in_channels, hidden, rng), Linear(hidden, hidden, rng)]
        self.head = [Linear(hidden + embed, hidden, rng), Linear(hidden, in_channels, rng)]

    def __call__(self, points, features, embedding):
        return point_voxel_encode(points, features, embedding, self)


def point_voxel_encode(points, features, embedding, net: PointVoxelEncoder):
    """Per-point residuals (N, C) from scene points, per-point features and a pose embedding."""
    feats = ad.as_tensor(features)
    pts = np.asarray(points.points if hasattr(points, "points") else points, dtype=np.float64)
    N = pts.shape[0]
    if feats.shape[0] != N:
        raise ShapeError(f"features {feats.shape} do not match {N} points")
    R = net.resolution
    coords = normalize_to_grid(pts, R)
    vox = np.clip(np.rint(coords), 0, R - 1).astype(np.int64)
    flat = (vox[:, 0] * R + vox[:, 1]) * R + vox[:, 2]
    counts = np.bincount(flat, minlength=R ** 3).astype(np.float64)
    inv = (1.0 / np.maximum(counts, 1.0))[:, None]
    grid = ad.mul(ad.scatter_add_rows(feats, flat, R ** 3), inv)
    g = ad.reshape(grid, (R, R, R, feats.shape[1]))
    for conv in net.convs:
        g = ad.tanh(conv(g))
    voxel_feat = devoxelize(ad.reshape(g, (R ** 3, g.shape[3])), coords, R)
    p = feats
    for layer in net.point_mlp:
        p = ad.tanh(layer(p))
    fused = voxel_feat + p
    emb = ad.as_tensor(embedding)
    tiled = ad.matmul(Tensor(np.ones((N, 1))), ad.reshape(emb, (1, emb.size)))
    h = ad.tanh(net.head[0](ad.concat([fused, tiled], axis=1)))
    return net.head[1](h)


# architectures -------------------------------------------------------------

@dataclass
class Arch:
    """Network sizes; serialized next to checkpoints."""

    num_joints: int = 21
    past: int = 30
    future: int = 60
    dct_l: int = 20
    root_dct_l: int = 60
    hidden: int = 128
    mlp_layers: int = 6
    voxel_res: int = 32
    root_index: int = 0

    @property
    def root_l(self):
        return min(self.root_dct_l, self.past + self.future)

    def to_dict(self):
        return asdict(self)


class ContactNet(Module):
    def __init__(self, arch: Arch, seed=0):
        rng = np.random.default_rng(seed)
        self.arch = arch
        J, L, H = arch.num_joints, arch.dct_l, arch.hidden
        self.encoder = MotionEncoder(J, H, rng)
        self.scene = PointVoxelEncoder(J * L, H, H, arch.voxel_res, rng)

    def zero_output_head(self):
        self.scene.head[-1].zero_()


class MotionNet(Module):
    def __init__(self, arch: Arch, seed=0):
        rng = np.random.default_rng(seed)
        self.arch = arch
        J, T, H, Lr = arch.num_joints, arch.future, arch.hidden, arch.root_l
        self.encoder = MotionEncoder(J, H, rng)
        n_in = H + T * J * 4 + 3 * Lr
        sizes = [n_in] + [H] * (arch.mlp_layers - 1) + [3 * Lr]
        self.root_mlp = MLP(sizes, rng)
        self.init_hidden = Linear(H, H, rng)
        self.decoder = GRUCell(3 * (J - 1) + 3 + 4 * J + H, H, rng)
        self.out_proj = Linear(H, 3 * (J - 1), rng)

    def zero_output_heads(self):
        self.root_mlp.layers[-1].zero_()
        self.out_proj.zero_()


def contact_features(past_maps, future, dct_l):
    """DCT coefficients of the replicate-padded maps as per-point features.

    Returns:
        (N, J*L) array, joint-major (index ``j * L + l``).
    """
    c = np.asarray(past_maps, dtype=np.float64)
    P, J, N = c.shape
    F = P + future
    if not 1 <= dct_l <= F:
        raise InvalidInputError(f"dct_l={dct_l} must be in [1, {F}]")
    padded = pad_replicate_last(c, future).reshape(F, J * N)
    h = dct_basis(F)[:dct_l] @ padded  # (L, J*N)
    return h.reshape(dct_l, J, N).transpose(2, 1, 0).reshape(N, J * dct_l)


def predict_contact_maps(scene, past_maps, history, net: ContactNet, future=None):
    """Contact maps over past and future frames, shape (P+T, J, N) as a Tensor."""
    arch = net.arch
    T = arch.future if future is None else future
    c = np.asarray(past_maps, dtype=np.float64)
    P, J, N = c.shape
    hist = np.asarray(history.frames if isinstance(history, MotionSequence) else history)
    if hist.shape[0] != P or hist.shape[1] != J:
        raise ShapeError(f"history {hist.shape} does not match maps {c.shape}")
    L = arch.dct_l
    feats = contact_features(c, T, L)
    rel, _ = relative_history(hist, arch.root_index)
    emb = encode_motion(rel, net.encoder)
    resid = point_voxel_encode(scene, Tensor(feats), emb, net.scene)
    coeffs = ad.add(Tensor(feats), resid)  # (N, J*L)
    coeffs = ad.transpose(ad.reshape(coeffs, (N, J, L)), (2, 1, 0))
    B = dct_basis(P + T)[:L]
    maps = ad.matmul(Tensor(B.T), ad.reshape(coeffs, (L, J * N)))
    return ad.reshape(maps, (P + T, J, N))


def _relative_contacts(Q, anchor):
    """Contact points relative to ``anchor``; rows out of contact stay zero."""
    Q = np.asarray(Q, dtype=np.float64)
    out = Q.copy()
    out[..., :3] = (Q[..., :3] - anchor) * Q[..., 3:4]
    return out


def predict_global_translations(history, Q, net: MotionNet, embedding=None):
    """Future root positions (T, 3) from the history and T frames of contact points."""
    arch = net.arch
    hist = np.asarray(history, dtype=np.float64)
    P = hist.shape[0]
    T = arch.future
    Q = np.asarray(Q, dtype=np.float64)
    if Q.shape != (T, arch.num_joints, 4):
        raise ShapeError(f"contact points {Q.shape}, expected {(T, arch.num_joints, 4)}")
    rel, anchor = relative_history(hist, arch.root_index)
    if embedding is None:
        embedding = encode_motion(rel, net.encoder)
    Lr = arch.root_l
    roots = rel[:, arch.root_index]
    base = dct_basis(P + T)[:Lr] @ pad_replicate_last(roots, T)  # (Lr, 3)
    q = _relative_contacts(Q, anchor).reshape(1, -1)
    inp = ad.concat([embedding, Tensor(q), Tensor(base.reshape(1, -1))], axis=1)
    resid = ad.reshape(net.root_mlp(inp), (Lr, 3))
    coeffs = ad.add(Tensor(base), resid)
    full = ad.matmul(Tensor(dct_basis(P + T)[:Lr].T), coeffs)  # (P+T, 3)
    return ad.add(full[P:], Tensor(anchor))


def forecast_local_poses(history, roots, Q, net: MotionNet, embedding=None):
    """Autoregressive local poses, returned as a list of T Tensors of shape (J-1, 3)."""
    arch = net.arch
    hist = np.asarray(history, dtype=np.float64)
    J = arch.num_joints
    rel, anchor = relative_history(hist, arch.root_index)
    if embedding is None:
        embedding = encode_motion(rel, net.encoder)
    roots = ad.as_tensor(roots)
    T = roots.shape[0]
    Q = _relative_contacts(Q, anchor)
    _, local = split_root_local(hist[-1:], arch.root_index)
    prev = Tensor(local.reshape(1, -1))
    h = net.init_hidden(embedding)
    rel_roots = ad.sub(roots, Tensor(anchor))
    out = []
    for t in range(T):
        step_in = ad.concat([prev, ad.reshape(rel_roots[t], (1, 3)),
                             Tensor(Q[t].reshape(1, -1)), embedding], axis=1)
        h = gru_cell(step_in, h, net.decoder)
        prev = ad.add(prev, net.out_proj(h))
        out.append(ad.reshape(prev, (J - 1, 3)))
    return out


def motion_forward(history, Q, net: MotionNet):
    """Roots (T, 3), local poses (T, J-1, 3) and global joints (T, J, 3) as Tensors."""
    arch = net.arch
    hist = np.asarray(history, dtype=np.float64)
    rel, _ = relative_history(hist, arch.root_index)
    emb = encode_motion(rel, net.encoder)
    roots = predict_global_translations(hist, Q, net, emb)
    locals_ = forecast_local_poses(hist, roots, Q, net, emb)
    local = ad.concat([ad.reshape(x, (1, arch.num_joints - 1, 3)) for x in locals_], axis=0)
    glob = ad.add(local, ad.reshape(roots, (roots.shape[0], 1, 3)))
    r = arch.root_index
    root_rows = ad.reshape(roots, (roots.shape[0], 1, 3))
    glob = ad.concat([glob[:, :r], root_rows, glob[:, r:]], axis=1)
    return roots, local, glob


@dataclass
class Forecast:
    joints: np.ndarray  # (T, J, 3)
    roots: np.ndarray
    local: np.ndarray
    contact_maps: np.ndarray  # (P+T, J, N)
    contact_points: np.ndarray  # (T, J, 4)
    scene_points: np.ndarray


def forecast(scene, history, contact_net: ContactNet, motion_net: MotionNet,
             sigma=0.2, epsilon=DEFAULT_EPSILON, contact_mode="predicted", future_motion=None):
    """Full inference: contact maps, contact points, roots, local poses, global joints.

    Args:
        scene: scene points already sampled around the last observed root.
        history: (P, J, 3) observed global joints.
        contact_mode: "predicted", "gt" (needs ``future_motion``) or "none" (zeros).
    """
    from .geom import contact_sequence

    pts = np.asarray(scene.points if hasattr(scene, "points") else scene, dtype=np.float64)
    hist = np.asarray(history.frames if isinstance(history, MotionSequence) else history)
    P = hist.shape[0]
    T = motion_net.arch.future
    maps = np.zeros((P + T, hist.shape[1], pts.shape[0]))
    if contact_mode == "predicted":
        past = contact_sequence(hist, pts, sigma)
        maps = predict_contact_maps(pts, past, hist, contact_net, T).data
        Q = extract_contact_points(maps[P:], pts, epsilon)
    elif contact_mode == "gt":
        if future_motion is None:
            raise InvalidInputError("gt contact mode needs the future motion")
        maps = contact_sequence(np.concatenate([hist, future_motion]), pts, sigma)
        Q = extract_contact_points(maps[P:], pts, epsilon)
    elif contact_mode == "none":
        Q = np.zeros((T, hist.shape[1], 4))
    else:
        raise InvalidInputError(f"unknown contact mode {contact_mode!r}")
    roots, local, glob = motion_forward(hist, Q, motion_net)
    return Forecast(glob.data.copy(), roots.data.copy(), local.data.copy(), maps, Q, pts)
