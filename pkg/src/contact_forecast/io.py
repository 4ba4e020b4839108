"""Readers and writers for scenes, motions, refinement tracks, contact points
and OBJ line-set exports.

Binary layouts are little-endian:

* scene ``.cams``: ``b"CAMS"``, u32 N, N*3 f32.
* motion ``.camm``: ``b"CAMM"``, u32 J, u32 F, f64 fps, u32 root_index, F*J*3 f64.

Text motions carry a small ``key value`` header followed by one ``x y z``
line per joint per frame.
"""
from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, ParseError
from .geom import MotionSequence, SceneCloud

SCENE_MAGIC = b"CAMS"
MOTION_MAGIC = b"CAMM"
MOTION_TEXT_TAG = "# contact-forecast motion v1"
TRACK_TEXT_TAG = "# contact-forecast track v1"


def _floats(line, n, lineno, path):
    parts = line.split()
    if len(parts) != n:
        raise ParseError(f"expected {n} numbers, got {len(parts)}", line=lineno, path=path)
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise ParseError(f"cannot parse numbers from {line.strip()!r}", line=lineno, path=path) from None
    if not all(math.isfinite(v) for v in vals):
        raise ParseError("non-finite value", line=lineno, path=path)
    return vals


def _data_lines(text):
    for lineno, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if s and not s.startswith("#"):
            yield lineno, s


# scenes --------------------------------------------------------------------

def scene_to_bytes(scene: SceneCloud) -> bytes:
    pts = np.asarray(scene.points, dtype="<f4")
    return SCENE_MAGIC + struct.pack("<I", len(pts)) + pts.tobytes()


def scene_from_bytes(buf: bytes, path=None) -> SceneCloud:
    if len(buf) < 8:
        raise ParseError("truncated header", offset=len(buf), path=path)
    if buf[:4] != SCENE_MAGIC:
        raise ParseError("bad magic, expected CAMS", offset=0, path=path)
    (n,) = struct.unpack_from("<I", buf, 4)
    need = 8 + 12 * n
    if len(buf) != need:
        raise ParseError(f"payload is {len(buf) - 8} bytes, header promises {12 * n}",
                         offset=min(len(buf), need), path=path)
    pts = np.frombuffer(buf, dtype="<f4", count=3 * n, offset=8).reshape(n, 3).astype(np.float64)
    if not np.all(np.isfinite(pts)):
        bad = int(np.flatnonzero(~np.isfinite(pts).all(axis=1))[0])
        raise ParseError("non-finite coordinate", offset=8 + 12 * bad, path=path)
    try:
        return SceneCloud(pts)
    except InvalidInputError as e:
        raise ParseError(str(e), path=path) from None


def scene_to_xyz(scene: SceneCloud) -> str:
    return "".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in scene.points)


def scene_from_xyz(text: str, path=None) -> SceneCloud:
    rows = [_floats(s, 3, n, path) for n, s in _data_lines(text)]
    if not rows:
        raise ParseError("no points", line=1, path=path)
    return SceneCloud(np.array(rows))


def save_scene(path, scene: SceneCloud):
    path = Path(path)
    if path.suffix == ".xyz":
        path.write_text(scene_to_xyz(scene))
    else:
        path.write_bytes(scene_to_bytes(scene))


def load_scene(path) -> SceneCloud:
    path = Path(path)
    if path.suffix == ".xyz":
        try:
            text = path.read_text()
        except UnicodeDecodeError:
            raise ParseError("not a text file", path=path) from None
        return scene_from_xyz(text, path)
    return scene_from_bytes(path.read_bytes(), path)


# motions -------------------------------------------------------------------

def motion_to_bytes(motion: MotionSequence) -> bytes:
    F, J, _ = motion.frames.shape
    head = MOTION_MAGIC + struct.pack("<IIdI", J, F, float(motion.fps), motion.root_index)
    return head + np.asarray(motion.frames, dtype="<f8").tobytes()


def motion_from_bytes(buf: bytes, path=None) -> MotionSequence:
    hsize = 4 + struct.calcsize("<IIdI")
    if len(buf) < hsize:
        raise ParseError("truncated header", offset=len(buf), path=path)
    if buf[:4] != MOTION_MAGIC:
        raise ParseError("bad magic, expected CAMM", offset=0, path=path)
    J, F, fps, root = struct.unpack_from("<IIdI", buf, 4)
    need = hsize + 24 * J * F
    if len(buf) != need:
        raise ParseError(f"payload is {len(buf) - hsize} bytes, header promises {24 * J * F}",
                         offset=min(len(buf), need), path=path)
    frames = np.frombuffer(buf, dtype="<f8", offset=hsize).reshape(F, J, 3).copy()
    if not np.all(np.isfinite(frames)):
        raise ParseError("non-finite coordinate", offset=hsize, path=path)
    try:
        return MotionSequence(frames, fps, root)
    except InvalidInputError as e:
        raise ParseError(str(e), path=path) from None


def motion_to_text(motion: MotionSequence) -> str:
    F, J, _ = motion.frames.shape
    lines = [MOTION_TEXT_TAG, f"J {J}", f"F {F}", f"fps {motion.fps:.17g}",
             f"root {motion.root_index}", "units m"]
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in motion.frames.reshape(-1, 3)]
    return "\n".join(lines) + "\n"


def motion_from_text(text: str, path=None) -> MotionSequence:
    header = {}
    keys = {"J": int, "F": int, "fps": float, "root": int, "units": str}
    it = iter(_data_lines(text))
    coords = []
    for lineno, s in it:
        key, _, val = s.partition(" ")
        if key in keys and key not in header:
            try:
                header[key] = keys[key](val.strip())
            except ValueError:
                raise ParseError(f"bad value for {key}: {val!r}", line=lineno, path=path) from None
            continue
        missing = [k for k in ("J", "F") if k not in header]
        if missing:
            raise ParseError(f"missing header field(s) {missing}", line=lineno, path=path)
        coords.append(_floats(s, 3, lineno, path))
    if "J" not in header or "F" not in header:
        raise ParseError("missing header fields J/F", line=1, path=path)
    units = header.get("units", "m")
    if units not in ("m", "mm"):
        raise ParseError(f"units must be m or mm, got {units!r}", path=path)
    J, F = header["J"], header["F"]
    if len(coords) != J * F:
        raise ParseError(f"expected {J * F} coordinate lines, got {len(coords)}", path=path)
    frames = np.array(coords, dtype=np.float64).reshape(F, J, 3)
    if units == "mm":
        frames /= 1000.0
    try:
        return MotionSequence(frames, header.get("fps", 30.0), header.get("root", 0))
    except InvalidInputError as e:
        raise ParseError(str(e), path=path) from None


def save_motion(path, motion: MotionSequence):
    path = Path(path)
    if path.suffix == ".camm":
        path.write_bytes(motion_to_bytes(motion))
    else:
        path.write_text(motion_to_text(motion))


def load_motion(path) -> MotionSequence:
    path = Path(path)
    if path.suffix == ".camm":
        return motion_from_bytes(path.read_bytes(), path)
    try:
        text = path.read_text()
    except UnicodeDecodeError:
        raise ParseError("not a text file", path=path) from None
    return motion_from_text(text, path)


# refinement tracks ---------------------------------------------------------

def track_to_text(R, Tr, Theta) -> str:
    R, Tr, Theta = (np.asarray(a, dtype=np.float64) for a in (R, Tr, Theta))
    P, D = Theta.shape
    lines = [TRACK_TEXT_TAG, f"P {P}", f"D {D}"]
    for r, t, th in zip(R, Tr, Theta):
        lines.append(" ".join(f"{v:.17g}" for v in np.concatenate([r, t, th])))
    return "\n".join(lines) + "\n"


def track_from_text(text: str, path=None):
    """Return (R (P,6), Tr (P,3), Theta (P,D))."""
    header, rows = {}, []
    for lineno, s in _data_lines(text):
        key, _, val = s.partition(" ")
        if key in ("P", "D") and key not in header:
            try:
                header[key] = int(val)
            except ValueError:
                raise ParseError(f"bad value for {key}", line=lineno, path=path) from None
            continue
        if "P" not in header or "D" not in header:
            raise ParseError("missing P/D header", line=lineno, path=path)
        rows.append(_floats(s, 9 + header["D"], lineno, path))
    if "P" not in header or header["P"] < 1 or header.get("D", -1) < 0:
        raise ParseError("P must be >= 1 and D >= 0", path=path)
    if len(rows) != header["P"]:
        raise ParseError(f"expected {header.get('P')} rows, got {len(rows)}", path=path)
    a = np.array(rows).reshape(len(rows), -1)
    return a[:, :6], a[:, 6:9], a[:, 9:]


def save_track(path, R, Tr, Theta):
    Path(path).write_text(track_to_text(R, Tr, Theta))


def load_track(path):
    return track_from_text(Path(path).read_text(), path)


# contact points / visualization --------------------------------------------

def contact_points_csv(Q) -> str:
    Q = np.asarray(Q)
    lines = ["frame,joint,x,y,z,in_contact"]
    for t in range(Q.shape[0]):
        for j in range(Q.shape[1]):
            x, y, z, c = Q[t, j]
            lines.append(f"{t},{j},{x:.9g},{y:.9g},{z:.9g},{int(c)}")
    return "\n".join(lines) + "\n"


def obj_lineset(joints, parents, scene_points=None) -> str:
    """OBJ text with scene points as bare vertices and skeleton bones as ``l`` lines."""
    out = []
    offset = 0
    if scene_points is not None:
        out += [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in scene_points]
        offset = len(scene_points)
    out += [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in joints]
    out += [f"l {offset + p + 1} {offset + j + 1}" for j, p in enumerate(parents) if p >= 0]
    return "\n".join(out) + "\n"


def default_parents(J, root_index=0):
    from .synth import PARENTS
    if J == len(PARENTS) and root_index == 0:
        return PARENTS
    return tuple(-1 if j == root_index else root_index for j in range(J))
