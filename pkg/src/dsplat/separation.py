"""Dynamic/static classification from position-offset variance corroborated
by the 2D motion flow (optical flow with the camera-induced part removed)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError, ShapeError
from .gaussian import NEAR_PLANE


@dataclass
class FlowMap:
    flow: np.ndarray   # (H, W, 2) pixels, frame t -> t+1
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.flow.shape[:2] != self.valid.shape or self.flow.shape[2:] != (2,):
            raise ShapeError("flow must be (H, W, 2) with an (H, W) validity mask")

    @property
    def height(self):
        return self.flow.shape[0]

    @property
    def width(self):
        return self.flow.shape[1]

    def magnitude(self):
        """Per-pixel flow norm; invalid pixels read as 0."""
        return np.where(self.valid, np.linalg.norm(self.flow, axis=2), 0.0)


FLOW_MAGIC = b"DSFLOW1\n"


def write_flow(path, fm):
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(np.array([fm.width, fm.height], dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(fm.flow, dtype="<f4").tobytes())
        fh.write(fm.valid.astype(np.uint8).tobytes())


def read_flow(path):
    data = Path(path).read_bytes()
    if not data.startswith(FLOW_MAGIC):
        raise FormatError(f"{path}: missing DSFLOW1 header")
    off = len(FLOW_MAGIC)
    w, h = (int(v) for v in np.frombuffer(data, dtype="<u4", count=2, offset=off))
    off += 8
    flow = np.frombuffer(data, dtype="<f4", count=w * h * 2, offset=off).reshape(h, w, 2)
    off += w * h * 8
    if len(data) != off + w * h:
        raise FormatError(f"{path}: truncated flow file")
    valid = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=off).reshape(h, w) != 0
    return FlowMap(flow.astype(np.float64), valid)


# ---------------------------------------------------------------------------
# variance test
# ---------------------------------------------------------------------------

def offset_variance(trajectory):
    """Mean squared distance of the per-frame offsets from their mean."""
    traj = np.asarray(trajectory, dtype=np.float64)
    traj = traj.reshape(traj.shape[0], -1)
    return float(np.mean(np.sum((traj - traj.mean(axis=0)) ** 2, axis=1)))


def offset_variances(trajectories):
    """Vectorized ``offset_variance`` for (N, T, 3) trajectories."""
    tr = np.asarray(trajectories, dtype=np.float64)
    return np.mean(np.sum((tr - tr.mean(axis=1, keepdims=True)) ** 2, axis=2), axis=1)


def variance_candidates(variances, tau):
    return {int(i) for i in np.flatnonzero(np.asarray(variances) > tau)}


# ---------------------------------------------------------------------------
# flows
# ---------------------------------------------------------------------------

def camera_flow(depth, cam_t, cam_t1):
    """Flow each pixel would have if its surface point were static."""
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    ys, xs = np.mgrid[0:h, 0:w]
    pix = np.stack([xs, ys], axis=-1).reshape(-1, 2).astype(np.float64)
    d = depth.reshape(-1)
    ok = np.isfinite(d) & (d > 0)
    flow = np.zeros((h * w, 2))
    valid = np.zeros(h * w, dtype=bool)
    if ok.any():
        world = cam_t.unproject(pix[ok], d[ok])
        uv, z = cam_t1.project_points(world)
        good = z > NEAR_PLANE
        idx = np.flatnonzero(ok)[good]
        flow[idx] = uv[good] - pix[idx]
        valid[idx] = True
    return FlowMap(flow.reshape(h, w, 2), valid.reshape(h, w))


def motion_flow(optical, camera_induced):
    if optical.flow.shape != camera_induced.flow.shape:
        raise ShapeError("flow maps have different dimensions")
    valid = optical.valid & camera_induced.valid
    return FlowMap(np.where(valid[..., None], optical.flow - camera_induced.flow, 0.0), valid)


def sample_magnitudes(fm, points):
    """Nearest-pixel flow magnitude at (N, 2) pixel positions; NaN when off-frame."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    out = np.full(len(points), np.nan)
    ok = np.all(np.isfinite(points), axis=1)
    col = np.zeros(len(points), dtype=np.int64)
    row = np.zeros(len(points), dtype=np.int64)
    col[ok] = np.floor(points[ok, 0] + 0.5).astype(np.int64)
    row[ok] = np.floor(points[ok, 1] + 0.5).astype(np.int64)
    ok &= (col >= 0) & (col < fm.width) & (row >= 0) & (row < fm.height)
    good = np.flatnonzero(ok)
    valid = fm.valid[row[good], col[good]]
    mags = np.linalg.norm(fm.flow[row[good], col[good]], axis=1)
    out[good[valid]] = mags[valid]
    return out


def consistency_ratio(track, motion_flows, epsilon, total_frames=None):
    """Fraction of frames whose motion flow at the projected center exceeds ``epsilon``.

    ``track`` is (T, 2) pixel positions (NaN for off-frame); ``motion_flows[t]``
    is the t -> t+1 map or None where none exists.  Off-frame frames and
    missing flows never count but stay in the denominator.
    """
    track = np.asarray(track, dtype=np.float64).reshape(-1, 2)
    total = len(track) if total_frames is None else total_frames
    count = 0
    for t, fm in enumerate(motion_flows):
        if fm is None or t >= len(track):
            continue
        m = sample_magnitudes(fm, track[t:t + 1])[0]
        if np.isfinite(m) and m > epsilon:
            count += 1
    return count / total if total else 0.0


@dataclass
class Partition:
    ids: np.ndarray
    dynamic: np.ndarray
    variance: np.ndarray
    ratio: np.ndarray

    @property
    def dynamic_ids(self):
        return self.ids[self.dynamic]

    @property
    def static_ids(self):
        return self.ids[~self.dynamic]

    def label_of(self, gid):
        return "dynamic" if self.dynamic[list(self.ids).index(gid)] else "static"

    def report(self):
        lines = ["# id label variance ratio"]
        for i, d, v, r in zip(self.ids, self.dynamic, self.variance, self.ratio):
            lines.append(f"{int(i)} {'dynamic' if d else 'static'} {float(v)!r} {float(r)!r}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.report())

    @classmethod
    def read(cls, path):
        ids, dyn, var, rat = [], [], [], []
        for line in Path(path).read_text().splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            a, b, c, d = line.split()
            ids.append(int(a))
            dyn.append(b == "dynamic")
            var.append(float(c))
            rat.append(float(d))
        return cls(np.array(ids, dtype=np.int64), np.array(dyn, dtype=bool),
                   np.array(var), np.array(rat))


def consistency_ratios(projections, motion_flows, epsilon):
    """Vectorized ratios.

    ``projections`` is (V, T, N, 2) (NaN = off-frame); ``motion_flows[v][t]``
    is a FlowMap or None.  Counts are summed over views; the denominator is V*T.
    """
    proj = np.asarray(projections, dtype=np.float64)
    V, T, N, _ = proj.shape
    counts = np.zeros(N)
    for v in range(V):
        for t in range(T):
            fm = motion_flows[v][t] if t < len(motion_flows[v]) else None
            if fm is None:
                continue
            m = sample_magnitudes(fm, proj[v, t])
            counts += np.isfinite(m) & (np.nan_to_num(m, nan=0.0) > epsilon)
    return counts / (V * T)


def classify(ids, trajectories, projections, motion_flows, tau, epsilon, gamma):
    """Label each Gaussian dynamic iff variance > tau and consistency ratio > gamma.

    trajectories: (N, T, 3) position offsets; projections: (V, T, N, 2) or
    (T, N, 2) for a single view; motion_flows: per view list of T entries.
    """
    ids = np.asarray(ids, dtype=np.int64)
    traj = np.asarray(trajectories, dtype=np.float64)
    proj = np.asarray(projections, dtype=np.float64)
    if proj.ndim == 3:
        proj = proj[None]
        motion_flows = [motion_flows]
    if traj.shape[0] != len(ids) or proj.shape[2] != len(ids):
        raise ShapeError("trajectories/projections do not cover every Gaussian")
    T = traj.shape[1]
    if proj.shape[1] != T or any(len(f) > T for f in motion_flows):
        raise InvalidInputError(
            f"frame-count mismatch: trajectories have {T} frames, projections {proj.shape[1]}")
    var = offset_variances(traj)
    ratio = consistency_ratios(proj, motion_flows, epsilon)
    dynamic = (var > tau) & (ratio > gamma)
    return Partition(ids, dynamic, var, ratio)
