"""Gaussian primitive, covariance construction, density, and pinhole projection.

Quaternions are stored ``(w, x, y, z)``.  Cameras map world points into a
camera frame with ``x`` right, ``y`` down and ``z`` forward, so pixel
coordinates are ``(fx * x / z + cx, fy * y / z + cy)``.  Pixel ``(i, j)``
(row ``i``, column ``j``) is evaluated at the continuous coordinate ``(j, i)``.

Gradients with respect to a symmetric matrix are always passed around as a
full matrix ``G`` with ``dL = sum(G * dSigma)`` for symmetric ``dSigma``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateCovarianceError, FormatError, InvalidInputError

LOWPASS = 0.3
NEAR_PLANE = 1e-4
SCALE_FLOOR = 1e-6
FEATURE_DIM = 16
SH1_DIM = 9
SH_C1 = 0.4886025119029199


# ---------------------------------------------------------------------------
# quaternions and covariances
# ---------------------------------------------------------------------------

def quat_to_rotmat(q):
    """Rotation matrices for unit quaternions ``q`` of shape (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_backward(q, dR):
    """Gradient of ``quat_to_rotmat`` w.r.t. the (unnormalized) entries of q."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    G = dR
    dq = np.empty(q.shape)
    dq[..., 0] = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0]
                      - x * G[..., 1, 2] - y * G[..., 2, 0] + x * G[..., 2, 1])
    dq[..., 1] = 2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0]
                      - 2 * x * G[..., 1, 1] - w * G[..., 1, 2] + z * G[..., 2, 0]
                      + w * G[..., 2, 1] - 2 * x * G[..., 2, 2])
    dq[..., 2] = 2 * (-2 * y * G[..., 0, 0] + x * G[..., 0, 1] + w * G[..., 0, 2]
                      + x * G[..., 1, 0] + z * G[..., 1, 2] - w * G[..., 2, 0]
                      + z * G[..., 2, 1] - 2 * y * G[..., 2, 2])
    dq[..., 3] = 2 * (-2 * z * G[..., 0, 0] - w * G[..., 0, 1] + x * G[..., 0, 2]
                      + w * G[..., 1, 0] - 2 * z * G[..., 1, 1] + y * G[..., 1, 2]
                      + x * G[..., 2, 0] + y * G[..., 2, 1])
    return dq


def normalize_backward(q, dqhat):
    """Backprop through ``q / |q|`` (last axis)."""
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qhat = q / norm
    return (dqhat - qhat * np.sum(qhat * dqhat, axis=-1, keepdims=True)) / norm


def covariances(quats, scales):
    """Batched ``R S S^T R^T`` for unit quaternions (N, 4) and scales (N, 3)."""
    R = quat_to_rotmat(quats)
    M = R * np.asarray(scales, dtype=np.float64)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def covariances_backward(quats, scales, dcov):
    """Gradients of ``covariances`` w.r.t. the unit quaternion entries and scales."""
    dcov = 0.5 * (dcov + np.swapaxes(dcov, -1, -2))
    R = quat_to_rotmat(quats)
    s2 = np.asarray(scales) ** 2
    dR = 2.0 * dcov @ (R * s2[..., None, :])
    inner = np.swapaxes(R, -1, -2) @ dcov @ R
    dscales = 2.0 * np.asarray(scales) * np.diagonal(inner, axis1=-2, axis2=-1)
    return quat_to_rotmat_backward(quats, dR), dscales


def covariance_from_rs(rot, scale):
    """Covariance ``R S S^T R^T`` of a single Gaussian.

    Raises InvalidInputError if ``rot`` is not unit-norm within 1e-6 or any
    scale is non-positive.
    """
    rot = np.asarray(rot, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    if rot.shape != (4,) or scale.shape != (3,):
        raise InvalidInputError("expected a 4-vector quaternion and a 3-vector scale")
    if abs(np.linalg.norm(rot) - 1.0) > 1e-6:
        raise InvalidInputError(f"quaternion is not unit norm (|q| = {np.linalg.norm(rot):.9g})")
    if np.any(scale <= 0):
        raise InvalidInputError("scales must be positive")
    cov = covariances(rot[None], scale[None])[0]
    return 0.5 * (cov + cov.T)


def eval_density(mu, cov, x):
    """Unnormalized Gaussian density ``exp(-0.5 (x-mu)^T cov^-1 (x-mu))``."""
    mu = np.asarray(mu, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if np.linalg.cond(cov) > 1e12:
        cov = cov + 1e-8 * np.eye(cov.shape[0])
        if not np.isfinite(np.linalg.cond(cov)) or np.linalg.cond(cov) > 1e15:
            raise DegenerateCovarianceError("covariance is singular after regularization")
    d = x - mu
    m = float(d @ np.linalg.solve(cov, d))
    return float(np.exp(-0.5 * max(m, 0.0)))


# ---------------------------------------------------------------------------
# camera and projection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Camera:
    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise InvalidInputError("camera rotation is not orthonormal")
        if int(self.width) < 1 or int(self.height) < 1:
            raise InvalidInputError("camera width/height must be >= 1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def look_at(cls, eye, target, fx, fy, cx, cy, width, height, up=(0.0, 1.0, 0.0)):
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        # Gram-Schmidt output is orthonormal to ~1e-16; re-orthonormalize anyway
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        return cls(R, -R @ eye, fx, fy, cx, cy, width, height)

    @property
    def position(self):
        return -self.rotation.T @ self.translation

    def to_camera(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project_points(self, points):
        """Pixel coordinates (N, 2) and camera-space depth (N,) of world points."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[..., 0] / z + self.cx
            v = self.fy * pc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def unproject(self, pixels, depth):
        """World points for pixel coordinates (N, 2) at camera-space depth (N,)."""
        pixels = np.asarray(pixels, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        xc = (pixels[..., 0] - self.cx) / self.fx * depth
        yc = (pixels[..., 1] - self.cy) / self.fy * depth
        pc = np.stack([xc, yc, depth], axis=-1)
        return (pc - self.translation) @ self.rotation

    def as_row(self):
        return np.concatenate([self.rotation.ravel(), self.translation,
                               [self.fx, self.fy, self.cx, self.cy, self.width, self.height]])

    @classmethod
    def from_row(cls, row):
        row = np.asarray(row, dtype=np.float64)
        return cls(row[:9].reshape(3, 3), row[9:12], *row[12:16], int(row[16]), int(row[17]))


@dataclass
class Projection:
    mu2d: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    jac: np.ndarray
    pcam: np.ndarray


def pinhole_jacobian(pcam, fx, fy):
    x, y, z = pcam[..., 0], pcam[..., 1], pcam[..., 2]
    J = np.zeros(pcam.shape[:-1] + (2, 3))
    J[..., 0, 0] = fx / z
    J[..., 0, 2] = -fx * x / (z * z)
    J[..., 1, 1] = fy / z
    J[..., 1, 2] = -fy * y / (z * z)
    return J


def project_gaussians(means, covs, camera):
    """Project N Gaussians; culled entries (z <= near plane) have ``valid`` False."""
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    covs = np.asarray(covs, dtype=np.float64).reshape(-1, 3, 3)
    pcam = camera.to_camera(means)
    depth = pcam[:, 2].copy()
    valid = depth > NEAR_PLANE
    safe = pcam.copy()
    safe[~valid, 2] = 1.0
    mu2d = np.stack([camera.fx * safe[:, 0] / safe[:, 2] + camera.cx,
                     camera.fy * safe[:, 1] / safe[:, 2] + camera.cy], axis=1)
    J = pinhole_jacobian(safe, camera.fx, camera.fy)
    W = camera.rotation
    T = J @ W
    cov2d = T @ covs @ np.swapaxes(T, -1, -2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, -1, -2))
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS
    return Projection(mu2d, cov2d, depth, valid, J, safe)


def project(mean, cov, camera):
    """Project one Gaussian.  Returns ``(mu2d, cov2d, depth)`` or None when culled."""
    p = project_gaussians(np.asarray(mean)[None], np.asarray(cov)[None], camera)
    if not p.valid[0]:
        return None
    return p.mu2d[0], p.cov2d[0], float(p.depth[0])


def project_backward(proj, covs, camera, dmu2d, dcov2d):
    """Chain 2D mean/covariance gradients back to world means and 3D covariances.

    ``dcov2d`` is the full-matrix gradient (N, 2, 2).  Culled Gaussians get zeros.
    """
    covs = np.asarray(covs, dtype=np.float64).reshape(-1, 3, 3)
    W = camera.rotation
    J = proj.jac
    x, y, z = proj.pcam[:, 0], proj.pcam[:, 1], proj.pcam[:, 2]
    fx, fy = camera.fx, camera.fy
    G = 0.5 * (dcov2d + np.swapaxes(dcov2d, -1, -2))

    M = W @ covs @ W.T
    dcov3d = np.swapaxes(J @ W, -1, -2) @ G @ (J @ W)
    dJ = 2.0 * G @ J @ M

    dp = np.zeros_like(proj.pcam)
    # mean projection
    dp[:, 0] += dmu2d[:, 0] * fx / z
    dp[:, 1] += dmu2d[:, 1] * fy / z
    dp[:, 2] += -dmu2d[:, 0] * fx * x / z**2 - dmu2d[:, 1] * fy * y / z**2
    # jacobian entries
    dp[:, 2] += dJ[:, 0, 0] * (-fx / z**2) + dJ[:, 1, 1] * (-fy / z**2)
    dp[:, 0] += dJ[:, 0, 2] * (-fx / z**2)
    dp[:, 2] += dJ[:, 0, 2] * (2 * fx * x / z**3)
    dp[:, 1] += dJ[:, 1, 2] * (-fy / z**2)
    dp[:, 2] += dJ[:, 1, 2] * (2 * fy * y / z**3)

    dmeans = dp @ W
    dmeans[~proj.valid] = 0.0
    dcov3d[~proj.valid] = 0.0
    return dmeans, dcov3d


# ---------------------------------------------------------------------------
# scene container and DSPLAT1 text format
# ---------------------------------------------------------------------------

@dataclass
class Gaussian:
    id: int
    mu_c: np.ndarray
    rot_c: np.ndarray
    scale_c: np.ndarray
    base_opacity: float = 1.0
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    sh1: np.ndarray | None = None
    feature: np.ndarray | None = None


@dataclass
class Scene:
    """Structure-of-arrays canonical scene."""

    ids: np.ndarray
    means: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    sh1: np.ndarray | None = None
    features: np.ndarray | None = None
    has_feature: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.ids)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.means = np.asarray(self.means, dtype=np.float64).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        if self.sh1 is not None:
            self.sh1 = np.asarray(self.sh1, dtype=np.float64).reshape(n, SH1_DIM)
        if self.features is None:
            self.features = np.zeros((n, FEATURE_DIM))
            self.has_feature = np.zeros(n, dtype=bool)
        else:
            self.features = np.asarray(self.features, dtype=np.float64).reshape(n, FEATURE_DIM)
            if self.has_feature is None:
                self.has_feature = np.ones(n, dtype=bool)
            self.has_feature = np.asarray(self.has_feature, dtype=bool).reshape(n)
        if len(np.unique(self.ids)) != n:
            raise InvalidInputError("Gaussian ids must be unique")

    def __len__(self):
        return len(self.ids)

    @property
    def sh_degree(self):
        return 0 if self.sh1 is None else 1

    @classmethod
    def from_gaussians(cls, gaussians, sh_degree=0):
        gs = list(gaussians)
        sh1 = None
        if sh_degree >= 1:
            sh1 = [g.sh1 if g.sh1 is not None else np.zeros(SH1_DIM) for g in gs]
        feats = [g.feature if g.feature is not None else np.zeros(FEATURE_DIM) for g in gs]
        return cls(
            ids=[g.id for g in gs],
            means=[g.mu_c for g in gs],
            quats=[g.rot_c for g in gs],
            scales=[g.scale_c for g in gs],
            opacities=[g.base_opacity for g in gs],
            colors=[g.color for g in gs],
            sh1=sh1,
            features=np.asarray(feats, dtype=np.float64).reshape(len(gs), FEATURE_DIM),
            has_feature=[g.feature is not None for g in gs],
        )

    def gaussian(self, i):
        return Gaussian(
            id=int(self.ids[i]),
            mu_c=self.means[i].copy(),
            rot_c=self.quats[i].copy(),
            scale_c=self.scales[i].copy(),
            base_opacity=float(self.opacities[i]),
            color=self.colors[i].copy(),
            sh1=None if self.sh1 is None else self.sh1[i].copy(),
            feature=self.features[i].copy() if self.has_feature[i] else None,
        )

    def subset(self, mask_or_index):
        idx = np.asarray(mask_or_index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return Scene(
            ids=self.ids[idx], means=self.means[idx], quats=self.quats[idx],
            scales=self.scales[idx], opacities=self.opacities[idx], colors=self.colors[idx],
            sh1=None if self.sh1 is None else self.sh1[idx],
            features=self.features[idx], has_feature=self.has_feature[idx],
        )

    def concat(self, other):
        if self.sh_degree != other.sh_degree:
            raise InvalidInputError("cannot concatenate scenes with different SH degrees")
        return Scene(
            ids=np.concatenate([self.ids, other.ids]),
            means=np.concatenate([self.means, other.means]),
            quats=np.concatenate([self.quats, other.quats]),
            scales=np.concatenate([self.scales, other.scales]),
            opacities=np.concatenate([self.opacities, other.opacities]),
            colors=np.concatenate([self.colors, other.colors]),
            sh1=None if self.sh1 is None else np.concatenate([self.sh1, other.sh1]),
            features=np.concatenate([self.features, other.features]),
            has_feature=np.concatenate([self.has_feature, other.has_feature]),
        )

    def copy(self):
        return self.subset(np.arange(len(self)))

    def enforce_invariants(self):
        """Project parameters back onto their valid sets after an optimizer update."""
        self.quats /= np.linalg.norm(self.quats, axis=1, keepdims=True)
        np.maximum(self.scales, SCALE_FLOOR, out=self.scales)
        np.clip(self.opacities, 0.0, 1.0, out=self.opacities)
        np.clip(self.colors, 0.0, 1.0, out=self.colors)


HEADER = "DSPLAT1"


def _fmt(values):
    return " ".join(repr(float(v)) for v in values)


def save_scene(scene, path):
    lines = [HEADER, f"sh_degree {scene.sh_degree}", f"count {len(scene)}"]
    for i in range(len(scene)):
        parts = [str(int(scene.ids[i])), _fmt(scene.means[i]), _fmt(scene.quats[i]),
                 _fmt(scene.scales[i]), _fmt([scene.opacities[i]]), _fmt(scene.colors[i])]
        if scene.sh1 is not None:
            parts.append(_fmt(scene.sh1[i]))
        if scene.has_feature[i]:
            parts.append("f " + _fmt(scene.features[i]))
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n")


def load_scene(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != HEADER:
        raise FormatError(f"{path}: missing {HEADER} header")
    try:
        sh_degree = int(lines[1].split()[1])
        count = int(lines[2].split()[1])
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: bad header") from exc
    base = 1 + 14 + (SH1_DIM if sh_degree else 0)
    gs = []
    for line in lines[3:3 + count]:
        tok = line.split()
        if len(tok) not in (base, base + 1 + FEATURE_DIM):
            raise FormatError(f"{path}: bad record {line[:40]!r}")
        v = [float(x) for x in tok[1:base]]
        feature = None
        if len(tok) > base:
            if tok[base] != "f":
                raise FormatError(f"{path}: bad feature marker")
            feature = np.array([float(x) for x in tok[base + 1:]])
        gs.append(Gaussian(
            id=int(tok[0]), mu_c=np.array(v[0:3]), rot_c=np.array(v[3:7]),
            scale_c=np.array(v[7:10]), base_opacity=v[10], color=np.array(v[11:14]),
            sh1=np.array(v[14:14 + SH1_DIM]) if sh_degree else None, feature=feature,
        ))
    if len(gs) != count:
        raise FormatError(f"{path}: expected {count} records, found {len(gs)}")
    return Scene.from_gaussians(gs, sh_degree=sh_degree)


def eval_colors(scene_colors, sh1, means, cam_pos):
    """View-dependent colors (degree <= 1) and the pieces needed for backprop."""
    if sh1 is None:
        return np.clip(scene_colors, 0.0, 1.0), None
    d = means - cam_pos
    dn = d / np.linalg.norm(d, axis=1, keepdims=True)
    basis = SH_C1 * np.stack([-dn[:, 1], dn[:, 2], -dn[:, 0]], axis=1)
    raw = scene_colors + np.einsum("nk,nkc->nc", basis, sh1.reshape(-1, 3, 3))
    return np.clip(raw, 0.0, 1.0), (raw, basis, d)


def eval_colors_backward(sh1, ctx, dcolors, scene_colors=None):
    """Gradients (dbase_color, dsh1, dmeans) of ``eval_colors``."""
    if ctx is None:
        if scene_colors is not None:
            inside = (scene_colors >= 0.0) & (scene_colors <= 1.0)
            dcolors = dcolors * inside
        return dcolors, None, None
    raw, basis, d = ctx
    g = dcolors * ((raw >= 0.0) & (raw <= 1.0))
    dsh1 = (basis[:, :, None] * g[:, None, :]).reshape(-1, SH1_DIM)
    dbasis = np.einsum("nkc,nc->nk", sh1.reshape(-1, 3, 3), g)
    ddn = SH_C1 * np.stack([-dbasis[:, 2], -dbasis[:, 0], dbasis[:, 1]], axis=1)
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    dn = d / norm
    dmeans = (ddn - dn * np.sum(dn * ddn, axis=1, keepdims=True)) / norm
    return g, dsh1, dmeans
