"""View-dependent opacity from splat orientation and camera distance, and
importance-based pruning of Gaussians that never matter in any training view.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import InvalidInputError, NearSingularError

EIGEN_GAP = 1e-9
MIN_DISTANCE = 1e-6


def gaussian_normal(cov3d, view_dir):
    """Shortest-axis direction of ``cov3d`` oriented against the viewing ray.

    ``view_dir`` points from the camera towards the Gaussian.  Isotropic
    covariances (smallest eigenvalue gap < 1e-9) face the camera.
    """
    view_dir = np.asarray(view_dir, dtype=np.float64)
    view_dir = view_dir / np.linalg.norm(view_dir)
    lam, vec = np.linalg.eigh(np.asarray(cov3d, dtype=np.float64))
    if lam[1] - lam[0] < EIGEN_GAP:
        return -view_dir
    n = vec[:, 0]
    return -n if n @ -view_dir < 0 else n


def physical_opacity(base, normal, to_camera, distance, d_ref):
    """``clamp(base * max(cos, 0) * (d_ref / distance)^2, 0, 1)``.

    ``to_camera`` is the unit direction from the Gaussian to the camera.
    """
    if distance <= MIN_DISTANCE:
        raise NearSingularError(f"camera distance {distance} too small")
    if d_ref <= 0:
        raise InvalidInputError("reference distance must be positive")
    cos = float(np.dot(normal, to_camera))
    return float(np.clip(base * max(cos, 0.0) * (d_ref / distance) ** 2, 0.0, 1.0))


def modulate_opacity(base, covs, means, cam_pos, d_ref, normals=None):
    """Batched physical opacity for N Gaussians; returns ``(opacity, ctx)``.

    With ``normals`` given (N, 3) those fixed orientations are used instead
    of the covariance's shortest axis, so back-facing splats are possible.
    """
    r = means - cam_pos
    dist = np.linalg.norm(r, axis=1)
    if np.any(dist <= MIN_DISTANCE):
        raise NearSingularError("a Gaussian sits on the camera center")
    v = -r / dist[:, None]
    if normals is None:
        lam, vec = np.linalg.eigh(covs)
        u0 = vec[:, :, 0]
        dot = np.sum(u0 * v, axis=1)
        degenerate = (lam[:, 1] - lam[:, 0]) < EIGEN_GAP
        sgn = np.where(dot < 0, -1.0, 1.0)
        cos = np.where(degenerate, 1.0, np.abs(dot))
    else:
        lam = vec = None
        u0 = np.asarray(normals, dtype=np.float64)
        dot = np.sum(u0 * v, axis=1)
        degenerate = np.zeros(len(dot), dtype=bool)
        sgn = np.ones(len(dot))
        cos = np.maximum(dot, 0.0)
    mod = (d_ref / dist) ** 2
    raw = base * cos * mod
    ctx = dict(base=base, r=r, dist=dist, v=v, lam=lam, vec=vec, u0=u0, sgn=sgn, cos=cos,
               dot=dot, degenerate=degenerate, mod=mod, raw=raw, d_ref=d_ref,
               fixed_normals=normals is not None)
    return np.clip(raw, 0.0, 1.0), ctx


def modulate_opacity_backward(ctx, dopac):
    """Gradients ``(d_base, d_means, d_covs)`` of ``modulate_opacity``."""
    live = (ctx["raw"] > 0.0) & (ctx["raw"] < 1.0)
    g = np.where(live, dopac, 0.0)
    base, cos, mod, dist = ctx["base"], ctx["cos"], ctx["mod"], ctx["dist"]
    dbase = g * cos * mod
    dcos = g * base * mod
    dmod = g * base * cos
    r = ctx["r"]
    dmeans = (dmod * (-2.0 * ctx["d_ref"] ** 2 / dist ** 4))[:, None] * r
    n = len(base)
    dcovs = np.zeros((n, 3, 3))
    u0 = ctx["u0"]
    rhat = r / dist[:, None]
    if ctx["fixed_normals"]:
        active = ctx["dot"] > 0
    else:
        active = ~ctx["degenerate"]
    # cos = sgn * (u0 . v), v = -rhat
    coef = np.where(active, dcos * ctx["sgn"], 0.0)
    dv = coef[:, None] * u0
    dmeans += -(dv - rhat * np.sum(rhat * dv, axis=1, keepdims=True)) / dist[:, None]
    if not ctx["fixed_normals"]:
        lam, vec, v = ctx["lam"], ctx["vec"], ctx["v"]
        for j in (1, 2):
            uj = vec[:, :, j]
            with np.errstate(divide="ignore", invalid="ignore"):
                w = np.where(active, coef * np.sum(uj * v, axis=1) / (lam[:, 0] - lam[:, j]), 0.0)
            outer = uj[:, :, None] * u0[:, None, :]
            dcovs += w[:, None, None] * 0.5 * (outer + np.swapaxes(outer, 1, 2))
    return dbase, dmeans, dcovs


def reference_distance(camera_positions, centroid):
    """Median camera-to-centroid distance."""
    d = np.linalg.norm(np.asarray(camera_positions) - np.asarray(centroid), axis=1)
    return float(np.median(d))


class ImportanceTable:
    """Running per-Gaussian maximum of ``alpha * T_before``."""

    def __init__(self, ids):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.w = np.zeros(len(self.ids))
        self._row = {int(i): r for r, i in enumerate(self.ids)}

    def reset(self):
        self.w[:] = 0.0

    def get(self, gid):
        return float(self.w[self._row[int(gid)]])

    def rows(self, ids):
        return np.array([self._row[int(i)] for i in ids], dtype=np.int64)


def accumulate_importance(table, result, splat_ids):
    """Fold one render pass into ``table`` (``splat_ids`` in render input order)."""
    best = result.max_contribution()
    rows = table.rows(splat_ids)
    np.maximum.at(table.w, rows, best)
    return table


def prune(scene, table, tau_prune):
    """Drop every Gaussian with importance strictly below ``tau_prune``."""
    w = table.w[table.rows(scene.ids)]
    drop = w < tau_prune
    if np.all(drop) and len(scene):
        raise InvalidInputError(
            f"pruning at tau={tau_prune} would remove all {len(scene)} Gaussians "
            f"(max importance {w.max():.4g})")
    removed = [int(i) for i in scene.ids[drop]]
    return scene.subset(~drop), removed


def write_prune_report(path, removed, table):
    lines = ["# id importance"]
    lines += [f"{gid} {float(table.get(gid))!r}" for gid in removed]
    Path(path).write_text("\n".join(lines) + "\n")
