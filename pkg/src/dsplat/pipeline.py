"""Assembly of time-t splats from a canonical scene and its offsets, and the
matching backward pass down to canonical parameters and offsets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .deformation import apply_offsets_backward, apply_offsets_batch
from .gaussian import (covariances, covariances_backward, eval_colors, eval_colors_backward,
                       project_backward)
from .opacity import modulate_opacity, modulate_opacity_backward
from .render import SplatBatch, render, render_backward


@dataclass
class FrameContext:
    scene: object
    camera: object
    means: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    covs: np.ndarray
    offset_ctx: tuple
    opacity_ctx: dict | None
    color_ctx: tuple | None


def assemble(scene, offsets, camera, d_ref, physical=True, normals=None):
    """Time-t ``SplatBatch`` for ``scene`` displaced by ``offsets`` (N, 10)."""
    if offsets is None:
        offsets = np.zeros((len(scene), 10))
    mu, q, s, octx = apply_offsets_batch(scene.means, scene.quats, scene.scales, offsets)
    covs = covariances(q, s)
    cam_pos = camera.position
    if physical:
        opac, pctx = modulate_opacity(scene.opacities, covs, mu, cam_pos, d_ref, normals)
    else:
        opac, pctx = np.clip(scene.opacities, 0.0, 1.0), None
    colors, cctx = eval_colors(scene.colors, scene.sh1, mu, cam_pos)
    splats = SplatBatch(scene.ids, mu, covs, opac, colors)
    return splats, FrameContext(scene, camera, mu, q, s, covs, octx, pctx, cctx)


def render_scene(scene, offsets, camera, d_ref, background=(0, 0, 0), physical=True,
                 threads=1, retain=False, normals=None):
    splats, ctx = assemble(scene, offsets, camera, d_ref, physical, normals)
    return render(splats, camera, background, threads=threads, retain=retain), ctx


@dataclass
class SceneGrads:
    means: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    sh1: np.ndarray | None
    offsets: np.ndarray


def backward(result, ctx, d_image, threads=1):
    """Gradients of ``sum(d_image * image)`` w.r.t. canonical parameters and offsets."""
    g = render_backward(result, d_image, threads=threads)
    dmu, dcov = project_backward(result.proj, ctx.covs, ctx.camera, g.mu2d, g.cov2d_matrix())
    scene = ctx.scene
    if ctx.opacity_ctx is not None:
        dbase, dm2, dc2 = modulate_opacity_backward(ctx.opacity_ctx, g.opacity)
        dmu = dmu + dm2
        dcov = dcov + dc2
    else:
        dbase = g.opacity * ((scene.opacities >= 0.0) & (scene.opacities <= 1.0))
    dcol, dsh1, dm3 = eval_colors_backward(scene.sh1, ctx.color_ctx, g.color, scene.colors)
    if dm3 is not None:
        dmu = dmu + dm3
    dq, ds = covariances_backward(ctx.quats, ctx.scales, dcov)
    dmc, dqc, dsc, doff = apply_offsets_backward(ctx.offset_ctx, dmu, dq, ds)
    return SceneGrads(dmc, dqc, dsc, dbase, dcol, dsh1, doff)
