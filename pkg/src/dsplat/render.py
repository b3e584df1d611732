"""Depth-sorted alpha compositing of projected Gaussians, its backward pass, and
image metrics.

Images are float64 arrays of shape (H, W, 3); depth maps are (H, W) with
``inf`` where nothing is drawn.  The raster is processed in horizontal bands
of a fixed height; each band only sees the splats whose cut-off ellipse can
reach it, which is exact because those splats would be skipped anyway.
Per-splat gradients are reduced band by band in a fixed order, so results do
not depend on the worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError, ShapeError, StateError
from .gaussian import project_gaussians

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
DEPTH_ALPHA_MIN = 1e-4
BAND_ROWS = 8


@dataclass
class SplatBatch:
    """Time-t splat parameters ready for rasterization."""

    ids: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    def __len__(self):
        return len(self.ids)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros((0, 3, 3)),
                   np.zeros(0), np.zeros((0, 3)))


@dataclass
class SplatGrads:
    mu2d: np.ndarray
    cov2d: np.ndarray  # d/d(a, b, c) with cov2d = [[a, b], [b, c]]
    opacity: np.ndarray
    color: np.ndarray

    def cov2d_matrix(self):
        """Full-matrix form of the covariance gradient (N, 2, 2)."""
        g = np.empty((len(self.cov2d), 2, 2))
        g[:, 0, 0] = self.cov2d[:, 0]
        g[:, 0, 1] = g[:, 1, 0] = 0.5 * self.cov2d[:, 1]
        g[:, 1, 1] = self.cov2d[:, 2]
        return g


class RenderResult:
    def __init__(self, image, depth, transmittance, accum, proj, order, bands, width, height,
                 background, mu2d, cov2d, opacities, colors, raw_color):
        self.image = image
        self.depth = depth
        self.transmittance = transmittance
        self.accum = accum
        self.proj = proj
        self.order = order
        self._bands = bands
        self.width = width
        self.height = height
        self.background = background
        self.mu2d = mu2d
        self.cov2d = cov2d
        self.opacities = opacities
        self.colors = colors
        self._raw_color = raw_color

    @property
    def retained(self):
        return self._bands is not None

    def release(self):
        self._bands = None

    def max_contribution(self):
        """Per-splat max over pixels of ``alpha * T_before`` (input order)."""
        if self._bands is None:
            raise StateError("render result no longer retains per-pixel contributions")
        n = len(self.opacities)
        best = np.zeros(n)
        for band in self._bands:
            if band is None:
                continue
            cand, alpha, T = band[0], band[2], band[3]
            np.maximum.at(best, cand, np.max(alpha * T, axis=1))
        return best

    def contributions(self):
        """Yield ``(splat_index, pixel_index, alpha, T_before)`` for every non-skipped pair."""
        if self._bands is None:
            raise StateError("render result no longer retains per-pixel contributions")
        for band in self._bands:
            if band is None:
                continue
            cand, y0, alpha, T = band[0], band[1], band[2], band[3]
            rows, cols = np.nonzero(alpha > 0)
            for r, c in zip(rows, cols):
                yield int(cand[r]), y0 * self.width + int(c), float(alpha[r, c]), float(T[r, c])


def _conics(cov2d):
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    ok = np.isfinite(det) & (det > 0)
    d = np.where(ok, det, 1.0)
    conic = np.where(ok[:, None], np.stack([c / d, -b / d, a / d], axis=1), 0.0)
    return conic, np.where(ok, det, 0.0)


def _band_pixels(y0, y1, width):
    ys, xs = np.mgrid[y0:y1, 0:width]
    return xs.ravel().astype(np.float64), ys.ravel().astype(np.float64)


def _forward_band(y0, y1, width, order, mu2d, conic, radius, opac, colors, depth, bg):
    lo = np.clip(mu2d[order, 1], y0, y1 - 1)
    hit = (np.abs(mu2d[order, 1] - lo) <= radius[order]) & \
          (np.abs(mu2d[order, 0] - np.clip(mu2d[order, 0], 0, width - 1)) <= radius[order])
    cand = order[hit]
    px, py = _band_pixels(y0, y1, width)
    npx = len(px)
    if len(cand) == 0:
        color = np.broadcast_to(bg, (npx, 3)).copy()
        return None, color, np.zeros(npx), np.zeros(npx), np.ones(npx)
    dx = px[None, :] - mu2d[cand, 0:1]
    dy = py[None, :] - mu2d[cand, 1:2]
    A, B, C = conic[cand, 0:1], conic[cand, 1:2], conic[cand, 2:3]
    power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
    araw = opac[cand, None] * np.exp(np.minimum(power, 0.0))
    alpha = np.where(araw >= ALPHA_MIN, np.minimum(araw, ALPHA_MAX), 0.0)
    incl = np.cumprod(1.0 - alpha, axis=0)
    T = np.empty_like(alpha)
    T[0] = 1.0
    T[1:] = incl[:-1]
    w = alpha * T
    Tfin = incl[-1]
    color = w.T @ colors[cand] + Tfin[:, None] * bg[None, :]
    acc = w.sum(axis=0)
    dnum = w.T @ depth[cand]
    return (cand, y0, alpha, T, araw), color, acc, dnum, Tfin


def render(splats, camera, background=(0.0, 0.0, 0.0), threads=1, retain=True):
    """Composite ``splats`` front to back as seen from ``camera``."""
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    W, H = camera.width, camera.height
    n = len(splats)
    proj = project_gaussians(splats.means, splats.covs, camera)
    opac = np.asarray(splats.opacities, dtype=np.float64).reshape(n)
    colors = np.asarray(splats.colors, dtype=np.float64).reshape(n, 3)
    ids = np.asarray(splats.ids)
    conic, det = _conics(proj.cov2d) if n else (np.zeros((0, 3)), np.zeros(0))

    a, b, c = proj.cov2d[:, 0, 0], proj.cov2d[:, 0, 1], proj.cov2d[:, 1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    with np.errstate(divide="ignore"):
        cutoff = 2.0 * np.log(np.maximum(opac, 1e-300) * 255.0)
    live = proj.valid & (cutoff > 0) & (det > 0)
    radius = np.where(live, np.sqrt(np.maximum(cutoff, 0.0) * lam_max) + 1.0, -1.0)

    live_idx = np.flatnonzero(live)
    order = live_idx[np.lexsort((ids[live_idx], proj.depth[live_idx]))]

    band_starts = list(range(0, H, BAND_ROWS))

    def work(y0):
        return _forward_band(y0, min(y0 + BAND_ROWS, H), W, order, proj.mu2d, conic, radius,
                             opac, colors, proj.depth, bg)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            outs = list(pool.map(work, band_starts))
    else:
        outs = [work(y0) for y0 in band_starts]

    raw_color = np.concatenate([o[1] for o in outs]).reshape(H, W, 3)
    acc = np.concatenate([o[2] for o in outs]).reshape(H, W)
    dnum = np.concatenate([o[3] for o in outs]).reshape(H, W)
    Tfin = np.concatenate([o[4] for o in outs]).reshape(H, W)
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(acc > DEPTH_ALPHA_MIN, dnum / acc, np.inf)
    image = np.clip(raw_color, 0.0, 1.0)
    bands = [o[0] for o in outs] if retain else None
    return RenderResult(image, depth, Tfin, acc, proj, order, bands, W, H, bg,
                        proj.mu2d, proj.cov2d, opac, colors, raw_color)


def _backward_band(band, dimg_band, width, mu2d, conic, opac, colors, bg):
    cand, y0, alpha, T, araw = band
    y1 = y0 + alpha.shape[1] // width
    px, py = _band_pixels(y0, y1, width)
    cc = colors[cand]
    cdot = cc @ dimg_band.T                      # (n, P): c_i . dC
    s = alpha * T * cdot
    suffix = np.cumsum(s[::-1], axis=0)[::-1]
    after = np.zeros_like(s)
    after[:-1] = suffix[1:]
    Tfin = T[-1] * (1.0 - alpha[-1])
    after += (Tfin * (dimg_band @ bg))[None, :]
    dalpha = T * cdot - after / (1.0 - alpha)
    live = (araw >= ALPHA_MIN) & (araw < ALPHA_MAX)
    draw = np.where(live, dalpha, 0.0)

    dx = px[None, :] - mu2d[cand, 0:1]
    dy = py[None, :] - mu2d[cand, 1:2]
    A, B, C = conic[cand, 0:1], conic[cand, 1:2], conic[cand, 2:3]
    g = araw / opac[cand, None]
    dop = np.sum(draw * g, axis=1)
    dpow = draw * araw
    dmx = np.sum(dpow * (A * dx + B * dy), axis=1)
    dmy = np.sum(dpow * (B * dx + C * dy), axis=1)
    dA = np.sum(dpow * (-0.5 * dx * dx), axis=1)
    dB = np.sum(dpow * (-dx * dy), axis=1)
    dCc = np.sum(dpow * (-0.5 * dy * dy), axis=1)
    dcol = (alpha * T) @ dimg_band
    return cand, dop, np.stack([dmx, dmy], 1), np.stack([dA, dB, dCc], 1), dcol


def render_backward(result, d_image, threads=1):
    """Gradients of ``sum(d_image * result.image)`` w.r.t. every splat's 2D
    mean, 2D covariance ``(a, b, c)``, opacity and color (input order)."""
    if not isinstance(result, RenderResult) or not result.retained:
        raise StateError("render_backward requires a retained forward pass")
    H, W = result.height, result.width
    d_image = np.asarray(d_image, dtype=np.float64)
    if d_image.shape != (H, W, 3):
        raise ShapeError(f"upstream gradient has shape {d_image.shape}, expected {(H, W, 3)}")
    inside = (result._raw_color >= 0.0) & (result._raw_color <= 1.0)
    dimg = (d_image * inside).reshape(H * W, 3)
    n = len(result.opacities)
    conic, _ = _conics(result.cov2d) if n else (np.zeros((0, 3)), None)

    jobs = []
    for band in result._bands:
        if band is None:
            continue
        y0 = band[1]
        npx = band[2].shape[1]
        jobs.append((band, dimg[y0 * W:y0 * W + npx]))

    def work(job):
        return _backward_band(job[0], job[1], W, result.mu2d, conic, result.opacities,
                              result.colors, result.background)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            outs = list(pool.map(work, jobs))
    else:
        outs = [work(j) for j in jobs]

    dop = np.zeros(n)
    dmu = np.zeros((n, 2))
    dconic = np.zeros((n, 3))
    dcol = np.zeros((n, 3))
    for cand, a, b, c, d in outs:
        dop[cand] += a
        dmu[cand] += b
        dconic[cand] += c
        dcol[cand] += d

    # conic (inverse covariance) -> covariance
    dcov = np.zeros((n, 3))
    if n:
        Q = np.empty((n, 2, 2))
        Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = conic[:, 0], conic[:, 1], conic[:, 1], conic[:, 2]
        Gq = np.empty((n, 2, 2))
        Gq[:, 0, 0] = dconic[:, 0]
        Gq[:, 0, 1] = Gq[:, 1, 0] = 0.5 * dconic[:, 1]
        Gq[:, 1, 1] = dconic[:, 2]
        Gs = -Q @ Gq @ Q
        dcov = np.stack([Gs[:, 0, 0], 2.0 * Gs[:, 0, 1], Gs[:, 1, 1]], axis=1)
        dead = ~result.proj.valid | ~np.all(np.isfinite(Gs), axis=(1, 2))
        dop[dead] = 0.0
        dmu[dead] = 0.0
        dcov[dead] = 0.0
        dcol[dead] = 0.0
    return SplatGrads(dmu, dcov, dop, dcol)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image dimensions differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filt(x, w):
    k = len(w)
    y = np.lib.stride_tricks.sliding_window_view(x, k, axis=0) @ w
    return np.lib.stride_tricks.sliding_window_view(y, k, axis=1) @ w


def _filt_adjoint(g, w):
    k = len(w) - 1
    pad = np.pad(g, ((k, k), (k, k), (0, 0)))
    return _filt(pad, w[::-1])


def _as3(x):
    return x[..., None] if x.ndim == 2 else x


def ssim(a, b, return_grad=False):
    """Mean SSIM over valid 11x11 windows, averaged across channels.

    With ``return_grad`` also returns d(ssim)/d(a).
    """
    a, b = _check_pair(a, b)
    shape = a.shape
    a, b = _as3(a), _as3(b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise InvalidInputError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    w = gaussian_window()
    mx, my = _filt(a, w), _filt(b, w)
    exx, eyy, exy = _filt(a * a, w), _filt(b * b, w), _filt(a * b, w)
    A1 = 2 * mx * my + SSIM_C1
    A2 = 2 * (exy - mx * my) + SSIM_C2
    B1 = mx * mx + my * my + SSIM_C1
    B2 = (exx - mx * mx) + (eyy - my * my) + SSIM_C2
    S = (A1 * A2) / (B1 * B2)
    value = float(S.mean())
    if not return_grad:
        return value
    g = 1.0 / S.size
    dmx = g * S * (2 * my / A1 - 2 * my / A2 - 2 * mx / B1 + 2 * mx / B2)
    dexx = g * (-S / B2)
    dexy = g * (2 * S / A2)
    grad = _filt_adjoint(dmx, w) + 2 * a * _filt_adjoint(dexx, w) + b * _filt_adjoint(dexy, w)
    return value, grad.reshape(shape)


# ---------------------------------------------------------------------------
# image and depth I/O
# ---------------------------------------------------------------------------

def to_bytes(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image):
    image = np.asarray(image)
    h, w = image.shape[:2]
    data = image if image.dtype == np.uint8 else to_bytes(image)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data[..., :3]).tobytes())


def _ppm_tokens(data, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_ppm(path, as_float=True):
    data = Path(path).read_bytes()
    try:
        (magic, w, h, maxval), offset = _ppm_tokens(data, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: not a PPM file") from exc
    if magic != b"P6" or maxval != 255:
        raise FormatError(f"{path}: only 8-bit binary PPM (P6) is supported")
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=offset).reshape(h, w, 3)
    return pix.astype(np.float64) / 255.0 if as_float else pix.copy()


DEPTH_MAGIC = b"DSDEPTH1\n"


def write_depth(path, depth):
    depth = np.asarray(depth, dtype="<f8")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(np.array([w, h], dtype="<u4").tobytes())
        fh.write(depth.tobytes())


def read_depth(path):
    data = Path(path).read_bytes()
    if not data.startswith(DEPTH_MAGIC):
        raise FormatError(f"{path}: missing depth header")
    off = len(DEPTH_MAGIC)
    w, h = np.frombuffer(data, dtype="<u4", count=2, offset=off)
    return np.frombuffer(data, dtype="<f8", count=int(w) * int(h), offset=off + 8).reshape(int(h), int(w)).astype(np.float64)
