"""Differentiable CPU splatting: EWA projection, depth-sorted alpha blending.

The rasterizer is tile-based (16x16-pixel tiles by default). Each splat's
screen footprint is the ellipse ``delta^T cov2d^{-1} delta <= cutoff^2``;
pixels outside it receive no contribution. Per pixel, splats composite
front to back:

    C = sum_i c_i * a_i * prod_{j<i} (1 - a_j),   a_i = opacity_i * G_i(p)

Per-pixel contributions are capped at 1 - 1e-9 so the backward pass can use
fully vectorized suffix sums (which divide by 1 - a_i). Tiles are traversed
in fixed row-major order and splats in depth order (ties broken by index),
which makes both passes deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Camera, DeformedGaussian, DeformedGaussians, quat_normalize, quat_to_rotmat
from .errors import BehindNearPlane

__all__ = [
    "Splat2D",
    "RenderOutput",
    "project_gaussian",
    "project_gaussians",
    "project_gaussians_backward",
    "rasterize",
    "rasterize_backward",
    "render",
    "render_with_cache",
    "render_backward",
    "render_hit_depth",
]

_NEAR_PLANE = 0.01
_COV_FLOOR = 0.3
_CUTOFF_SIGMA = 3.0
_ALPHA_EPS = 1e-12
_A_MAX = 1.0 - 1e-9


@dataclass(frozen=True)
class Splat2D:
    """A projected Gaussian: 2D mean/covariance plus blending attributes."""

    mean2d: np.ndarray  # (2,)
    cov2d: np.ndarray  # (2, 2) symmetric positive definite
    depth: float
    color: np.ndarray
    opacity: float


@dataclass
class RenderOutput:
    """Rendered color, accumulated alpha, and expected depth images."""

    color: np.ndarray  # (H, W, C)
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W)


def _covariance3d(rotations: np.ndarray, scales: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    R = quat_to_rotmat(rotations)  # (N, 3, 3)
    S2 = scales**2
    sigma = np.einsum("nik,nk,njk->nij", R, S2, R)
    return sigma, R


def project_gaussians(
    positions: np.ndarray,
    rotations: np.ndarray,
    scales: np.ndarray,
    cam: Camera,
    near: float = _NEAR_PLANE,
    cov_floor: float = _COV_FLOOR,
):
    """Project a batch of Gaussians to screen space.

    Returns (means2d (N,2), cov2d (N,2,2), depths (N,), valid (N,), cache).
    Rows where ``valid`` is False (behind the near plane) hold zeros.
    """
    positions = np.asarray(positions, dtype=np.float64)
    rotations = np.asarray(rotations, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    n = positions.shape[0]
    W = cam.rotation
    t_cam = positions @ W.T + cam.translation  # (N, 3)
    depths = t_cam[:, 2].copy()
    valid = depths > near

    sigma, R = _covariance3d(rotations, scales)
    sigma_cam = np.einsum("ik,nkl,jl->nij", W, sigma, W)

    tz = np.where(valid, t_cam[:, 2], 1.0)
    K2 = cam.K[:2, :]  # (2, 3), last row of K assumed [0, 0, 1]
    num = t_cam[:, :2] @ K2[:, :2].T  # (K00 tx + K01 ty, K10 tx + K11 ty)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = K2[0, 0] / tz
    J[:, 0, 1] = K2[0, 1] / tz
    J[:, 1, 0] = K2[1, 0] / tz
    J[:, 1, 1] = K2[1, 1] / tz
    J[:, 0, 2] = -num[:, 0] / tz**2
    J[:, 1, 2] = -num[:, 1] / tz**2

    cov2d = np.einsum("nab,nbc,ndc->nad", J, sigma_cam, J)
    cov2d[:, 0, 0] += cov_floor
    cov2d[:, 1, 1] += cov_floor
    means2d = num / tz[:, None] + K2[:, 2]

    invalid = ~valid
    means2d[invalid] = 0.0
    cov2d[invalid] = np.eye(2) * max(cov_floor, 1e-6)
    depths[invalid] = 0.0

    cache = {
        "t_cam": t_cam,
        "tz": tz,
        "num": num,
        "J": J,
        "W": W,
        "K2": K2,
        "R": R,
        "scales": scales,
        "rot_raw": rotations,
        "sigma_cam": sigma_cam,
        "valid": valid,
    }
    return means2d, cov2d, depths, valid, cache


def project_gaussians_backward(
    cache: dict,
    grad_means2d: np.ndarray,
    grad_cov2d: np.ndarray,
    grad_depths: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact adjoint of :func:`project_gaussians` (w.r.t. pos/rot/scale)."""
    J, W, K2 = cache["J"], cache["W"], cache["K2"]
    t_cam, tz, num = cache["t_cam"], cache["tz"], cache["num"]
    R, scales = cache["R"], cache["scales"]
    sigma_cam = cache["sigma_cam"]
    valid = cache["valid"]

    gcov = np.where(valid[:, None, None], np.asarray(grad_cov2d, dtype=np.float64), 0.0)
    gcov = 0.5 * (gcov + np.swapaxes(gcov, 1, 2))
    gmean = np.where(valid[:, None], np.asarray(grad_means2d, dtype=np.float64), 0.0)
    gdepth = np.where(valid, np.asarray(grad_depths, dtype=np.float64), 0.0)

    # cov2d = J sigma_cam J^T (+ const): pull back through both factors
    g_sigma_cam = np.einsum("nba,nbc,ncd->nad", J, gcov, J)
    gJ = 2.0 * np.einsum("nab,nbc,ncd->nad", gcov, J, sigma_cam)

    # screen mean: uv = num / tz + K2[:, 2]; d(uv)/d(t_cam) equals J
    gt = np.einsum("nab,na->nb", J, gmean)

    # J's own dependence on the camera-space point
    fx, sk = K2[0, 0], K2[0, 1]
    fyx, fy = K2[1, 0], K2[1, 1]
    tz2, tz3 = tz**2, tz**3
    gt[:, 0] += -(gJ[:, 0, 2] * fx + gJ[:, 1, 2] * fyx) / tz2
    gt[:, 1] += -(gJ[:, 0, 2] * sk + gJ[:, 1, 2] * fy) / tz2
    gt[:, 2] += (
        -(gJ[:, 0, 0] * fx + gJ[:, 0, 1] * sk + gJ[:, 1, 0] * fyx + gJ[:, 1, 1] * fy) / tz2
        + 2.0 * (gJ[:, 0, 2] * num[:, 0] + gJ[:, 1, 2] * num[:, 1]) / tz3
    )
    gt[:, 2] += gdepth

    gpos = gt @ W

    # world covariance sigma = R diag(s^2) R^T
    g_sigma = np.einsum("ai,nab,bj->nij", W, g_sigma_cam, W)
    S2 = scales**2
    gR = 2.0 * np.einsum("nij,njk,nk->nik", g_sigma, R, S2)
    RtGR = np.einsum("nji,njk,nkl->nil", R, g_sigma, R)
    gscale = 2.0 * scales * np.einsum("nii->ni", RtGR)

    gq = _rotmat_quat_backward(cache["rot_raw"], gR)
    out_mask = valid[:, None]
    return (
        np.where(out_mask, gpos, 0.0),
        np.where(out_mask, gq, 0.0),
        np.where(out_mask, gscale, 0.0),
    )


def _rotmat_quat_backward(rot_raw: np.ndarray, gR: np.ndarray) -> np.ndarray:
    """Pull gradients on R back to the raw (unnormalized) quaternion."""
    q = quat_normalize(rot_raw)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)

    def m(rows):
        return 2.0 * np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dRdw = m([[zero, -z, y], [z, zero, -x], [-y, x, zero]])
    dRdx = m([[zero, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dRdy = m([[-2 * y, x, w], [x, zero, z], [-w, z, -2 * y]])
    dRdz = m([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zero]])
    gq = np.stack(
        [np.einsum("nij,nij->n", gR, d) for d in (dRdw, dRdx, dRdy, dRdz)], axis=-1
    )
    # through normalization q = r / |r|
    norm = np.linalg.norm(rot_raw, axis=1, keepdims=True)
    return (gq - np.sum(gq * q, axis=1, keepdims=True) * q) / norm


def project_gaussian(g: DeformedGaussian, cam: Camera) -> Splat2D:
    """Project a single deformed Gaussian; raises :class:`BehindNearPlane`."""
    means2d, cov2d, depths, valid, _ = project_gaussians(
        g.position[None], g.rotation[None], g.scale[None], cam
    )
    if not valid[0]:
        raise BehindNearPlane(f"depth {depths[0]:g} <= {_NEAR_PLANE:g}")
    return Splat2D(means2d[0], cov2d[0], float(depths[0]), np.asarray(g.color, dtype=np.float64), g.opacity)


def rasterize(
    means2d: np.ndarray,
    cov2d: np.ndarray,
    depths: np.ndarray,
    colors: np.ndarray,
    opacities: np.ndarray,
    width: int,
    height: int,
    tile_size: int = 16,
    sigma_cutoff: float = _CUTOFF_SIGMA,
    want_hit_depth: bool = False,
    hit_alpha: float = 0.5,
):
    """Composite depth-sorted splats into color/alpha/depth images.

    Returns (RenderOutput, hit_depth or None, cache). ``hit_depth`` is the
    depth of the splat at which accumulated opacity first reaches
    ``hit_alpha`` (+inf where it never does); the depth image is the
    alpha-weighted expected depth (0 where alpha is 0).

    Occupied tiles are processed as one padded (tiles, splats, pixels)
    batch, so the whole forward is a handful of array passes.
    """
    means2d = np.asarray(means2d, dtype=np.float64)
    cov2d = np.asarray(cov2d, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    opacities = np.asarray(opacities, dtype=np.float64)
    n = means2d.shape[0]
    nch = colors.shape[1] if colors.ndim == 2 else 3

    prec = np.zeros_like(cov2d)
    if n:
        det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
        prec[:, 0, 0] = cov2d[:, 1, 1] / det
        prec[:, 1, 1] = cov2d[:, 0, 0] / det
        prec[:, 0, 1] = prec[:, 1, 0] = -cov2d[:, 0, 1] / det

    order = np.argsort(depths, kind="stable")
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    tile_lists: dict[int, list[int]] = {}
    if n:
        rx = sigma_cutoff * np.sqrt(np.maximum(cov2d[:, 0, 0], 0.0))
        ry = sigma_cutoff * np.sqrt(np.maximum(cov2d[:, 1, 1], 0.0))
        for g in order:
            x0 = max(int(np.ceil(means2d[g, 0] - rx[g] - 0.5)), 0)
            x1 = min(int(np.floor(means2d[g, 0] + rx[g] - 0.5)), width - 1)
            y0 = max(int(np.ceil(means2d[g, 1] - ry[g] - 0.5)), 0)
            y1 = min(int(np.floor(means2d[g, 1] + ry[g] - 0.5)), height - 1)
            if x0 > x1 or y0 > y1:
                continue
            for ty in range(y0 // tile_size, y1 // tile_size + 1):
                row = ty * tiles_x
                for tx in range(x0 // tile_size, x1 // tile_size + 1):
                    tile_lists.setdefault(row + tx, []).append(g)

    hp, wp = tiles_y * tile_size, tiles_x * tile_size
    color_p = np.zeros((hp, wp, nch))
    alpha_p = np.zeros((hp, wp))
    dsum_p = np.zeros((hp, wp))
    hit_p = np.full((hp, wp), np.inf) if want_hit_depth else None

    cache = {
        "n": n,
        "nch": nch,
        "prec": prec,
        "colors": colors,
        "opacities": opacities,
        "depths": depths,
        "geom": (width, height, tile_size, tiles_x),
        "batch": None,
    }
    used = sorted(tile_lists)
    if used:
        gmax = max(len(tile_lists[t]) for t in used)
        nt = len(used)
        psz = tile_size * tile_size
        ids = np.zeros((nt, gmax), dtype=np.int64)
        live = np.zeros((nt, gmax), dtype=bool)
        for r, t in enumerate(used):
            lst = tile_lists[t]
            ids[r, : len(lst)] = lst
            live[r, : len(lst)] = True
        t_arr = np.array(used)
        ty, tx = t_arr // tiles_x, t_arr % tiles_x
        # pixel centers of each used tile, flattened row-major
        off = np.arange(tile_size, dtype=np.float64) + 0.5
        pxo, pyo = np.meshgrid(off, off)  # (ts, ts): x varies fastest
        px = tx[:, None] * tile_size + pxo.ravel()[None, :]  # (nt, P)
        py = ty[:, None] * tile_size + pyo.ravel()[None, :]

        dx = px[:, None, :] - means2d[ids, 0][:, :, None]  # (nt, gmax, P)
        dy = py[:, None, :] - means2d[ids, 1][:, :, None]
        p00 = prec[ids, 0, 0][:, :, None]
        p01 = prec[ids, 0, 1][:, :, None]
        p11 = prec[ids, 1, 1][:, :, None]
        cut2 = sigma_cutoff**2
        q = dx * dx
        q *= p00
        tmp = dy * dy
        tmp *= p11
        q += tmp
        np.multiply(dx, dy, out=tmp)
        tmp *= p01
        tmp *= 2.0
        q += tmp
        mask = q <= cut2
        mask &= live[:, :, None]
        np.minimum(q, cut2, out=q)
        q *= -0.5
        G = np.exp(q, out=q)  # reuses q's buffer; q is dead from here on
        G *= mask
        a = G * opacities[ids][:, :, None]
        np.minimum(a, _A_MAX, out=a)
        om = 1.0 - a
        T = np.cumprod(om, axis=1)
        T[:, 1:] = T[:, :-1]
        T[:, 0] = 1.0
        w = a * T
        col_t = np.matmul(w.swapaxes(1, 2), colors[ids])  # (nt, P, C)
        alpha_t = w.sum(axis=1)
        dsum_t = np.matmul(depths[ids][:, None, :], w)[:, 0, :]

        view = color_p.reshape(tiles_y, tile_size, tiles_x, tile_size, nch)
        view[ty, :, tx] = col_t.reshape(nt, tile_size, tile_size, nch)
        alpha_p.reshape(tiles_y, tile_size, tiles_x, tile_size)[ty, :, tx] = alpha_t.reshape(
            nt, tile_size, tile_size
        )
        dsum_p.reshape(tiles_y, tile_size, tiles_x, tile_size)[ty, :, tx] = dsum_t.reshape(
            nt, tile_size, tile_size
        )
        if want_hit_depth:
            cum = np.cumsum(w, axis=1)
            reached = cum >= hit_alpha
            any_hit = reached.any(axis=1)
            first = np.argmax(reached, axis=1)
            hd = np.where(any_hit, np.take_along_axis(depths[ids], first, axis=1), np.inf)
            hit_p.reshape(tiles_y, tile_size, tiles_x, tile_size)[ty, :, tx] = hd.reshape(
                nt, tile_size, tile_size
            )
        cache["batch"] = {
            "ids": ids, "a": a, "G": G, "dx": dx, "dy": dy, "ty": ty, "tx": tx,
            "w": w, "T": T, "om": om,
        }

    color_img = color_p[:height, :width]
    alpha_img = alpha_p[:height, :width]
    dsum_img = dsum_p[:height, :width]
    with np.errstate(invalid="ignore", divide="ignore"):
        depth_img = np.where(alpha_img > _ALPHA_EPS, dsum_img / np.maximum(alpha_img, _ALPHA_EPS), 0.0)
    cache["alpha"] = alpha_img
    cache["dsum"] = dsum_img
    hit_img = hit_p[:height, :width] if want_hit_depth else None
    return RenderOutput(color_img, alpha_img, depth_img), hit_img, cache


def rasterize_backward(
    cache: dict,
    grad_color: np.ndarray | None = None,
    grad_alpha: np.ndarray | None = None,
    grad_depth: np.ndarray | None = None,
) -> dict:
    """Reverse-mode pass of :func:`rasterize`.

    Returns per-splat gradients: means2d, cov2d, depths, colors, opacities.
    Accumulation runs over tiles in the forward's fixed order and over
    splats back to front, so results are deterministic.
    """
    n, nch = cache["n"], cache["nch"]
    colors, opacities, depths = cache["colors"], cache["opacities"], cache["depths"]
    prec = cache["prec"]
    H, W = cache["alpha"].shape

    gC = np.zeros((H, W, nch)) if grad_color is None else np.asarray(grad_color, dtype=np.float64)
    gA = np.zeros((H, W)) if grad_alpha is None else np.asarray(grad_alpha, dtype=np.float64).copy()
    if grad_depth is not None:
        # depth = dsum / max(alpha, eps): convert to gradients on dsum, alpha
        gD = np.asarray(grad_depth, dtype=np.float64)
        alpha, dsum = cache["alpha"], cache["dsum"]
        live = alpha > _ALPHA_EPS
        gS = np.where(live, gD / np.maximum(alpha, _ALPHA_EPS), 0.0)
        gA = gA + np.where(live, -gD * dsum / np.maximum(alpha, _ALPHA_EPS) ** 2, 0.0)
    else:
        gS = np.zeros((H, W))

    gmean = np.zeros((n, 2))
    gprec = np.zeros((n, 2, 2))
    gcolor = np.zeros((n, nch))
    gopac = np.zeros(n)
    gdepth_splat = np.zeros(n)

    batch = cache["batch"]
    if batch is not None:
        width, height, tile_size, tiles_x = cache["geom"]
        tiles_y = (height + tile_size - 1) // tile_size
        hp, wp = tiles_y * tile_size, tiles_x * tile_size
        ids, a, G = batch["ids"], batch["a"], batch["G"]
        dx, dy = batch["dx"], batch["dy"]
        ty, tx = batch["ty"], batch["tx"]
        nt, gmax, psz = a.shape

        def tileize(img, ch=None):
            pad = np.zeros((hp, wp) if ch is None else (hp, wp, ch))
            pad[:height, :width] = img
            if ch is None:
                return pad.reshape(tiles_y, tile_size, tiles_x, tile_size)[ty, :, tx].reshape(nt, psz)
            return pad.reshape(tiles_y, tile_size, tiles_x, tile_size, ch)[ty, :, tx].reshape(
                nt, psz, ch
            )

        gC_t = tileize(gC, nch)  # (nt, P, C)
        gA_t = tileize(gA)  # (nt, P)
        gS_t = tileize(gS)

        w, T, om = batch["w"], batch["T"], batch["om"]
        c = colors[ids]  # (nt, gmax, C)
        d = depths[ids]  # (nt, gmax)

        # dC/da_i = T_i c_i - (sum_{j>i} w_j c_j) / (1 - a_i); alpha and the
        # depth sum follow with c_j -> 1 and c_j -> d_j. Contracting the
        # channel axis against the upstream gradient first keeps every
        # suffix sum three-dimensional.
        cc = np.matmul(c, gC_t.swapaxes(1, 2))  # (nt, gmax, P)
        cc += gA_t[:, None, :]
        cc += gS_t[:, None, :] * d[:, :, None]
        wcc = w * cc
        suf = np.cumsum(wcc[:, ::-1], axis=1)[:, ::-1]
        suf[:, :-1] = suf[:, 1:]
        suf[:, -1] = 0.0
        suf /= om
        grad_a = T * cc
        grad_a -= suf

        flat_ids = ids.ravel()
        np.add.at(gcolor, flat_ids, np.matmul(w, gC_t).reshape(-1, nch))
        np.add.at(gdepth_splat, flat_ids, np.matmul(w, gS_t[:, :, None])[:, :, 0].ravel())
        grad_a *= a < _A_MAX
        np.add.at(gopac, flat_ids, (grad_a * G).sum(axis=2).ravel())
        gq = grad_a
        gq *= G  # grad_a is dead; reuse its buffer
        gq *= opacities[ids][:, :, None]
        gq *= -0.5
        p00 = prec[ids, 0, 0][:, :, None]
        p01 = prec[ids, 0, 1][:, :, None]
        p11 = prec[ids, 1, 1][:, :, None]
        gdx = gq * (p00 * dx + p01 * dy)
        gdy = gq * (p01 * dx + p11 * dy)
        gdx *= 2.0
        gdy *= 2.0
        np.add.at(gmean[:, 0], flat_ids, -gdx.sum(axis=2).ravel())
        np.add.at(gmean[:, 1], flat_ids, -gdy.sum(axis=2).ravel())
        np.add.at(gprec[:, 0, 0], flat_ids, (gq * dx * dx).sum(axis=2).ravel())
        np.add.at(gprec[:, 1, 1], flat_ids, (gq * dy * dy).sum(axis=2).ravel())
        off = (gq * dx * dy).sum(axis=2).ravel()
        np.add.at(gprec[:, 0, 1], flat_ids, off)
        np.add.at(gprec[:, 1, 0], flat_ids, off)

    gcov = -np.einsum("nab,nbc,ncd->nad", prec, gprec, prec)
    return {
        "means2d": gmean,
        "cov2d": gcov,
        "depths": gdepth_splat,
        "colors": gcolor,
        "opacities": gopac,
    }


def render_with_cache(
    dg: DeformedGaussians,
    cam: Camera,
    tile_size: int = 16,
    sigma_cutoff: float = _CUTOFF_SIGMA,
    near: float = _NEAR_PLANE,
    cov_floor: float = _COV_FLOOR,
):
    """Full forward render keeping every cache needed for the backward."""
    means2d, cov2d, depths, valid, pcache = project_gaussians(
        dg.positions, dg.rotations, dg.scales, cam, near=near, cov_floor=cov_floor
    )
    idx = np.nonzero(valid)[0]
    out, _, rcache = rasterize(
        means2d[idx],
        cov2d[idx],
        depths[idx],
        dg.colors[idx],
        dg.opacities[idx],
        cam.width,
        cam.height,
        tile_size=tile_size,
        sigma_cutoff=sigma_cutoff,
    )
    cache = {"pcache": pcache, "rcache": rcache, "idx": idx, "n": len(dg), "nch": dg.colors.shape[1]}
    return out, cache


def render(
    dg: DeformedGaussians,
    cam: Camera,
    tile_size: int = 16,
    sigma_cutoff: float = _CUTOFF_SIGMA,
) -> RenderOutput:
    """Render a deformed Gaussian set through ``cam``."""
    out, _ = render_with_cache(dg, cam, tile_size=tile_size, sigma_cutoff=sigma_cutoff)
    return out


def render_backward(
    cache: dict,
    grad_color: np.ndarray | None = None,
    grad_alpha: np.ndarray | None = None,
    grad_depth: np.ndarray | None = None,
) -> dict:
    """Gradients of a cached render w.r.t. every Gaussian attribute.

    Returns arrays keyed positions/rotations/scales/opacities/colors with
    the same leading dimension as the rendered set (culled splats get 0).
    """
    idx, n, nch = cache["idx"], cache["n"], cache["nch"]
    sg = rasterize_backward(cache["rcache"], grad_color, grad_alpha, grad_depth)

    nv = cache["pcache"]["valid"].shape[0]
    gmean = np.zeros((nv, 2))
    gcov = np.zeros((nv, 2, 2))
    gdep = np.zeros(nv)
    gmean[idx] = sg["means2d"]
    gcov[idx] = sg["cov2d"]
    gdep[idx] = sg["depths"]
    gpos, grot, gscale = project_gaussians_backward(cache["pcache"], gmean, gcov, gdep)

    gcolors = np.zeros((n, nch))
    gopac = np.zeros(n)
    gcolors[idx] = sg["colors"]
    gopac[idx] = sg["opacities"]
    return {
        "positions": gpos,
        "rotations": grot,
        "scales": gscale,
        "opacities": gopac,
        "colors": gcolors,
    }


def render_hit_depth(
    dg: DeformedGaussians, cam: Camera, hit_alpha: float = 0.5, sigma_cutoff: float = _CUTOFF_SIGMA
) -> np.ndarray:
    """Depth at which accumulated opacity first reaches ``hit_alpha``.

    +inf where the threshold is never reached; used by visibility checks.
    """
    means2d, cov2d, depths, valid, _ = project_gaussians(dg.positions, dg.rotations, dg.scales, cam)
    idx = np.nonzero(valid)[0]
    _, hit, _ = rasterize(
        means2d[idx],
        cov2d[idx],
        depths[idx],
        dg.colors[idx],
        dg.opacities[idx],
        cam.width,
        cam.height,
        sigma_cutoff=sigma_cutoff,
        want_hit_depth=True,
        hit_alpha=hit_alpha,
    )
    return hit
