"""Finite-difference verification of every analytic gradient path.

Each suite builds a small deterministic problem, computes analytic
gradients, and compares them against central differences
(h = 1e-4 * max(1, |param|)). The relative error of a component is
|analytic - fd| / max(|analytic| + |fd|, 1e-4 * gmax) with gmax the
largest combined magnitude in the suite, which keeps near-zero components
from drowning the check in truncation noise.

The render suites run with a widened footprint cutoff (6 sigma) so that a
central-difference probe never steps a pixel across the cutoff boundary;
the analytic code path is identical to the default configuration.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .appearance import SH4DCoeffs, eval_colors_backward, eval_colors_batch
from .core import Camera, DeformedGaussians, GaussianCloud, Gaussian4DState, look_at_extrinsics
from .motionfield import (
    DeformationDecoder,
    HexPlaneField,
    hexplane_interp,
    hexplane_interp_backward,
    hexplane_interp_batch,
    hexplane_point_jacobian,
)
from .optim import _Pipeline
from .splatter import render_backward, render_with_cache
from .trackmath import position_loss, position_loss_grad

__all__ = ["CheckResult", "run_all", "SUITES"]

_H = 1e-4
_CUTOFF = 6.0


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    fd = np.asarray(fd, dtype=np.float64).ravel()
    combined = np.abs(analytic) + np.abs(fd)
    gmax = combined.max() if combined.size else 0.0
    if gmax == 0.0:
        return 0.0
    denom = np.maximum(combined, 1e-4 * gmax)
    return float(np.max(np.abs(analytic - fd) / denom))


def _central_diff(fn, arr: np.ndarray, indices) -> np.ndarray:
    """Central differences of scalar fn at selected flat indices of arr."""
    flat = arr.reshape(-1)
    out = np.zeros(len(indices))
    for n, i in enumerate(indices):
        old = flat[i]
        h = _H * max(1.0, abs(old))
        flat[i] = old + h
        fp = fn()
        flat[i] = old - h
        fm = fn()
        flat[i] = old
        out[n] = (fp - fm) / (2.0 * h)
    return out


def _sample_indices(rng, size: int, count: int) -> np.ndarray:
    if size <= count:
        return np.arange(size)
    return np.sort(rng.choice(size, size=count, replace=False))


def _toy_scene(n: int, seed: int) -> tuple[GaussianCloud, Camera]:
    rng = np.random.Generator(np.random.PCG64(seed))
    positions = rng.uniform(-0.6, 0.6, size=(n, 3))
    positions[:, 2] = np.linspace(-0.4, 0.4, n)  # distinct depths, no sort ties
    rotations = rng.standard_normal((n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    scales = rng.uniform(0.12, 0.3, size=(n, 3))
    opacities = rng.uniform(0.3, 0.85, size=n)
    rgb = rng.uniform(0.2, 0.8, size=(n, 3))
    sh = SH4DCoeffs.from_rgb(rgb, l_max=1, w=2, n_frames=4)
    sh.fr[..., 1:, :] = 0.02 * rng.standard_normal(sh.fr[..., 1:, :].shape)
    cloud = GaussianCloud(positions, rotations, scales, opacities, sh)
    size = 32
    f = 0.5 * size / np.tan(np.deg2rad(45.0) / 2.0)
    K = np.array([[f, 0, size / 2], [0, f, size / 2], [0, 0, 1.0]])
    cam = Camera(K, look_at_extrinsics(np.array([0.0, -3.0, 0.6]), np.zeros(3)), size, size)
    return cloud, cam


def check_render(seed: int = 3) -> CheckResult:
    """Compositing gradients across all five attribute groups."""
    start = time.time()
    rng = np.random.Generator(np.random.PCG64(seed))
    cloud, cam = _toy_scene(8, seed)
    colors = rng.uniform(0.1, 0.9, size=(8, 3))
    params = {
        "positions": cloud.positions.copy(),
        "rotations": cloud.rotations.copy(),
        "scales": cloud.scales.copy(),
        "opacities": cloud.opacities.copy(),
        "colors": colors,
    }
    w_color = rng.standard_normal((cam.height, cam.width, 3))
    w_alpha = rng.standard_normal((cam.height, cam.width))
    base = render_with_cache(
        DeformedGaussians(
            params["positions"], params["rotations"], params["scales"],
            params["opacities"], params["colors"],
        ),
        cam,
        sigma_cutoff=_CUTOFF,
    )[0]
    # probe expected depth only where coverage is solid: the empty->covered
    # transition of the normalized depth is not differentiable
    w_depth = rng.standard_normal((cam.height, cam.width)) * (base.alpha > 0.1)

    def forward() -> float:
        dg = DeformedGaussians(
            params["positions"], params["rotations"], params["scales"],
            params["opacities"], params["colors"],
        )
        out, _ = render_with_cache(dg, cam, sigma_cutoff=_CUTOFF)
        return float(np.sum(w_color * out.color) + np.sum(w_alpha * out.alpha) + np.sum(w_depth * out.depth))

    dg = DeformedGaussians(
        params["positions"], params["rotations"], params["scales"],
        params["opacities"], params["colors"],
    )
    _, cache = render_with_cache(dg, cam, sigma_cutoff=_CUTOFF)
    grads = render_backward(cache, w_color, w_alpha, w_depth)

    worst = 0.0
    for key in params:
        arr = params[key]
        idx = _sample_indices(rng, arr.size, 16)
        fd = _central_diff(forward, arr, idx)
        worst = max(worst, _rel_err(grads[key].reshape(-1)[idx], fd))
    return CheckResult("render", worst, 1e-3, time.time() - start)


def _toy_field(seed: int) -> HexPlaneField:
    field = HexPlaneField.create(
        np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]),
        n_frames=6, spatial_res=8, temporal_res=4, dim=4, levels=2, seed=seed,
    )
    rng = np.random.Generator(np.random.PCG64(seed + 5))
    for level in field.planes:
        for p in level:
            p += 0.3 * rng.standard_normal(p.shape)
    return field


def check_hexplane(seed: int = 11) -> CheckResult:
    """Plane-entry and query-point gradients of the hex interpolation."""
    start = time.time()
    rng = np.random.Generator(np.random.PCG64(seed))
    field = _toy_field(seed)
    x = np.array([0.137, -0.261, 0.318])
    f = 2.35
    g_up = rng.standard_normal(field.feature_dim)

    def forward() -> float:
        return float(g_up @ hexplane_interp(field, x, f))

    _, cache = hexplane_interp_batch(field, x[None], f)
    plane_grads = hexplane_interp_backward(field, cache, g_up[None])
    worst = 0.0
    for lvl in range(field.levels):
        for k in range(6):
            arr = field.planes[lvl][k]
            idx = _sample_indices(rng, arr.size, 10)
            fd = _central_diff(forward, arr, idx)
            worst = max(worst, _rel_err(plane_grads[lvl][k].reshape(-1)[idx], fd))

    jac = hexplane_point_jacobian(field, x, f)  # (F, 3)
    g_x = g_up @ jac
    fd_x = _central_diff(forward, x, [0, 1, 2])
    worst = max(worst, _rel_err(g_x, fd_x))
    return CheckResult("hexplane_interp", worst, 1e-4, time.time() - start)


def check_decoder(seed: int = 23) -> CheckResult:
    """Decoder parameter and input-feature gradients."""
    start = time.time()
    rng = np.random.Generator(np.random.PCG64(seed))
    dec = DeformationDecoder(12, hidden=16, seed=seed)
    for name, _ in DeformationDecoder.HEADS:  # zero-init blocks gradients
        dec.heads[name]["w2"] = 0.3 * rng.standard_normal(dec.heads[name]["w2"].shape)
        dec.heads[name]["b2"] = 0.1 * rng.standard_normal(dec.heads[name]["b2"].shape)
    feats = rng.standard_normal((5, 12))
    wp, wr, ws = (rng.standard_normal((5, d)) for d in (3, 4, 3))

    def forward() -> float:
        dx, dr, ds, _ = dec.forward(feats)
        return float(np.sum(wp * dx) + np.sum(wr * dr) + np.sum(ws * ds))

    _, _, _, cache = dec.forward(feats)
    grads, g_feats = dec.backward(cache, wp, wr, ws)
    worst = 0.0
    for name, arr in dec.params().items():
        idx = _sample_indices(rng, arr.size, 8)
        fd = _central_diff(forward, arr, idx)
        worst = max(worst, _rel_err(grads[name].reshape(-1)[idx], fd))
    idx = _sample_indices(rng, feats.size, 12)
    fd = _central_diff(forward, feats, idx)
    worst = max(worst, _rel_err(g_feats.reshape(-1)[idx], fd))
    return CheckResult("deform_decode", worst, 1e-4, time.time() - start)


def check_color(seed: int = 31) -> CheckResult:
    """Fourier-weight gradient of the clamped SH color (linear map)."""
    start = time.time()
    rng = np.random.Generator(np.random.PCG64(seed))
    n = 6
    fr = 0.05 * rng.standard_normal((n, 3, 4, 3))
    fr[:, :, 0, 0] = rng.uniform(-0.2, 0.2, size=(n, 3))  # stay inside the clamp
    dirs = rng.standard_normal((n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    w = rng.standard_normal((n, 3))
    t = 1.7

    def forward() -> float:
        colors, _ = eval_colors_batch(fr, 1, 5, dirs, t)
        return float(np.sum(w * colors))

    _, cache = eval_colors_batch(fr, 1, 5, dirs, t)
    g_fr, g_dirs = eval_colors_backward(cache, w)
    idx = _sample_indices(rng, fr.size, 40)
    fd = _central_diff(forward, fr, idx)
    worst = _rel_err(g_fr.reshape(-1)[idx], fd)
    idx = _sample_indices(rng, dirs.size, 12)
    fd = _central_diff(forward, dirs, idx)
    worst = max(worst, _rel_err(g_dirs.reshape(-1)[idx], fd))
    return CheckResult("eval_color_4d", worst, 1e-6, time.time() - start)


def check_position_loss(seed: int = 41) -> CheckResult:
    """Huber position-loss gradient on both branches."""
    start = time.time()
    rng = np.random.Generator(np.random.PCG64(seed))
    tracked = rng.uniform(0, 10, size=(2, 3, 5, 2))
    predicted = tracked + rng.uniform(-0.4, 0.4, size=tracked.shape)
    predicted[1, 1] += 3.0  # push some residuals onto the linear branch

    def forward() -> float:
        return position_loss(tracked, predicted, delta=1.0)

    _, grad = position_loss_grad(tracked, predicted, delta=1.0)
    idx = _sample_indices(rng, predicted.size, 30)
    fd = _central_diff(forward, predicted, idx)
    worst = _rel_err(grad.reshape(-1)[idx], fd)
    return CheckResult("position_loss", worst, 1e-4, time.time() - start)


def check_full_chain(seed: int = 53) -> CheckResult:
    """Reconstruction loss through hexplanes -> decoder -> deform -> render."""
    start = time.time()
    rng = np.random.Generator(np.random.PCG64(seed))
    cloud, cam = _toy_scene(4, seed)
    field = _toy_field(seed + 1)
    dec = DeformationDecoder(field.feature_dim + 2, hidden=16, seed=seed)
    for name, _ in DeformationDecoder.HEADS:
        dec.heads[name]["w2"] = 0.02 * rng.standard_normal(dec.heads[name]["w2"].shape)
    sh_fr = cloud.sh.fr.copy()
    fv_const = 0.5 * rng.standard_normal((field.n_frames, 4, 2))
    gt_img = rng.uniform(0.0, 1.0, size=(cam.height, cam.width, 3))
    gt_mask = rng.uniform(0.0, 1.0, size=(cam.height, cam.width))
    t = 2

    def build_pipe() -> _Pipeline:
        return _Pipeline(
            scene=cloud, cameras=[cam],
            images=gt_img[None, None], masks=gt_mask[None, None],
            fv_const=fv_const, field=field, decoder=dec, sh_fr=sh_fr,
            sigma_cutoff=_CUTOFF,
        )

    from .optim import reconstruction_term_grad

    def forward() -> float:
        pipe = build_pipe()
        fstate = pipe.frame_forward(t)
        out, _ = pipe.render_pair(fstate, 0)
        term, _, _ = reconstruction_term_grad(out.color, gt_img, out.alpha, gt_mask)
        return term

    pipe = build_pipe()
    fstate = pipe.frame_forward(t)
    out, pcache = pipe.render_pair(fstate, 0)
    _, g_render, g_mask = reconstruction_term_grad(out.color, gt_img, out.alpha, gt_mask)
    n = len(cloud)
    grads = {name: np.zeros_like(arr) for name, arr in field.params().items()}
    for name, arr in dec.params().items():
        grads[f"dec_{name}"] = np.zeros_like(arr)
    grads["sh_fr"] = np.zeros_like(sh_fr)
    accum = {
        "g_pos": np.zeros((n, 3)),
        "g_rot": np.zeros((n, 4)),
        "g_scale": np.zeros((n, 3)),
        "sh_fr": grads["sh_fr"],
    }
    pipe.backward_pair(fstate, pcache, g_render, g_mask, accum)
    pipe.backward_frame(fstate, accum, grads)

    worst = 0.0
    targets = [(f"plane_{l}_{k}", field.planes[l][k]) for l in range(field.levels) for k in range(6)]
    targets += [(f"dec_{nm}", arr) for nm, arr in dec.params().items()]
    targets += [("sh_fr", sh_fr)]
    for name, arr in targets:
        idx = _sample_indices(rng, arr.size, 6)
        fd = _central_diff(forward, arr, idx)
        worst = max(worst, _rel_err(grads[name].reshape(-1)[idx], fd))
    return CheckResult("full_rec_chain", worst, 1e-3, time.time() - start)


SUITES = (
    check_render,
    check_hexplane,
    check_decoder,
    check_color,
    check_position_loss,
    check_full_chain,
)


def run_all(verbose: bool = False) -> list[CheckResult]:
    """Run every gradient suite; optionally print one line per suite."""
    results = []
    for suite in SUITES:
        res = suite()
        results.append(res)
        if verbose:
            status = "PASS" if res.passed else "FAIL"
            print(
                f"[{status}] {res.name}: max rel err {res.max_rel_err:.3e} "
                f"(tol {res.tol:.0e}, {res.seconds:.2f}s)"
            )
    return results
