"""Time-varying spherical-harmonics color model.

Each Gaussian's color is a real-SH expansion over viewing direction whose
coefficients evolve over the video through a truncated cosine series:

    value(dir, t) = sum_{l,m} k_lm(t) * Y_lm(dir)
    k_lm(t)       = sum_{i=0}^{w-1} fr_i * cos(i * pi * t / n_frames)

with t the frame index. The raw SH value is signed; displayed color is
``clamp(0.5 + value, 0, 1)``.

Direction convention: ``psi`` is the azimuth in [0, 2pi), ``gamma`` the polar
angle from +z in [0, pi]; the Cartesian direction is
(sin(gamma)cos(psi), sin(gamma)sin(psi), cos(gamma)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import Splat4DError

__all__ = [
    "SH4DCoeffs",
    "sh_basis",
    "sh_basis_cartesian",
    "fourier_coeff",
    "eval_sh_value",
    "eval_color_4d",
    "eval_colors_batch",
    "eval_colors_backward",
    "MAX_DEGREE",
]

# Real SH normalization constants, orthonormal on the unit sphere.
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MAX_DEGREE = 3


class IndexOutOfRange(Splat4DError):
    """SH degree/order pair outside the supported table."""


def sh_basis_cartesian(l: int, m: int, d: np.ndarray) -> np.ndarray:
    """Real SH basis Y_l^m evaluated at unit direction(s) ``d`` (..., 3)."""
    if not 0 <= l <= MAX_DEGREE or abs(m) > l:
        raise IndexOutOfRange(f"unsupported SH index l={l}, m={m}")
    d = np.asarray(d, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    if l == 0:
        return np.full(np.shape(x), _C0)
    if l == 1:
        return (-_C1 * y, _C1 * z, -_C1 * x)[m + 1]
    if l == 2:
        return (
            _C2[0] * x * y,
            _C2[1] * y * z,
            _C2[2] * (3.0 * z * z - 1.0),
            _C2[3] * x * z,
            _C2[4] * (x * x - y * y),
        )[m + 2]
    return (
        _C3[0] * y * (3.0 * x * x - y * y),
        _C3[1] * x * y * z,
        _C3[2] * y * (5.0 * z * z - 1.0),
        _C3[3] * z * (5.0 * z * z - 3.0),
        _C3[4] * x * (5.0 * z * z - 1.0),
        _C3[5] * z * (x * x - y * y),
        _C3[6] * x * (x * x - 3.0 * y * y),
    )[m + 3]


def _angles_to_dir(psi: float, gamma: float) -> np.ndarray:
    sg = np.sin(gamma)
    return np.array([sg * np.cos(psi), sg * np.sin(psi), np.cos(gamma)], dtype=np.float64)


def sh_basis(l: int, m: int, psi: float, gamma: float) -> float:
    """Real SH basis Y_l^m at azimuth ``psi``, polar angle ``gamma``."""
    return float(sh_basis_cartesian(l, m, _angles_to_dir(psi, gamma)))


def _basis_table(dirs: np.ndarray, l_max: int) -> np.ndarray:
    """Stack Y_lm(dirs) for all l <= l_max; returns (..., (l_max+1)^2)."""
    cols = [
        sh_basis_cartesian(l, m, dirs)
        for l in range(l_max + 1)
        for m in range(-l, l + 1)
    ]
    return np.stack(np.broadcast_arrays(*cols), axis=-1)


def _basis_dir_jacobian(dirs: np.ndarray, l_max: int) -> np.ndarray:
    """d Y_lm / d direction for all l <= l_max; returns (..., S, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [np.stack([zero, zero, zero], axis=-1)]  # Y_0^0 constant
    if l_max >= 1:
        rows += [
            np.stack([zero, np.full_like(x, -_C1), zero], axis=-1),
            np.stack([zero, zero, np.full_like(x, _C1)], axis=-1),
            np.stack([np.full_like(x, -_C1), zero, zero], axis=-1),
        ]
    if l_max >= 2:
        rows += [
            np.stack([_C2[0] * y, _C2[0] * x, zero], axis=-1),
            np.stack([zero, _C2[1] * z, _C2[1] * y], axis=-1),
            np.stack([zero, zero, _C2[2] * 6.0 * z], axis=-1),
            np.stack([_C2[3] * z, zero, _C2[3] * x], axis=-1),
            np.stack([_C2[4] * 2.0 * x, -_C2[4] * 2.0 * y, zero], axis=-1),
        ]
    if l_max >= 3:
        rows += [
            np.stack([_C3[0] * 6.0 * x * y, _C3[0] * (3.0 * x * x - 3.0 * y * y), zero], axis=-1),
            np.stack([_C3[1] * y * z, _C3[1] * x * z, _C3[1] * x * y], axis=-1),
            np.stack([zero, _C3[2] * (5.0 * z * z - 1.0), _C3[2] * 10.0 * y * z], axis=-1),
            np.stack([zero, zero, _C3[3] * (15.0 * z * z - 3.0)], axis=-1),
            np.stack([_C3[4] * (5.0 * z * z - 1.0), zero, _C3[4] * 10.0 * x * z], axis=-1),
            np.stack([_C3[5] * 2.0 * x * z, -_C3[5] * 2.0 * y * z, _C3[5] * (x * x - y * y)], axis=-1),
            np.stack([_C3[6] * (3.0 * x * x - 3.0 * y * y), -_C3[6] * 6.0 * x * y, zero], axis=-1),
        ]
    return np.stack(rows, axis=-2)


@dataclass(frozen=True)
class SH4DCoeffs:
    """Per-Gaussian 4D-SH appearance coefficients.

    ``fr`` holds the cosine-series weights with shape (..., 3, S, w) where
    S = (l_max + 1)^2 SH slots per color channel and ``w`` cosine terms.
    A leading batch dimension packs a whole Gaussian cloud.
    """

    fr: np.ndarray
    l_max: int
    w: int
    n_frames: int

    def __post_init__(self):
        fr = np.asarray(self.fr, dtype=np.float64)
        slots = (self.l_max + 1) ** 2
        if self.w < 1:
            raise ValueError("need at least one cosine term")
        if fr.ndim < 3 or fr.shape[-3:] != (3, slots, self.w):
            raise ValueError(
                f"fr must have trailing shape (3, {slots}, {self.w}), got {fr.shape}"
            )
        if not np.all(np.isfinite(fr)):
            raise ValueError("non-finite SH weights")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        object.__setattr__(self, "fr", fr)

    @staticmethod
    def zeros(l_max: int = 1, w: int = 4, n_frames: int = 1, batch: int | None = None) -> "SH4DCoeffs":
        slots = (l_max + 1) ** 2
        shape = (3, slots, w) if batch is None else (batch, 3, slots, w)
        return SH4DCoeffs(np.zeros(shape), l_max, w, n_frames)

    @staticmethod
    def from_rgb(rgb: np.ndarray, l_max: int = 1, w: int = 4, n_frames: int = 1) -> "SH4DCoeffs":
        """Static degree-0 coefficients whose displayed color is ``rgb``.

        ``rgb`` of shape (3,) or (N, 3); only fr_0 of the l=0 slot is set.
        """
        rgb = np.asarray(rgb, dtype=np.float64)
        batch = None if rgb.ndim == 1 else rgb.shape[0]
        coeffs = SH4DCoeffs.zeros(l_max, w, n_frames, batch)
        coeffs.fr[..., :, 0, 0] = (rgb - 0.5) / _C0
        return coeffs


def fourier_coeff(weights: np.ndarray, t: float, n_frames: int) -> float:
    """Truncated cosine series sum_i fr_i * cos(i*pi*t/n_frames)."""
    weights = np.asarray(weights, dtype=np.float64)
    i = np.arange(weights.shape[-1])
    return float(weights @ np.cos(i * np.pi * t / n_frames))


def _cos_basis(w: int, t: float, n_frames: int) -> np.ndarray:
    return np.cos(np.arange(w) * np.pi * t / n_frames)


def eval_sh_value(coeffs: SH4DCoeffs, psi: float, gamma: float, t: float) -> np.ndarray:
    """Raw (signed, pre-clamp) SH color value at one direction and time."""
    k = coeffs.fr @ _cos_basis(coeffs.w, t, coeffs.n_frames)  # (..., 3, S)
    basis = _basis_table(_angles_to_dir(psi, gamma), coeffs.l_max)  # (S,)
    return k @ basis


def eval_color_4d(coeffs: SH4DCoeffs, psi: float, gamma: float, t: float) -> np.ndarray:
    """Displayed rgb color: clamp(0.5 + raw SH value, 0, 1)."""
    return np.clip(0.5 + eval_sh_value(coeffs, psi, gamma, t), 0.0, 1.0)


def eval_colors_batch(
    fr: np.ndarray, l_max: int, n_frames: int, dirs: np.ndarray, t: float
) -> tuple[np.ndarray, dict]:
    """Vectorized color evaluation for a cloud.

    ``fr`` (N, 3, S, w), ``dirs`` (N, 3) unit directions. Returns clamped
    colors (N, 3) and a cache for :func:`eval_colors_backward`.
    """
    fr = np.asarray(fr, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    cosb = _cos_basis(fr.shape[-1], t, n_frames)
    k = fr @ cosb  # (N, 3, S)
    basis = _basis_table(dirs, l_max)  # (N, S)
    raw = np.einsum("ncs,ns->nc", k, basis)
    shifted = 0.5 + raw
    colors = np.clip(shifted, 0.0, 1.0)
    cache = {
        "fr": fr,
        "k": k,
        "basis": basis,
        "cosb": cosb,
        "dirs": dirs,
        "l_max": l_max,
        "active": (shifted > 0.0) & (shifted < 1.0),
    }
    return colors, cache


def eval_colors_backward(cache: dict, grad_colors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of clamped colors w.r.t. ``fr`` and the unit directions.

    The clamp has subgradient zero outside (0, 1). Returns
    (grad_fr (N,3,S,w), grad_dirs (N,3)).
    """
    g = np.asarray(grad_colors, dtype=np.float64) * cache["active"]
    basis, cosb, k = cache["basis"], cache["cosb"], cache["k"]
    # raw[n,c] = sum_s k[n,c,s] * basis[n,s];  k = fr @ cosb
    grad_k = g[:, :, None] * basis[:, None, :]  # (N, 3, S)
    grad_fr = grad_k[..., None] * cosb  # (N, 3, S, w)
    grad_basis = np.einsum("nc,ncs->ns", g, k)  # (N, S)
    jac = _basis_dir_jacobian(cache["dirs"], cache["l_max"])  # (N, S, 3)
    grad_dirs = np.einsum("ns,nsd->nd", grad_basis, jac)
    return grad_fr, grad_dirs
