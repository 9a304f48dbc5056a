"""Geometric and tensor primitives: cameras, Gaussians, images, sampling.

Conventions used throughout the toolkit:

- all arithmetic in float64;
- quaternions ordered (w, x, y, z);
- continuous image coordinates ``(u, v)`` with ``u`` along width; integer
  pixel (i, j) has its center at (i + 0.5, j + 0.5);
- feature maps address texel centers at integer coordinates, so the valid
  sampling rectangle of an Hf x Wf map is [0, Wf-1] x [0, Hf-1];
- frames and views are zero-based.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .appearance import SH4DCoeffs
from .errors import OutOfBounds, PointBehindCamera

__all__ = [
    "Camera",
    "Gaussian3D",
    "GaussianCloud",
    "Gaussian4DState",
    "DeformedGaussian",
    "DeformedGaussians",
    "ImagePlane",
    "FeatureMap",
    "project_point",
    "project_points",
    "unproject_point",
    "bilinear_sample",
    "bilinear_sample_many",
    "bilinear_scatter",
    "pixel_to_feature_coords",
    "feature_to_pixel_coords",
    "compose_rotation",
    "compose_scale",
    "quat_normalize",
    "quat_multiply",
    "quat_to_rotmat",
    "look_at_extrinsics",
]

_DEPTH_EPS = 1e-6
_SCALE_FLOOR = 1e-6


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics ``K`` (3x3), world-to-camera ``E`` (4x4)."""

    K: np.ndarray
    E: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = _freeze(self.K)
        E = _freeze(self.E)
        if K.shape != (3, 3) or E.shape != (4, 4):
            raise ValueError("K must be 3x3 and E must be 4x4")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if np.max(np.abs(K[2] - np.array([0.0, 0.0, 1.0]))) > 1e-12:
            raise ValueError("last row of K must be [0, 0, 1] (pinhole)")
        R = E[:3, :3]
        if np.max(np.abs(R.T @ R - np.eye(3))) >= 1e-6:
            raise ValueError("rotation block of E is not orthonormal")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "E", E)

    @property
    def rotation(self) -> np.ndarray:
        return self.E[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.E[:3, 3]

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def rescaled(self, width: int, height: int) -> "Camera":
        """Same pose, intrinsics rescaled to a new pixel grid."""
        sx, sy = width / self.width, height / self.height
        K = self.K.copy()
        # pixel-center-preserving rescale of the intrinsic grid
        K[0, :] *= sx
        K[1, :] *= sy
        return Camera(K, self.E, width, height)


def project_points(cam: Camera, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized perspective projection.

    Returns (uv (N, 2), depth (N,)); callers must mask depth <= eps
    themselves (no exception is raised here).
    """
    xs = np.asarray(xs, dtype=np.float64)
    cam_pts = xs @ cam.rotation.T + cam.translation
    depth = cam_pts[:, 2]
    proj = cam_pts @ cam.K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = proj[:, :2] / proj[:, 2:3]
    return uv, depth


def project_point(cam: Camera, x: np.ndarray) -> tuple[float, float, float]:
    """Project a world point; returns (u, v, depth).

    Raises :class:`PointBehindCamera` when the camera-space depth is at or
    below 1e-6.
    """
    uv, depth = project_points(cam, np.asarray(x, dtype=np.float64)[None, :])
    if depth[0] <= _DEPTH_EPS:
        raise PointBehindCamera(f"depth {depth[0]:g} <= {_DEPTH_EPS:g}")
    return float(uv[0, 0]), float(uv[0, 1]), float(depth[0])


def unproject_point(cam: Camera, u: float, v: float, depth: float) -> np.ndarray:
    """Exact inverse of :func:`project_point` at the returned depth."""
    ray = np.linalg.solve(cam.K, np.array([u, v, 1.0]))
    cam_pt = ray / ray[2] * depth
    return cam.rotation.T @ (cam_pt - cam.translation)


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from quaternion(s) (..., 4); normalizes internally."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product q1 * q2 for (..., 4) quaternions (w, x, y, z)."""
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    w1, x1, y1, z1 = q1[..., 0], q1[..., 1], q1[..., 2], q1[..., 3]
    w2, x2, y2, z2 = q2[..., 0], q2[..., 1], q2[..., 2], q2[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def compose_rotation(r: np.ndarray, dr: np.ndarray) -> np.ndarray:
    """Additive rotation update, renormalized to unit length."""
    return quat_normalize(np.asarray(r, dtype=np.float64) + np.asarray(dr, dtype=np.float64))


def compose_scale(s: np.ndarray, ds: np.ndarray) -> np.ndarray:
    """Additive scale update, clamped to stay strictly positive."""
    return np.maximum(np.asarray(s, dtype=np.float64) + np.asarray(ds, dtype=np.float64), _SCALE_FLOOR)


@dataclass(frozen=True)
class Gaussian3D:
    """One canonical Gaussian: position, 4D-SH color, opacity, rotation, scale."""

    position: np.ndarray
    sh4d: SH4DCoeffs
    opacity: float
    rotation: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        pos = _freeze(self.position)
        rot = _freeze(self.rotation)
        scale = _freeze(self.scale)
        if pos.shape != (3,) or rot.shape != (4,) or scale.shape != (3,):
            raise ValueError("position/scale must be 3-vectors, rotation a quaternion")
        if abs(np.linalg.norm(rot) - 1.0) > 1e-6:
            raise ValueError("rotation quaternion must be unit length")
        if np.any(scale <= 0):
            raise ValueError("scale components must be strictly positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity must lie in [0, 1]")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "scale", scale)


@dataclass
class GaussianCloud:
    """Packed canonical Gaussian set (the workhorse batched layout)."""

    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) unit quaternions
    scales: np.ndarray  # (N, 3) strictly positive
    opacities: np.ndarray  # (N,) in [0, 1]
    sh: SH4DCoeffs  # batched, fr shape (N, 3, S, w)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.scales = np.asarray(self.scales, dtype=np.float64)
        self.opacities = np.asarray(self.opacities, dtype=np.float64)
        n = self.positions.shape[0]
        if (
            self.positions.shape != (n, 3)
            or self.rotations.shape != (n, 4)
            or self.scales.shape != (n, 3)
            or self.opacities.shape != (n,)
            or self.sh.fr.shape[0] != n
        ):
            raise ValueError("inconsistent cloud array shapes")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            self.positions[i],
            SH4DCoeffs(self.sh.fr[i], self.sh.l_max, self.sh.w, self.sh.n_frames),
            float(self.opacities[i]),
            self.rotations[i],
            self.scales[i],
        )

    @staticmethod
    def from_gaussians(gaussians: list[Gaussian3D]) -> "GaussianCloud":
        sh0 = gaussians[0].sh4d
        return GaussianCloud(
            np.stack([g.position for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            np.stack([g.scale for g in gaussians]),
            np.array([g.opacity for g in gaussians]),
            SH4DCoeffs(np.stack([g.sh4d.fr for g in gaussians]), sh0.l_max, sh0.w, sh0.n_frames),
        )

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.positions.min(axis=0), self.positions.max(axis=0)

    def extent(self) -> float:
        lo, hi = self.bounding_box()
        return float(np.linalg.norm(hi - lo))


@dataclass
class Gaussian4DState:
    """Canonical set plus per-Gaussian deltas at an integer frame time."""

    base: GaussianCloud
    dx: np.ndarray  # (N, 3)
    drot: np.ndarray  # (N, 4)
    dscale: np.ndarray  # (N, 3)
    t: int

    def __post_init__(self):
        n = len(self.base)
        self.dx = np.asarray(self.dx, dtype=np.float64)
        self.drot = np.asarray(self.drot, dtype=np.float64)
        self.dscale = np.asarray(self.dscale, dtype=np.float64)
        if self.dx.shape != (n, 3) or self.drot.shape != (n, 4) or self.dscale.shape != (n, 3):
            raise ValueError("delta arrays must match the base cloud size")
        if not 0 <= self.t < self.base.sh.n_frames:
            raise ValueError("frame time outside [0, n_frames)")

    @staticmethod
    def rest(base: GaussianCloud, t: int = 0) -> "Gaussian4DState":
        n = len(base)
        return Gaussian4DState(base, np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), t)

    def positions(self) -> np.ndarray:
        return self.base.positions + self.dx

    def rotations(self) -> np.ndarray:
        return compose_rotation(self.base.rotations, self.drot)

    def scales(self) -> np.ndarray:
        return compose_scale(self.base.scales, self.dscale)


@dataclass(frozen=True)
class DeformedGaussian:
    """One Gaussian after applying per-frame deltas and time-varying color."""

    position: np.ndarray
    color: np.ndarray
    opacity: float
    rotation: np.ndarray
    scale: np.ndarray


@dataclass
class DeformedGaussians:
    """Packed deformed set with per-Gaussian colors, ready to splat."""

    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4)
    scales: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,)
    colors: np.ndarray  # (N, C)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.scales = np.asarray(self.scales, dtype=np.float64)
        self.opacities = np.asarray(self.opacities, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        n = self.positions.shape[0]
        if (
            self.rotations.shape != (n, 4)
            or self.scales.shape != (n, 3)
            or self.opacities.shape != (n,)
            or self.colors.shape[0] != n
        ):
            raise ValueError("inconsistent deformed-set array shapes")

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class ImagePlane:
    """H x W x C raster with a channel-semantics tag."""

    pixels: np.ndarray
    semantics: str  # rgb | alpha | depth | feature

    def __post_init__(self):
        px = _freeze(self.pixels)
        if px.ndim != 3:
            raise ValueError("pixels must be H x W x C")
        if not np.all(np.isfinite(px)):
            raise ValueError("non-finite pixel values")
        if self.semantics not in ("rgb", "alpha", "depth", "feature"):
            raise ValueError(f"unknown semantics {self.semantics!r}")
        if self.semantics == "rgb" and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("rgb channels must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class FeatureMap:
    """Hf x Wf x D descriptor raster tied to a (view, frame) pair."""

    data: np.ndarray
    frame: int = 0
    view: int = 0

    def __post_init__(self):
        data = _freeze(self.data)
        if data.ndim != 3 or data.shape[2] < 1:
            raise ValueError("data must be Hf x Wf x D with D >= 1")
        if not np.all(np.isfinite(data)):
            raise ValueError("non-finite feature values")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def depth(self) -> int:
        return self.data.shape[2]


def _bilinear_corners(pa: np.ndarray, pb: np.ndarray, na: int, nb: int):
    """Corner indices and weights for sampling axis0 at pa, axis1 at pb."""
    a0 = np.clip(np.floor(pa).astype(np.int64), 0, max(na - 2, 0))
    b0 = np.clip(np.floor(pb).astype(np.int64), 0, max(nb - 2, 0))
    fa = pa - a0
    fb = pb - b0
    a1 = np.minimum(a0 + 1, na - 1)
    b1 = np.minimum(b0 + 1, nb - 1)
    w00 = (1 - fa) * (1 - fb)
    w01 = (1 - fa) * fb
    w10 = fa * (1 - fb)
    w11 = fa * fb
    return (a0, b0, a1, b1), (w00, w01, w10, w11), (fa, fb)


def bilinear_sample_many(data: np.ndarray, ps: np.ndarray) -> np.ndarray:
    """Bilinear samples of an (A, B, D) array at (..., 2) coords (pa, pb).

    No bounds checking; callers clamp or validate.
    """
    data = np.asarray(data, dtype=np.float64)
    ps = np.asarray(ps, dtype=np.float64)
    (a0, b0, a1, b1), (w00, w01, w10, w11), _ = _bilinear_corners(
        ps[..., 0], ps[..., 1], data.shape[0], data.shape[1]
    )
    return (
        w00[..., None] * data[a0, b0]
        + w01[..., None] * data[a0, b1]
        + w10[..., None] * data[a1, b0]
        + w11[..., None] * data[a1, b1]
    )


def bilinear_scatter(grad: np.ndarray, shape: tuple[int, int, int], ps: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`bilinear_sample_many`: scatter (..., D) grads back
    into a zero (A, B, D) array at coords (..., 2)."""
    out = np.zeros(shape, dtype=np.float64)
    ps = np.asarray(ps, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    (a0, b0, a1, b1), (w00, w01, w10, w11), _ = _bilinear_corners(
        ps[..., 0], ps[..., 1], shape[0], shape[1]
    )
    np.add.at(out, (a0, b0), w00[..., None] * grad)
    np.add.at(out, (a0, b1), w01[..., None] * grad)
    np.add.at(out, (a1, b0), w10[..., None] * grad)
    np.add.at(out, (a1, b1), w11[..., None] * grad)
    return out


def bilinear_sample(fmap: FeatureMap, p: np.ndarray) -> np.ndarray:
    """Bilinear blend of the four texels around continuous coord ``p=(u,v)``.

    ``u`` addresses columns, ``v`` rows; texel centers sit at integers.
    Raises :class:`OutOfBounds` outside [0, Wf-1] x [0, Hf-1].
    """
    u, v = float(p[0]), float(p[1])
    if not (0.0 <= u <= fmap.width - 1 and 0.0 <= v <= fmap.height - 1):
        raise OutOfBounds(f"({u:g}, {v:g}) outside [0, {fmap.width - 1}] x [0, {fmap.height - 1}]")
    return bilinear_sample_many(fmap.data, np.array([v, u]))


def pixel_to_feature_coords(
    p_img: np.ndarray, img_dims: tuple[int, int], feat_dims: tuple[int, int]
) -> np.ndarray:
    """Affine rescale from image pixel coords to feature texel coords.

    Preserves pixel-center alignment: p_feat = (p_img + 0.5) * feat/img - 0.5
    per axis. ``img_dims`` and ``feat_dims`` are (width, height).
    """
    p = np.asarray(p_img, dtype=np.float64)
    scale = np.array([feat_dims[0] / img_dims[0], feat_dims[1] / img_dims[1]])
    return (p + 0.5) * scale - 0.5


def feature_to_pixel_coords(
    p_feat: np.ndarray, img_dims: tuple[int, int], feat_dims: tuple[int, int]
) -> np.ndarray:
    """Inverse of :func:`pixel_to_feature_coords`."""
    p = np.asarray(p_feat, dtype=np.float64)
    scale = np.array([img_dims[0] / feat_dims[0], img_dims[1] / feat_dims[1]])
    return (p + 0.5) * scale - 0.5


def look_at_extrinsics(eye: np.ndarray, target: np.ndarray, up: np.ndarray | None = None) -> np.ndarray:
    """World-to-camera 4x4 for a camera at ``eye`` looking at ``target``.

    Camera axes: +z forward (into the scene), +x right, +y down, matching
    the projection convention used by :func:`project_point`.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.array([0.0, 0.0, 1.0]) if up is None else np.asarray(up, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-12:  # looking straight along up: pick another reference
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    E = np.eye(4)
    E[:3, :3] = R
    E[:3, 3] = -R @ eye
    return E
