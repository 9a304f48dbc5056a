"""Feature-space point tracking and the stage-one auxiliary losses.

Query points live in image pixel coordinates; tracks produced by
:func:`nn_track` live in feature-map texel coordinates. Loss reductions run
in a fixed order (view-major, then frame, then point) so results are
independent of any evaluation parallelism.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import FeatureMap, ImagePlane, bilinear_sample_many, bilinear_scatter, pixel_to_feature_coords
from .errors import ShapeMismatch, ZeroDescriptor

__all__ = [
    "QueryPoint",
    "Track",
    "SimilarityMap",
    "sample_query_grid",
    "select_training_points",
    "cosine_similarity_map",
    "soft_argmax",
    "nn_track",
    "correspondence_loss",
    "correspondence_loss_grad",
    "feature_video_correspondence_loss",
    "huber",
    "position_loss",
    "position_loss_grad",
    "stage_one_objective",
    "write_tracks",
    "read_tracks",
]

_NORM_EPS = 1e-12


@dataclass(frozen=True)
class QueryPoint:
    """A query pixel on the first frame of one view."""

    view: int
    p: np.ndarray  # (2,) continuous pixel coordinate (u, v)

    def __post_init__(self):
        p = np.array(self.p, dtype=np.float64)
        if p.shape != (2,):
            raise ValueError("query coordinate must be a 2-vector")
        p.setflags(write=False)
        object.__setattr__(self, "p", p)


@dataclass
class Track:
    """Per-frame coordinates of one tracked point with visibility flags."""

    points: np.ndarray  # (f, 2)
    visible: np.ndarray  # (f,) bool
    view: int = 0
    point_id: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.visible = np.asarray(self.visible, dtype=bool)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError("track points must be (f, 2)")
        if self.visible.shape != (self.points.shape[0],):
            raise ValueError("visibility flags must match track length")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("non-finite track coordinates")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class SimilarityMap:
    """Hf x Wf cosine similarities, entries in [-1, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("similarity map must be 2-dimensional")
        if v.size and (v.min() < -1.0 - 1e-6 or v.max() > 1.0 + 1e-6):
            raise ValueError("similarities must lie in [-1, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def sample_query_grid(mask: ImagePlane, grid_n: int, view: int = 0) -> list[QueryPoint]:
    """Uniform grid_n x grid_n cell centers, kept where the mask is on.

    Row-major order; a point survives when the mask value at its nearest
    pixel is >= 0.5.
    """
    if grid_n < 1:
        raise ValueError("grid_n must be >= 1")
    if mask.semantics != "alpha":
        raise ValueError("query sampling expects an alpha-tagged mask")
    m = mask.pixels[:, :, 0]
    h, w = m.shape
    points = []
    for gy in range(grid_n):
        v = (gy + 0.5) * h / grid_n
        iy = min(int(v), h - 1)
        for gx in range(grid_n):
            u = (gx + 0.5) * w / grid_n
            ix = min(int(u), w - 1)
            if m[iy, ix] >= 0.5:
                points.append(QueryPoint(view, np.array([u, v])))
    return points


def select_training_points(points: list[QueryPoint], k: int, seed: int) -> list[QueryPoint]:
    """Sample k points without replacement, reproducibly from ``seed``."""
    rng = np.random.Generator(np.random.PCG64(seed))
    if k >= len(points):
        return list(points)
    order = rng.permutation(len(points))[:k]
    return [points[i] for i in order]


def cosine_similarity_map(fm: FeatureMap, d: np.ndarray) -> SimilarityMap:
    """Per-texel cosine similarity against descriptor ``d``.

    Texels with norm <= 1e-12 get similarity 0 by convention; a descriptor
    that small raises :class:`ZeroDescriptor`.
    """
    d = np.asarray(d, dtype=np.float64)
    dn = np.linalg.norm(d)
    if dn <= _NORM_EPS:
        raise ZeroDescriptor("query descriptor has (near-)zero norm")
    norms = np.linalg.norm(fm.data, axis=2)
    dots = fm.data @ d
    with np.errstate(divide="ignore", invalid="ignore"):
        sims = dots / (norms * dn)
    sims[norms <= _NORM_EPS] = 0.0
    return SimilarityMap(np.clip(sims, -1.0, 1.0))


def soft_argmax(sm: SimilarityMap, temperature: float = 0.07) -> np.ndarray:
    """Softmax-weighted expectation of texel coordinates; returns (u, v)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    s = sm.values / temperature
    s = s - s.max()
    w = np.exp(s)
    w /= w.sum()
    h, wdt = sm.values.shape
    us = np.arange(wdt, dtype=np.float64)
    vs = np.arange(h, dtype=np.float64)
    return np.array([w.sum(axis=0) @ us, w.sum(axis=1) @ vs])


def nn_track(
    feature_video: list[FeatureMap],
    q: QueryPoint,
    img_dims: tuple[int, int],
    temperature: float = 0.07,
) -> Track:
    """Track a first-frame query through a feature video.

    The frame-0 descriptor is sampled at the query (mapped into feature
    coordinates and clamped to the valid rectangle); every later frame is
    localized by a soft-argmax over its cosine-similarity map against that
    descriptor. Positions are in feature texel coordinates.
    """
    fm0 = feature_video[0]
    p0 = pixel_to_feature_coords(q.p, img_dims, (fm0.width, fm0.height))
    p0 = np.clip(p0, 0.0, [fm0.width - 1, fm0.height - 1])
    desc = bilinear_sample_many(fm0.data, np.array([p0[1], p0[0]]))
    if np.linalg.norm(desc) <= _NORM_EPS:
        raise ZeroDescriptor("query descriptor has (near-)zero norm")
    points = [p0]
    for fm in feature_video[1:]:
        points.append(soft_argmax(cosine_similarity_map(fm, desc), temperature))
    pts = np.stack(points)
    return Track(pts, np.ones(len(points), dtype=bool), view=q.view)


def _as_descriptor_array(descriptors: np.ndarray) -> np.ndarray:
    d = np.asarray(descriptors, dtype=np.float64)
    if d.ndim == 3:  # (n, f, D) -> one point per view
        d = d[:, None, :, :]
    if d.ndim != 4:
        raise ShapeMismatch("descriptors must be (n, f, D) or (n, P, f, D)")
    return d


def correspondence_loss(descriptors: np.ndarray, visible: np.ndarray | None = None) -> float:
    """Mean cosine dissimilarity of adjacent-frame descriptor pairs.

    ``descriptors`` is (n, f, D) or (n, P, f, D). The sum over the f-1
    adjacent pairs is normalized by n*f (kept literal) and averaged over
    points. Pairs with an invisible endpoint are dropped without changing
    the normalization.
    """
    loss, _ = correspondence_loss_grad(descriptors, visible)
    return loss


def correspondence_loss_grad(
    descriptors: np.ndarray, visible: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Correspondence loss plus its gradient w.r.t. the descriptors."""
    d = _as_descriptor_array(descriptors)
    n, P, f, _ = d.shape
    if visible is None:
        vis = np.ones((n, P, f), dtype=bool)
    else:
        vis = np.asarray(visible, dtype=bool)
        if vis.ndim == 2:
            vis = vis[:, None, :]
        if vis.shape != (n, P, f):
            raise ShapeMismatch("visibility flags must match descriptor layout")
    norms = np.linalg.norm(d, axis=3)
    if np.any(norms <= _NORM_EPS):
        raise ZeroDescriptor("descriptor with (near-)zero norm")
    grad = np.zeros_like(d)
    total = 0.0
    denom = n * f * P
    for i in range(n):
        for p in range(P):
            for j in range(f - 1):
                if not (vis[i, p, j] and vis[i, p, j + 1]):
                    continue
                a, b = d[i, p, j], d[i, p, j + 1]
                na, nb = norms[i, p, j], norms[i, p, j + 1]
                cos = float(a @ b) / (na * nb)
                total += 1.0 - cos
                # d(1 - cos)/da = -(b/(na*nb) - cos * a/na^2)
                grad[i, p, j] -= (b / (na * nb) - cos * a / (na * na)) / denom
                grad[i, p, j + 1] -= (a / (na * nb) - cos * b / (nb * nb)) / denom
    if np.asarray(descriptors).ndim == 3:
        grad = grad[:, 0]
    return total / denom, grad


def feature_video_correspondence_loss(
    maps: np.ndarray, track_points: np.ndarray
) -> tuple[float, np.ndarray]:
    """Correspondence loss of descriptors sampled along a fixed track,
    differentiated w.r.t. the feature video itself.

    ``maps`` is (f, H, W, D); ``track_points`` is (f, 2) in texel coords.
    Returns (loss, grad_maps of the same shape). Used to drive gradient
    descent on a learnable feature video.
    """
    maps = np.asarray(maps, dtype=np.float64)
    pts = np.asarray(track_points, dtype=np.float64)
    f = maps.shape[0]
    if pts.shape != (f, 2):
        raise ShapeMismatch("track must supply one coordinate per frame")
    coords = np.stack([pts[:, 1], pts[:, 0]], axis=1)  # (f, 2) as (row, col)
    descs = np.stack([bilinear_sample_many(maps[j], coords[j]) for j in range(f)])
    loss, gdesc = correspondence_loss_grad(descs[None, :, :])
    grad_maps = np.zeros_like(maps)
    for j in range(f):
        grad_maps[j] = bilinear_scatter(gdesc[0, j], maps[j].shape, coords[j])
    return loss, grad_maps


def huber(r: float, delta: float) -> float:
    """Huber penalty of a scalar residual magnitude."""
    r = abs(float(r))
    if r <= delta:
        return 0.5 * r * r
    return delta * (r - 0.5 * delta)


def _check_position_args(tracked, predicted, visible):
    p = np.asarray(tracked, dtype=np.float64)
    q = np.asarray(predicted, dtype=np.float64)
    if p.ndim == 3:
        p = p[:, None]
    if q.ndim == 3:
        q = q[:, None]
    if p.shape != q.shape or p.ndim != 4 or p.shape[-1] != 2:
        raise ShapeMismatch(f"tracked {np.shape(tracked)} vs predicted {np.shape(predicted)}")
    n, P, f, _ = p.shape
    if visible is None:
        vis = np.ones((n, P, f), dtype=bool)
    else:
        vis = np.asarray(visible, dtype=bool)
        if vis.ndim == 2:
            vis = vis[:, None, :]
        if vis.shape != (n, P, f):
            raise ShapeMismatch("visibility flags must match track layout")
    return p, q, vis


def position_loss(
    tracked: np.ndarray,
    predicted: np.ndarray,
    delta: float = 1.0,
    visible: np.ndarray | None = None,
) -> float:
    """Huber penalty on tracked-vs-predicted residual norms, frames >= 1.

    Inputs are (n, f, 2) or (n, P, f, 2). The sum over frames 1..f-1 is
    normalized by n*f (kept literal) and averaged over points; invisible
    frames are dropped with the normalization unchanged.
    """
    loss, _ = position_loss_grad(tracked, predicted, delta, visible)
    return loss


def position_loss_grad(
    tracked: np.ndarray,
    predicted: np.ndarray,
    delta: float = 1.0,
    visible: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Position loss plus its gradient w.r.t. the predicted positions."""
    p, q, vis = _check_position_args(tracked, predicted, visible)
    n, P, f, _ = p.shape
    denom = n * f * P
    grad = np.zeros_like(q)
    total = 0.0
    for i in range(n):
        for k in range(P):
            for j in range(1, f):
                if not vis[i, k, j]:
                    continue
                res = p[i, k, j] - q[i, k, j]
                r = float(np.linalg.norm(res))
                total += huber(r, delta)
                if r > 0:
                    scale = 1.0 if r <= delta else delta / r
                    grad[i, k, j] = -scale * res / denom
    grad = grad if np.asarray(tracked).ndim == 4 else grad[:, 0]
    return total / denom, grad


def stage_one_objective(
    l_diff: float, l_corr: float, l_pos: float, lam1: float, lam2: float, lam3: float
) -> float:
    """Weighted stage-one objective lam1*L_diff + lam2*L_corr + lam3*L_pos."""
    if min(lam1, lam2, lam3) < 0:
        raise ValueError("loss weights must be non-negative")
    return lam1 * l_diff + lam2 * l_corr + lam3 * l_pos


def write_tracks(tracks: list[Track], path) -> None:
    """Plain-text track records: header "view point_id" then one
    "j u v visible" line per frame. LF line endings."""
    lines = []
    for tr in tracks:
        lines.append(f"{tr.view} {tr.point_id}")
        for j in range(len(tr)):
            u, v = tr.points[j]
            lines.append(f"{j} {float(u)!r} {float(v)!r} {int(tr.visible[j])}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_tracks(path) -> list[Track]:
    """Inverse of :func:`write_tracks`."""
    tracks: list[Track] = []
    with open(path) as fh:
        tokens = [ln.split() for ln in fh if ln.strip()]
    i = 0
    while i < len(tokens):
        view, point_id = int(tokens[i][0]), int(tokens[i][1])
        i += 1
        pts, vis = [], []
        while i < len(tokens) and len(tokens[i]) == 4:
            _, u, v, flag = tokens[i]
            pts.append([float(u), float(v)])
            vis.append(bool(int(flag)))
            i += 1
        tracks.append(Track(np.array(pts), np.array(vis), view=view, point_id=point_id))
    return tracks
