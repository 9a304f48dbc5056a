"""Synthetic ground-truth scenes, dataset rendering, metrics, and file I/O.

Procedural objects (a Gaussian-sampled sphere shell, a two-blob articulated
pair, a ring) move under closed-form motion presets, so every downstream
quantity (renders, masks, feature maps, point tracks, trajectories) has an
exact oracle. Feature maps are produced by rendering fixed per-Gaussian
random unit descriptors through the same splatter, which gives surface
points stable descriptors across frames.

Dataset directory layout (all formats bit-deterministic):

    cam_{i}/frame_{j}.png       quantized render for inspection
    cam_{i}/frame_{j}.imgf      exact float render
    cam_{i}/mask_{j}.imgf       accumulated alpha
    cam_{i}/feat_{j}.imgf       descriptor map
    cameras.csv                 view, width, height, K (9), E (16)
    tracks.txt                  ground-truth query tracks
    gt_motion.csv               frame, gaussian, x, y, z
    canonical.bin               packed canonical Gaussian cloud
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .appearance import SH4DCoeffs, eval_colors_batch
from .core import (
    Camera,
    DeformedGaussians,
    FeatureMap,
    GaussianCloud,
    ImagePlane,
    bilinear_sample_many,
    look_at_extrinsics,
    pixel_to_feature_coords,
    project_points,
    quat_multiply,
    quat_normalize,
)
from .errors import ShapeMismatch
from .imgio import read_imgf, write_imgf, write_png
from .motionfield import FeatureVideo
from .splatter import project_gaussians, rasterize
from .trackmath import (
    QueryPoint,
    Track,
    correspondence_loss,
    nn_track,
    read_tracks,
    sample_query_grid,
    select_training_points,
    write_tracks,
)

__all__ = [
    "SceneSpec",
    "GroundTruthMotion",
    "Dataset",
    "synth_scene",
    "make_cameras",
    "render_dataset",
    "eval_metrics",
    "track_drift",
    "track_feature_coords",
    "gt_track_correspondence_loss",
    "save_dataset",
    "load_dataset",
    "write_canonical",
    "read_canonical",
    "psnr",
]

OBJECT_PRESETS = ("sphere-shell", "two-blob", "ring")
MOTION_PRESETS = ("static", "rigid-translate", "rigid-rotate", "two-part", "sinusoidal-bend")

_GCLD_MAGIC = b"GCLD"


@dataclass
class SceneSpec:
    """Recipe for one synthetic scene; everything derives from it + seed."""

    object_preset: str = "sphere-shell"
    n_gaussians: int = 64
    motion_preset: str = "rigid-translate"
    amplitude: float = 0.5
    n_frames: int = 16
    n_views: int = 4
    cam_radius: float = 4.0
    cam_elevation_deg: float = 20.0
    fov_deg: float = 50.0
    image_size: int = 64
    feature_mode: str = "rendered-descriptor"
    feature_dim: int = 8
    feature_size: int = 0  # 0 -> image_size // 4
    feature_scale_boost: float = 2.0  # widens splats on the coarse feature raster
    gaussian_scale: float = 0.0  # 0 -> preset default
    opacity: float = 0.95
    sh_l_max: int = 1
    sh_w: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.object_preset not in OBJECT_PRESETS:
            raise ValueError(f"unknown object preset {self.object_preset!r}")
        if self.motion_preset not in MOTION_PRESETS:
            raise ValueError(f"unknown motion preset {self.motion_preset!r}")
        if self.feature_mode not in ("rendered-descriptor", "loaded-from-file"):
            raise ValueError(f"unknown feature mode {self.feature_mode!r}")
        if min(self.n_gaussians, self.n_frames, self.n_views, self.image_size) < 1:
            raise ValueError("counts must be >= 1")
        if not np.isfinite(self.amplitude):
            raise ValueError("amplitude must be finite")

    @property
    def feat_size(self) -> int:
        return self.feature_size if self.feature_size > 0 else max(4, self.image_size // 4)


@dataclass
class GroundTruthMotion:
    """Closed-form per-Gaussian rigid/articulated motion."""

    preset: str
    amplitude: float
    n_frames: int
    parts: np.ndarray  # (N,) int: which moving part each Gaussian belongs to
    height_factor: np.ndarray  # (N,) in [0, 1], for the bend preset

    def _tau(self, t: float) -> float:
        return t / (self.n_frames - 1) if self.n_frames > 1 else 0.0

    def pose(self, base: GaussianCloud, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Exact (positions (N,3), rotations (N,4)) at frame time t."""
        tau = self._tau(t)
        pos = base.positions.copy()
        rot = base.rotations.copy()
        if self.preset == "static":
            return pos, rot
        if self.preset == "rigid-translate":
            pos[:, 0] += self.amplitude * tau
            return pos, rot
        if self.preset == "rigid-rotate":
            return self._rotate_z(pos, rot, self.amplitude * tau, np.ones(len(pos), dtype=bool))
        if self.preset == "two-part":
            moving = self.parts == 1
            return self._rotate_z(pos, rot, self.amplitude * tau, moving)
        # sinusoidal-bend: height-weighted shear along x
        pos[:, 0] += self.amplitude * np.sin(2.0 * np.pi * tau) * self.height_factor
        return pos, rot

    @staticmethod
    def _rotate_z(pos, rot, angle, mask):
        c, s = np.cos(angle), np.sin(angle)
        Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        qz = np.array([np.cos(angle / 2), 0.0, 0.0, np.sin(angle / 2)])
        pos[mask] = pos[mask] @ Rz.T
        rot[mask] = quat_normalize(quat_multiply(qz, rot[mask]))
        return pos, rot

    def positions(self, base: GaussianCloud, t: float) -> np.ndarray:
        return self.pose(base, t)[0]


def _preset_sigma(spec: SceneSpec) -> float:
    if spec.gaussian_scale > 0:
        return spec.gaussian_scale
    return 1.6 / np.sqrt(spec.n_gaussians)


def synth_scene(spec: SceneSpec) -> tuple[GaussianCloud, GroundTruthMotion]:
    """Deterministically synthesize a canonical cloud and its motion."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    n = spec.n_gaussians
    sigma = _preset_sigma(spec)
    parts = np.zeros(n, dtype=np.int64)
    if spec.object_preset == "sphere-shell":
        v = rng.standard_normal((n, 3))
        positions = v / np.linalg.norm(v, axis=1, keepdims=True)
    elif spec.object_preset == "two-blob":
        half = n // 2
        parts[half:] = 1
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        positions = 0.55 * v
        positions[:half, 0] -= 0.7
        positions[half:, 0] += 0.7
    else:  # ring
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        jitter = sigma * rng.standard_normal((n, 3))
        positions = np.stack([np.cos(theta), np.sin(theta), np.zeros(n)], axis=1) + jitter

    rotations = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1))
    scales = np.full((n, 3), sigma)
    opacities = np.full(n, spec.opacity)
    rgb = rng.uniform(0.25, 0.85, size=(n, 3))
    sh = SH4DCoeffs.from_rgb(rgb, l_max=spec.sh_l_max, w=spec.sh_w, n_frames=spec.n_frames)
    cloud = GaussianCloud(positions, rotations, scales, opacities, sh)

    z = positions[:, 2]
    zrange = z.max() - z.min()
    height = (z - z.min()) / zrange if zrange > 1e-9 else np.ones(n)
    motion = GroundTruthMotion(spec.motion_preset, spec.amplitude, spec.n_frames, parts, height)
    return cloud, motion


def make_cameras(spec: SceneSpec) -> tuple[Camera, ...]:
    """Ring of cameras looking at the origin."""
    size = spec.image_size
    f = 0.5 * size / np.tan(np.deg2rad(spec.fov_deg) / 2.0)
    K = np.array([[f, 0.0, size / 2.0], [0.0, f, size / 2.0], [0.0, 0.0, 1.0]])
    elev = np.deg2rad(spec.cam_elevation_deg)
    cams = []
    for i in range(spec.n_views):
        az = 2.0 * np.pi * i / spec.n_views
        eye = spec.cam_radius * np.array(
            [np.cos(elev) * np.cos(az), np.cos(elev) * np.sin(az), np.sin(elev)]
        )
        cams.append(Camera(K, look_at_extrinsics(eye, np.zeros(3)), size, size))
    return tuple(cams)


@dataclass
class Dataset:
    """Rendered multi-view video with every ground-truth quantity."""

    images: np.ndarray  # (n, f, H, W, 3)
    masks: np.ndarray  # (n, f, H, W)
    feats: np.ndarray  # (n, f, Hf, Wf, D)
    cameras: tuple[Camera, ...]
    gt_positions: np.ndarray  # (f, N, 3)
    tracks: list[Track]
    canonical: GaussianCloud

    @property
    def n_views(self) -> int:
        return self.images.shape[0]

    @property
    def n_frames(self) -> int:
        return self.images.shape[1]

    def feature_video(self) -> FeatureVideo:
        return FeatureVideo(self.feats, self.cameras)

    def subset_views(self, views: list[int]) -> "Dataset":
        """Restricted dataset (e.g. to hold out evaluation views)."""
        remap = {v: i for i, v in enumerate(views)}
        tracks = [
            Track(t.points, t.visible, view=remap[t.view], point_id=t.point_id)
            for t in self.tracks
            if t.view in remap
        ]
        return Dataset(
            self.images[views],
            self.masks[views],
            self.feats[views],
            tuple(self.cameras[v] for v in views),
            self.gt_positions,
            tracks,
            self.canonical,
        )


def _pose_splats(cloud: GaussianCloud, positions, rotations, colors) -> DeformedGaussians:
    return DeformedGaussians(positions, rotations, cloud.scales, cloud.opacities, colors)


def render_dataset(
    cloud: GaussianCloud, motion: GroundTruthMotion, spec: SceneSpec
) -> Dataset:
    """Render rgb/mask/feature videos and exact tracks for every view."""
    cams = make_cameras(spec)
    n, f = spec.n_views, spec.n_frames
    size, fsize = spec.image_size, spec.feat_size
    rng = np.random.Generator(np.random.PCG64(spec.seed + 1))
    desc = rng.standard_normal((len(cloud), spec.feature_dim))
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)

    images = np.zeros((n, f, size, size, 3))
    masks = np.zeros((n, f, size, size))
    feats = np.zeros((n, f, fsize, fsize, spec.feature_dim))
    hit_maps = np.zeros((n, f, size, size))

    for t in range(f):
        positions, rotations = motion.pose(cloud, t)
        for i, cam in enumerate(cams):
            vecs = positions - cam.center()
            dirs = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
            colors, _ = eval_colors_batch(cloud.sh.fr, cloud.sh.l_max, cloud.sh.n_frames, dirs, float(t))
            dg = _pose_splats(cloud, positions, rotations, colors)
            m2, c2, dep, valid, _ = project_gaussians(dg.positions, dg.rotations, dg.scales, cam)
            idx = np.nonzero(valid)[0]
            out, hit, _ = rasterize(
                m2[idx], c2[idx], dep[idx], colors[idx], cloud.opacities[idx],
                size, size, want_hit_depth=True,
            )
            images[i, t] = out.color
            masks[i, t] = out.alpha
            hit_maps[i, t] = hit
            if spec.feature_mode == "rendered-descriptor":
                fcam = cam.rescaled(fsize, fsize)
                # widen footprints so sub-texel splats do not alias the
                # coarse descriptor raster
                fm2, fc2, fdep, fvalid, _ = project_gaussians(
                    dg.positions, dg.rotations, dg.scales * spec.feature_scale_boost, fcam
                )
                fidx = np.nonzero(fvalid)[0]
                fout, _, _ = rasterize(
                    fm2[fidx], fc2[fidx], fdep[fidx], desc[fidx], cloud.opacities[fidx],
                    fsize, fsize,
                )
                feats[i, t] = fout.color

    gt_positions = np.stack([motion.positions(cloud, t) for t in range(f)])
    tracks = _ground_truth_tracks(cloud, motion, spec, cams, masks, hit_maps)
    return Dataset(images, masks, feats, cams, gt_positions, tracks, cloud)


def _ground_truth_tracks(cloud, motion, spec, cams, masks, hit_maps) -> list[Track]:
    """Grid-sampled queries snapped to their nearest visible Gaussian, then
    projected through every frame with per-frame visibility flags."""
    lo, hi = cloud.bounding_box()
    tol = 0.01 * float(np.linalg.norm(hi - lo)) + 1e-9
    f = spec.n_frames
    tracks = []
    pos0, _ = motion.pose(cloud, 0)
    for i, cam in enumerate(cams):
        mask_img = ImagePlane(masks[i, 0][:, :, None], "alpha")
        queries = sample_query_grid(mask_img, 15, view=i)
        chosen = select_training_points(queries, 8, spec.seed + 17 * i)
        uv0, dep0 = project_points(cam, pos0)
        vis0 = _visible(uv0, dep0, hit_maps[i, 0], cam, tol)
        cand = np.nonzero(vis0)[0]
        if cand.size == 0:
            continue
        for pid, q in enumerate(chosen):
            d2 = np.sum((uv0[cand] - q.p) ** 2, axis=1)
            g = int(cand[int(np.argmin(d2))])
            pts = np.zeros((f, 2))
            flags = np.zeros(f, dtype=bool)
            for t in range(f):
                pos_t = motion.positions(cloud, t)
                uvt, dept = project_points(cam, pos_t[g][None])
                pts[t] = uvt[0]
                flags[t] = _visible(uvt, dept, hit_maps[i, t], cam, tol)[0]
            tracks.append(Track(pts, flags, view=i, point_id=pid))
    return tracks


def _visible(uv, depth, hit_map, cam, tol) -> np.ndarray:
    ix = np.clip(np.floor(uv[:, 0]).astype(np.int64), 0, cam.width - 1)
    iy = np.clip(np.floor(uv[:, 1]).astype(np.int64), 0, cam.height - 1)
    inside = (
        (depth > 1e-6)
        & (uv[:, 0] >= 0)
        & (uv[:, 0] <= cam.width)
        & (uv[:, 1] >= 0)
        & (uv[:, 1] <= cam.height)
    )
    occ = np.where(inside, hit_map[iy, ix], np.inf)
    return inside & (depth <= occ + tol)


def psnr(a: np.ndarray, b: np.ndarray, cap: float = 99.0) -> float:
    """Peak signal-to-noise ratio of [0, 1] images, capped at 99 dB."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse <= 10.0 ** (-cap / 10.0):
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def eval_metrics(
    renders: np.ndarray,
    dataset: Dataset,
    trained_positions: np.ndarray | None = None,
    temperature: float = 0.01,
) -> dict:
    """Reconstruction/tracking quality report against the ground truth.

    Track drift compares displacement relative to the first soft-argmax
    frame, so a constant localization bias cancels and a static scene
    scores exactly zero.
    """
    renders = np.asarray(renders, dtype=np.float64)
    if renders.shape != dataset.images.shape:
        raise ShapeMismatch(f"renders {renders.shape} vs dataset {dataset.images.shape}")
    n = dataset.n_views
    report: dict = {}
    report["psnr"] = [psnr(renders[i], dataset.images[i]) for i in range(n)]
    masked = []
    for i in range(n):
        sel = dataset.masks[i] > 0.5
        if not np.any(sel):
            masked.append(99.0)
            continue
        mse = float(np.mean((renders[i][sel] - dataset.images[i][sel]) ** 2))
        masked.append(99.0 if mse <= 1e-10 else min(99.0, 10.0 * np.log10(1.0 / mse)))
    report["masked_psnr"] = masked
    report["psnr_mean"] = float(np.mean(report["psnr"]))
    report["masked_psnr_mean"] = float(np.mean(masked))

    if trained_positions is not None:
        err = np.linalg.norm(trained_positions - dataset.gt_positions, axis=2)
        report["traj_err"] = float(np.mean(err))
        extent = dataset.canonical.extent()
        report["traj_err_pct"] = 100.0 * report["traj_err"] / extent if extent > 0 else 0.0

    report["track_drift"] = track_drift(dataset, temperature)
    report["corr_loss_gt"] = gt_track_correspondence_loss(dataset)
    return report


def track_feature_coords(dataset: Dataset, tr: Track) -> np.ndarray:
    cam = dataset.cameras[tr.view]
    hf, wf = dataset.feats.shape[2], dataset.feats.shape[3]
    return pixel_to_feature_coords(tr.points, (cam.width, cam.height), (wf, hf))


def track_drift(dataset: Dataset, temperature: float = 0.01) -> float:
    """Mean displacement error (texels) of nn_track against ground truth.

    For each track, both the estimate and the truth are re-anchored at the
    first tracked frame; drift is the mean norm of their difference over
    later visible frames.
    """
    total, count = 0.0, 0
    for tr in dataset.tracks:
        if len(tr) < 2 or not tr.visible[0]:
            continue
        cam = dataset.cameras[tr.view]
        maps = [FeatureMap(dataset.feats[tr.view, j], frame=j, view=tr.view) for j in range(len(tr))]
        q = QueryPoint(tr.view, tr.points[0])
        est = nn_track(maps, q, (cam.width, cam.height), temperature)
        gt_feat = track_feature_coords(dataset, tr)
        if not tr.visible[1]:
            continue
        anchor_est = est.points[1]
        anchor_gt = gt_feat[1]
        for j in range(2, len(tr)):
            if not tr.visible[j]:
                continue
            d = (est.points[j] - anchor_est) - (gt_feat[j] - anchor_gt)
            total += float(np.linalg.norm(d))
            count += 1
    return total / count if count else 0.0


def gt_track_correspondence_loss(dataset: Dataset) -> float:
    """Correspondence loss of descriptors sampled along ground-truth tracks."""
    by_view: dict[int, list[Track]] = {}
    for tr in dataset.tracks:
        by_view.setdefault(tr.view, []).append(tr)
    if not by_view:
        return 0.0
    losses = []
    for view, trs in sorted(by_view.items()):
        f = len(trs[0])
        hf, wf = dataset.feats.shape[2], dataset.feats.shape[3]
        descs = np.zeros((1, len(trs), f, dataset.feats.shape[4]))
        vis = np.zeros((1, len(trs), f), dtype=bool)
        for p, tr in enumerate(trs):
            coords = track_feature_coords(dataset, tr)
            coords[:, 0] = np.clip(coords[:, 0], 0, wf - 1)
            coords[:, 1] = np.clip(coords[:, 1], 0, hf - 1)
            for j in range(f):
                descs[0, p, j] = bilinear_sample_many(
                    dataset.feats[view, j], np.array([coords[j, 1], coords[j, 0]])
                )
                vis[0, p, j] = tr.visible[j]
        norms = np.linalg.norm(descs, axis=3)
        vis &= norms > 1e-9  # background samples carry no descriptor
        losses.append(correspondence_loss(descs, vis))
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# dataset directory I/O


def write_canonical(cloud: GaussianCloud, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_GCLD_MAGIC)
        sh = cloud.sh
        fh.write(struct.pack("<IIII", len(cloud), sh.l_max, sh.w, sh.n_frames))
        for arr in (cloud.positions, cloud.rotations, cloud.scales, cloud.opacities, sh.fr):
            fh.write(np.asarray(arr, dtype="<f8").tobytes())


def read_canonical(path) -> GaussianCloud:
    with open(path, "rb") as fh:
        if fh.read(4) != _GCLD_MAGIC:
            raise ValueError("bad canonical-cloud magic")
        n, l_max, w, n_frames = struct.unpack("<IIII", fh.read(16))
        slots = (l_max + 1) ** 2

        def arr(*shape):
            count = int(np.prod(shape))
            return np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape).astype(np.float64)

        positions = arr(n, 3)
        rotations = arr(n, 4)
        scales = arr(n, 3)
        opacities = arr(n)
        fr = arr(n, 3, slots, w)
    return GaussianCloud(positions, rotations, scales, opacities, SH4DCoeffs(fr, l_max, w, n_frames))


def save_dataset(dataset: Dataset, out_dir) -> None:
    """Write the documented dataset directory layout."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n, f = dataset.n_views, dataset.n_frames
    for i in range(n):
        cdir = out / f"cam_{i}"
        cdir.mkdir(exist_ok=True)
        for j in range(f):
            write_png(cdir / f"frame_{j}.png", dataset.images[i, j])
            write_imgf(cdir / f"frame_{j}.imgf", dataset.images[i, j])
            write_imgf(cdir / f"mask_{j}.imgf", dataset.masks[i, j])
            write_imgf(cdir / f"feat_{j}.imgf", dataset.feats[i, j])
    with open(out / "cameras.csv", "w", newline="\n") as fh:
        fh.write("view,width,height," + ",".join(f"k{r}{c}" for r in range(3) for c in range(3)))
        fh.write("," + ",".join(f"e{r}{c}" for r in range(4) for c in range(4)) + "\n")
        for i, cam in enumerate(dataset.cameras):
            vals = [*cam.K.ravel(), *cam.E.ravel()]
            fh.write(f"{i},{cam.width},{cam.height}," + ",".join(repr(float(v)) for v in vals) + "\n")
    write_tracks(dataset.tracks, out / "tracks.txt")
    with open(out / "gt_motion.csv", "w", newline="\n") as fh:
        fh.write("frame,gaussian,x,y,z\n")
        for t in range(dataset.gt_positions.shape[0]):
            for g in range(dataset.gt_positions.shape[1]):
                x, y, z = dataset.gt_positions[t, g]
                fh.write(f"{t},{g},{float(x)!r},{float(y)!r},{float(z)!r}\n")
    write_canonical(dataset.canonical, out / "canonical.bin")


def load_dataset(in_dir) -> Dataset:
    """Read back a directory written by :func:`save_dataset`."""
    root = Path(in_dir)
    cameras = []
    with open(root / "cameras.csv") as fh:
        next(fh)
        for line in fh:
            parts = line.strip().split(",")
            width, height = int(parts[1]), int(parts[2])
            vals = [float(v) for v in parts[3:]]
            K = np.array(vals[:9]).reshape(3, 3)
            E = np.array(vals[9:25]).reshape(4, 4)
            cameras.append(Camera(K, E, width, height))
    n = len(cameras)
    frames = sorted(
        int(p.stem.split("_")[1]) for p in (root / "cam_0").glob("frame_*.imgf")
    )
    f = len(frames)
    images, masks, feats = [], [], []
    for i in range(n):
        cdir = root / f"cam_{i}"
        images.append([read_imgf(cdir / f"frame_{j}.imgf") for j in range(f)])
        masks.append([read_imgf(cdir / f"mask_{j}.imgf")[:, :, 0] for j in range(f)])
        feats.append([read_imgf(cdir / f"feat_{j}.imgf") for j in range(f)])
    gt = {}
    with open(root / "gt_motion.csv") as fh:
        next(fh)
        for line in fh:
            t, g, x, y, z = line.strip().split(",")
            gt.setdefault(int(t), {})[int(g)] = (float(x), float(y), float(z))
    gt_positions = np.array([[gt[t][g] for g in sorted(gt[t])] for t in sorted(gt)])
    tracks = read_tracks(root / "tracks.txt")
    canonical = read_canonical(root / "canonical.bin")
    return Dataset(
        np.array(images),
        np.array(masks),
        np.array(feats),
        tuple(cameras),
        gt_positions,
        tracks,
        canonical,
    )
