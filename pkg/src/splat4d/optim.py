"""Stage-two objectives and the two-phase training loop.

Phase 1 fits coarse motion with the masked reconstruction loss alone;
phase 2 adds the denoiser-driven latent regression term and the local
rigidity (ARAP) regularizer. All parameters update through a first-order
adaptive optimizer (decay 0.9/0.999, eps 1e-8). Reconstruction steps in
phase 1 follow a frame curriculum: sampled frames come from a prefix
[0, f_cur) that grows linearly from 2 frames to the full video over the
first half of the phase.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .appearance import SH4DCoeffs, eval_colors_backward, eval_colors_batch
from .core import GaussianCloud, Gaussian4DState
from .diffsched import (
    Conditioning,
    DenoiserOracle,
    NoiseSchedule,
    build_schedule,
    encode_latent,
    encode_latent_backward,
    sds_loss,
)
from .errors import ShapeMismatch, TooFewGaussians
from .motionfield import (
    DeformationDecoder,
    HexPlaneField,
    apply_deformation_batch,
    compose_backward,
    hexplane_interp_backward,
    hexplane_interp_batch,
    read_hexfield,
    sample_feature_planes,
    write_hexfield,
)
from .splatter import render_backward, render_hit_depth, render_with_cache

__all__ = [
    "reconstruction_loss",
    "reconstruction_term_grad",
    "RigidityGraph",
    "build_rigidity_graph",
    "arap_loss",
    "arap_loss_grad",
    "stage_two_objective",
    "Adam",
    "TrainConfig",
    "TrainResult",
    "train",
    "write_loss_log",
    "save_checkpoint",
    "load_checkpoint",
]

_DEC_MAGIC = b"DEC1"
_SH_MAGIC = b"SH4D"


def reconstruction_term_grad(render, gt, mask_hat, mask):
    """One (view, frame) term of the masked reconstruction loss.

    Images are (H, W, C), masks (H, W). Returns the summed squared error
    ``||mask*gt - mask_hat*render||^2`` and its gradients w.r.t. the
    render and the predicted mask.
    """
    render = np.asarray(render, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask_hat = np.asarray(mask_hat, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if render.shape != gt.shape or mask_hat.shape != mask.shape:
        raise ShapeMismatch("render/gt or mask shapes differ")
    if mask.shape != render.shape[:2]:
        raise ShapeMismatch("masks must be (H, W) for (H, W, C) images")
    err = mask_hat[:, :, None] * render - mask[:, :, None] * gt
    term = float(np.sum(err**2))
    g_render = 2.0 * err * mask_hat[:, :, None]
    g_mask_hat = 2.0 * np.sum(err * render, axis=2)
    return term, g_render, g_mask_hat


def reconstruction_loss(renders, gts, masks_hat, masks) -> float:
    """Masked multi-view reconstruction loss, averaged over (view, frame).

    Inputs are (n, f, H, W, C) images and (n, f, H, W) masks.
    """
    renders = np.asarray(renders, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    masks_hat = np.asarray(masks_hat, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    if renders.shape != gts.shape or masks_hat.shape != masks.shape:
        raise ShapeMismatch("render/gt or mask stacks differ in shape")
    if renders.shape[:2] != masks.shape[:2] or renders.shape[2:4] != masks.shape[2:4]:
        raise ShapeMismatch("image and mask stacks disagree on (n, f, H, W)")
    n, f = renders.shape[:2]
    total = 0.0
    for i in range(n):
        for j in range(f):
            term, _, _ = reconstruction_term_grad(
                renders[i, j], gts[i, j], masks_hat[i, j], masks[i, j]
            )
            total += term
    return total / (n * f)


@dataclass(frozen=True)
class RigidityGraph:
    """k-nearest-neighbor structure over the canonical positions."""

    neighbors: np.ndarray  # (N, k) int64
    rest_edges: np.ndarray  # (N, k, 3)

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]


def build_rigidity_graph(positions: np.ndarray, k: int = 8) -> RigidityGraph:
    """Exact Euclidean kNN graph, ties broken by point index."""
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k + 1:
        raise TooFewGaussians(f"need at least {k + 1} points, got {n}")
    d2 = np.sum((positions[:, None, :] - positions[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    neighbors = order[:, :k].astype(np.int64)
    rest_edges = positions[neighbors] - positions[:, None, :]
    return RigidityGraph(neighbors, rest_edges)


def _procrustes_rotations(graph: RigidityGraph, deformed: np.ndarray) -> np.ndarray:
    """Best-fit rotation per point mapping rest edges onto deformed edges."""
    n, k = graph.neighbors.shape
    edges = deformed[graph.neighbors] - deformed[:, None, :]  # (N, k, 3)
    H = np.einsum("nka,nkb->nab", graph.rest_edges, edges)  # sum p q^T
    rotations = np.empty((n, 3, 3))
    for i in range(n):
        u, s, vt = np.linalg.svd(H[i])
        if s[0] <= 1e-15:  # rank-0 rest neighborhood: no rotation defined
            rotations[i] = np.eye(3)
            continue
        r = vt.T @ u.T
        if np.linalg.det(r) < 0:
            d = np.ones(3)
            d[2] = -1.0
            r = vt.T @ np.diag(d) @ u.T
        rotations[i] = r
    return rotations


def arap_loss(graph: RigidityGraph, canonical: np.ndarray, deformed: np.ndarray) -> float:
    """As-rigid-as-possible energy over the neighborhood graph."""
    loss, _ = arap_loss_grad(graph, canonical, deformed)
    return loss


def arap_loss_grad(
    graph: RigidityGraph, canonical: np.ndarray, deformed: np.ndarray
) -> tuple[float, np.ndarray]:
    """ARAP energy and its gradient w.r.t. the deformed positions.

    Best-fit rotations are treated as constants of the current pose (the
    classic local/global split), so the gradient only flows through the
    deformed edge vectors.
    """
    canonical = np.asarray(canonical, dtype=np.float64)
    deformed = np.asarray(deformed, dtype=np.float64)
    if canonical.shape != deformed.shape:
        raise ShapeMismatch("canonical and deformed position sets differ")
    n, k = graph.neighbors.shape
    rotations = _procrustes_rotations(graph, deformed)
    rotated = np.einsum("nab,nkb->nka", rotations, graph.rest_edges)
    edges = deformed[graph.neighbors] - deformed[:, None, :]
    resid = rotated - edges  # (N, k, 3)
    loss = float(np.sum(resid**2)) / (n * k)
    grad = np.zeros_like(deformed)
    scaled = 2.0 * resid / (n * k)
    np.add.at(grad, graph.neighbors.ravel(), -scaled.reshape(-1, 3))
    grad += scaled.sum(axis=1)
    return loss, grad


def stage_two_objective(
    l_rec: float, l_sds: float, l_arap: float, lam4: float, lam5: float, lam6: float
) -> float:
    """Weighted stage-two objective lam4*L_rec + lam5*L_sds + lam6*L_arap."""
    if min(lam4, lam5, lam6) < 0:
        raise ValueError("loss weights must be non-negative")
    return lam4 * l_rec + lam5 * l_sds + lam6 * l_arap


class Adam:
    """First-order adaptive optimizer with per-parameter learning rates.

    Updates arrays in place so live references held elsewhere stay valid.
    """

    def __init__(
        self,
        params: dict[str, np.ndarray],
        lrs: dict[str, float],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lrs = lrs
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, g in grads.items():
            p = self.params[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr_scale * self.lrs[name] * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainConfig:
    """Knobs of the two-phase optimization.

    Learning rates are initial values; they decay exponentially to
    ``lr_final_scale`` of themselves over the run.
    """

    lambda4: float = 100.0
    lambda5: float = 0.01
    lambda6: float = 10.0
    iterations_rec: int = 750
    iterations_sds: int = 250
    lr_hexplane: float = 0.01
    lr_decoder: float = 1e-4
    lr_sh: float = 2.5e-3
    lr_final_scale: float = 0.03
    batch: int = 64
    seed: int = 0
    decoder_hidden: int = 64
    hex_spatial_res: int = 100
    hex_temporal_res: int = 8
    hex_dim: int = 16
    hex_levels: int = 2
    arap_k: int = 8
    latent_factor: int = 8

    def __post_init__(self):
        if min(self.lambda4, self.lambda5, self.lambda6) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.iterations_rec < 0 or self.iterations_sds < 0:
            raise ValueError("iteration counts must be >= 0")
        if not 0.0 < self.lr_final_scale <= 1.0:
            raise ValueError("lr_final_scale must lie in (0, 1]")


@dataclass
class TrainResult:
    field: HexPlaneField
    decoder: DeformationDecoder
    sh: SH4DCoeffs
    log: list[dict]


def _frame_curriculum(step: int, iterations_rec: int, n_frames: int) -> int:
    """Frames available at a phase-1 step: 2 growing linearly to all."""
    if n_frames <= 2:
        return n_frames
    half = max(1, iterations_rec // 2)
    if step >= half:
        return n_frames
    return min(n_frames, 2 + (n_frames - 2) * step // half)


@dataclass
class _Pipeline:
    """Shared per-run state: parameters, constants, and cached geometry."""

    scene: GaussianCloud
    cameras: list
    images: np.ndarray
    masks: np.ndarray
    fv_const: np.ndarray  # (f, N, Dd) frozen feature-plane part
    field: HexPlaneField
    decoder: DeformationDecoder
    sh_fr: np.ndarray
    cfg: TrainConfig | None = None
    sigma_cutoff: float = 3.0

    def frame_forward(self, t: int):
        """Deform the whole cloud at frame t; returns state + caches."""
        hexfeat, hexcache = hexplane_interp_batch(self.field, self.scene.positions, float(t))
        feats = np.concatenate([hexfeat, self.fv_const[t]], axis=1)
        dx, dr, ds, dcache = self.decoder.forward(feats)
        return {"t": t, "dx": dx, "dr": dr, "ds": ds, "hexcache": hexcache, "dcache": dcache}

    def render_pair(self, fstate: dict, view: int):
        """Render frame state through one camera, keeping all caches."""
        cam = self.cameras[view]
        dg = apply_deformation_batch(
            self.scene, fstate["dx"], fstate["dr"], fstate["ds"], np.zeros((len(self.scene), 3))
        )
        vecs = dg.positions - cam.center()
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        dirs = vecs / norms
        colors, shcache = eval_colors_batch(
            self.sh_fr, self.scene.sh.l_max, self.scene.sh.n_frames, dirs, float(fstate["t"])
        )
        dg.colors = colors
        out, rcache = render_with_cache(dg, cam, sigma_cutoff=self.sigma_cutoff)
        return out, {
            "rcache": rcache,
            "shcache": shcache,
            "dirs": dirs,
            "norms": norms,
            "view": view,
        }

    def backward_pair(self, fstate: dict, pcache: dict, g_color, g_alpha, accum: dict):
        """Pull one rendered pair's image gradients back to frame deltas."""
        g = render_backward(pcache["rcache"], g_color, g_alpha)
        g_fr, g_dirs = eval_colors_backward(pcache["shcache"], g["colors"])
        accum["sh_fr"] += g_fr
        dirs, norms = pcache["dirs"], pcache["norms"]
        g_pos_dir = (g_dirs - np.sum(g_dirs * dirs, axis=1, keepdims=True) * dirs) / norms
        accum["g_pos"] += g["positions"] + g_pos_dir
        accum["g_rot"] += g["rotations"]
        accum["g_scale"] += g["scales"]

    def backward_frame(self, fstate: dict, accum: dict, grads: dict):
        """Finish a frame: deltas -> decoder -> hexplanes."""
        g_dx, g_dr, g_ds = compose_backward(
            self.scene, fstate["dx"], fstate["dr"], fstate["ds"],
            accum["g_pos"], accum["g_rot"], accum["g_scale"],
        )
        dec_grads, g_feats = self.decoder.backward(fstate["dcache"], g_dx, g_dr, g_ds)
        for name, val in dec_grads.items():
            grads[f"dec_{name}"] += val
        plane_grads = hexplane_interp_backward(
            self.field, fstate["hexcache"], g_feats[:, : self.field.feature_dim]
        )
        for lvl, level in enumerate(plane_grads):
            for k, pg in enumerate(level):
                grads[f"plane_{lvl}_{k}"] += pg


def train(
    scene: GaussianCloud,
    dataset,
    cfg: TrainConfig,
    denoiser: DenoiserOracle | None = None,
    schedule: NoiseSchedule | None = None,
) -> TrainResult:
    """Fit motion field, decoder, and SH weights to a multi-view video.

    ``dataset`` must expose ``images`` (n, f, H, W, 3), ``masks``
    (n, f, H, W), ``cameras`` and ``feature_video()``. Phase 1 runs
    ``iterations_rec`` reconstruction-only steps under the frame
    curriculum; phase 2 runs ``iterations_sds`` steps of the full
    objective. Deterministic for a fixed seed.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    images = np.asarray(dataset.images, dtype=np.float64)
    masks = np.asarray(dataset.masks, dtype=np.float64)
    cameras = list(dataset.cameras)
    n_views, n_frames = images.shape[:2]
    fv = dataset.feature_video()

    lo, hi = scene.bounding_box()
    pad = 0.05 * (hi - lo) + 1e-6
    field = HexPlaneField.create(
        lo - pad,
        hi + pad,
        n_frames,
        spatial_res=cfg.hex_spatial_res,
        temporal_res=cfg.hex_temporal_res,
        dim=cfg.hex_dim,
        levels=cfg.hex_levels,
        seed=cfg.seed,
    )
    decoder = DeformationDecoder(
        field.feature_dim + fv.descriptor_dim, hidden=cfg.decoder_hidden, seed=cfg.seed + 1
    )
    sh_fr = scene.sh.fr.copy()

    # frozen feature-plane part: canonical centers, canonical-pose occlusion
    rest = Gaussian4DState.rest(scene)
    hit_depths = [render_hit_depth(_rest_splats(scene), cam) for cam in fv.cameras]
    fv_const = np.stack(
        [
            sample_feature_planes(fv, rest, scene.positions, float(t), hit_depths=hit_depths)[0]
            for t in range(n_frames)
        ]
    )

    pipe = _Pipeline(scene, cameras, images, masks, fv_const, field, decoder, sh_fr, cfg)

    params: dict[str, np.ndarray] = {}
    lrs: dict[str, float] = {}
    for name, arr in field.params().items():
        params[name] = arr
        lrs[name] = cfg.lr_hexplane
    for name, arr in decoder.params().items():
        params[f"dec_{name}"] = arr
        lrs[f"dec_{name}"] = cfg.lr_decoder
    params["sh_fr"] = sh_fr
    lrs["sh_fr"] = cfg.lr_sh
    opt = Adam(params, lrs)

    graph = None
    sched = schedule or build_schedule()
    log: list[dict] = []
    total_steps = cfg.iterations_rec + cfg.iterations_sds
    for step in range(total_steps):
        phase = 1 if step < cfg.iterations_rec else 2
        if phase == 1:
            f_cur = _frame_curriculum(step, cfg.iterations_rec, n_frames)
        else:
            f_cur = n_frames
        pool = [(v, t) for v in range(n_views) for t in range(f_cur)]
        if cfg.batch >= len(pool):
            batch = pool
        else:
            sel = rng.choice(len(pool), size=cfg.batch, replace=False)
            batch = [pool[i] for i in sorted(sel)]

        sds_pair = None
        if phase == 2 and denoiser is not None and cfg.lambda5 > 0:
            sds_pair = batch[int(rng.integers(len(batch)))]
            t_sds = int(rng.integers(1, sched.T + 1))
            eps_sds = None  # drawn after the latent shape is known

        grads = {name: np.zeros_like(arr) for name, arr in params.items()}
        frames_used = sorted({t for _, t in batch})
        fstates = {t: pipe.frame_forward(t) for t in frames_used}

        l_rec_total = 0.0
        l_sds = 0.0
        l_arap = 0.0
        accums = {
            t: {
                "g_pos": np.zeros((len(scene), 3)),
                "g_rot": np.zeros((len(scene), 4)),
                "g_scale": np.zeros((len(scene), 3)),
                "sh_fr": grads["sh_fr"],
            }
            for t in frames_used
        }
        nb = len(batch)
        for v, t in batch:
            out, pcache = pipe.render_pair(fstates[t], v)
            term, g_render, g_mask = reconstruction_term_grad(
                out.color, images[v, t], out.alpha, masks[v, t]
            )
            l_rec_total += term
            g_color = (cfg.lambda4 / nb) * g_render
            g_alpha = (cfg.lambda4 / nb) * g_mask
            if sds_pair == (v, t):
                z = encode_latent(out.color, out.alpha, cfg.latent_factor)
                eps_sds = rng.standard_normal(z.shape)
                z_t = sched.forward_diffuse(z, t_sds, eps_sds)
                z_cond = encode_latent(images[v, 0], masks[v, 0], cfg.latent_factor)
                cond = Conditioning(np.zeros(1), (cameras[v],))
                eps_pred = denoiser(z_cond, z_t, t_sds, cond)
                z0_hat = sched.z0_estimate(z_t, eps_pred, t_sds)
                l_sds = sds_loss(z, z0_hat)
                g_z = (cfg.lambda5 * 2.0 / z.size) * (z - z0_hat)
                g_rgb, g_a = encode_latent_backward(g_z, cfg.latent_factor)
                g_color = g_color + g_rgb
                g_alpha = g_alpha + g_a
            pipe.backward_pair(fstates[t], pcache, g_color, g_alpha, accums[t])

        if phase == 2 and cfg.lambda6 > 0:
            if graph is None:
                graph = build_rigidity_graph(scene.positions, cfg.arap_k)
            for t in frames_used:
                pos_t = scene.positions + fstates[t]["dx"]
                la, g_arap = arap_loss_grad(graph, scene.positions, pos_t)
                l_arap += la / len(frames_used)
                accums[t]["g_pos"] += (cfg.lambda6 / len(frames_used)) * g_arap

        for t in frames_used:
            pipe.backward_frame(fstates[t], accums[t], grads)

        decay = cfg.lr_final_scale ** (step / max(total_steps - 1, 1))
        opt.step(grads, lr_scale=decay)
        l_rec = l_rec_total / nb
        log.append(
            {
                "step": step,
                "phase": phase,
                "l_rec": l_rec,
                "l_sds": l_sds,
                "l_arap": l_arap,
                "total": stage_two_objective(
                    l_rec, l_sds, l_arap, cfg.lambda4, cfg.lambda5 if phase == 2 else 0.0,
                    cfg.lambda6 if phase == 2 else 0.0,
                ),
            }
        )

    sh = SH4DCoeffs(sh_fr, scene.sh.l_max, scene.sh.w, scene.sh.n_frames)
    return TrainResult(field, decoder, sh, log)


def _rest_splats(scene: GaussianCloud):
    from .core import DeformedGaussians

    return DeformedGaussians(
        scene.positions, scene.rotations, scene.scales, scene.opacities, np.zeros((len(scene), 1))
    )


def write_loss_log(log: list[dict], path) -> None:
    """CSV loss trace: step, phase, l_rec, l_sds, l_arap, total."""
    with open(path, "w", newline="\n") as fh:
        fh.write("step,phase,l_rec,l_sds,l_arap,total\n")
        for rec in log:
            fh.write(
                f"{rec['step']},{rec['phase']},{float(rec['l_rec'])!r},"
                f"{float(rec['l_sds'])!r},{float(rec['l_arap'])!r},{float(rec['total'])!r}\n"
            )


def _write_decoder(dec: DeformationDecoder, fh) -> None:
    fh.write(_DEC_MAGIC)
    fh.write(struct.pack("<II", dec.feature_dim, dec.hidden))
    for arr in dec.params().values():
        fh.write(arr.astype("<f4").tobytes())


def _read_decoder(fh) -> DeformationDecoder:
    magic = fh.read(4)
    if magic != _DEC_MAGIC:
        raise ValueError(f"bad decoder magic {magic!r}")
    feature_dim, hidden = struct.unpack("<II", fh.read(8))
    dec = DeformationDecoder(feature_dim, hidden)
    for name, arr in dec.params().items():
        data = np.frombuffer(fh.read(arr.size * 4), dtype="<f4").reshape(arr.shape)
        arr[...] = data
    return dec


def _write_sh(sh: SH4DCoeffs, fh) -> None:
    fh.write(_SH_MAGIC)
    n = sh.fr.shape[0]
    fh.write(struct.pack("<IIII", n, sh.l_max, sh.w, sh.n_frames))
    fh.write(sh.fr.astype("<f4").tobytes())


def _read_sh(fh) -> SH4DCoeffs:
    magic = fh.read(4)
    if magic != _SH_MAGIC:
        raise ValueError(f"bad SH magic {magic!r}")
    n, l_max, w, n_frames = struct.unpack("<IIII", fh.read(16))
    slots = (l_max + 1) ** 2
    fr = np.frombuffer(fh.read(n * 3 * slots * w * 4), dtype="<f4")
    return SH4DCoeffs(fr.reshape(n, 3, slots, w).astype(np.float64), l_max, w, n_frames)


def save_checkpoint(path, field: HexPlaneField, decoder: DeformationDecoder, sh: SH4DCoeffs) -> None:
    """Concatenated binary checkpoint: hexfield, decoder, SH blocks."""
    with open(path, "wb") as fh:
        write_hexfield(field, fh)
        _write_decoder(decoder, fh)
        _write_sh(sh, fh)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        field = read_hexfield(fh)
        decoder = _read_decoder(fh)
        sh = _read_sh(fh)
    return field, decoder, sh
