"""Render a synthetic Gaussian scene and inspect the compositing outputs.

Walks through the lowest layer of the toolkit: build a canonical cloud,
project it through a pinhole camera, and rasterize color / alpha / depth.
Writes PNG and IMGF files next to this script.

Run:  python demos/01_splatting_basics.py
"""

from pathlib import Path

import numpy as np

from splat4d.core import DeformedGaussians
from splat4d.harness import SceneSpec, make_cameras, synth_scene
from splat4d.appearance import eval_colors_batch
from splat4d.imgio import write_imgf, write_png
from splat4d.splatter import render

out_dir = Path(__file__).parent / "out"
out_dir.mkdir(exist_ok=True)

# a seeded sphere-shell of 96 Gaussians with random stable colors
spec = SceneSpec(object_preset="sphere-shell", n_gaussians=96, image_size=96, seed=3)
cloud, _ = synth_scene(spec)
cam = make_cameras(spec)[0]

# colors depend on the viewing direction through the SH model
vecs = cloud.positions - cam.center()
dirs = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
colors, _ = eval_colors_batch(cloud.sh.fr, cloud.sh.l_max, cloud.sh.n_frames, dirs, t=0.0)

dg = DeformedGaussians(cloud.positions, cloud.rotations, cloud.scales, cloud.opacities, colors)
frame = render(dg, cam)

print(f"rendered {len(cloud)} Gaussians at {cam.width}x{cam.height}")
print(f"coverage: {float((frame.alpha > 0.5).mean()):.1%} of pixels above alpha 0.5")
print(f"depth range on the object: {frame.depth[frame.alpha > 0.5].min():.2f}"
      f" .. {frame.depth[frame.alpha > 0.5].max():.2f}")

write_png(out_dir / "basics_color.png", frame.color)
write_png(out_dir / "basics_alpha.png", frame.alpha)
write_imgf(out_dir / "basics_color.imgf", frame.color)
print(f"wrote renders to {out_dir}")
