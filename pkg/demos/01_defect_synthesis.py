"""Synthesizing the training corpus from a couple of healthy images.

Walks through the full stage-1 data pipeline on procedural phantoms:
foreground location, Bezier-hull defect masks, noise inpainting, and the
healthy-preserving augmentations. Writes a contact sheet to demos/output/.
"""

from pathlib import Path

import cv2
import numpy as np

from contrastad import (AugmentConfig, DefectSpec, augment_normal, bezier_hull,
                        build_pair_dataset, generate_defect, locate_brain)
from contrastad.phantom import phantom_brain

out_dir = Path(__file__).parent / "output"
out_dir.mkdir(exist_ok=True)

# A phantom stands in for a real healthy scan: smooth elliptical foreground
# with ridge texture, different every seed.
img = phantom_brain(256, seed=3)
print(f"phantom image: {img.shape}, intensities {img.min()}..{img.max()}")

# Step 1: where is the subject? Otsu threshold + morphology + largest blob.
brain = locate_brain(img)
print(f"foreground covers {100 * brain.mean():.1f}% of the frame")

# Step 2: a closed smooth hull through a handful of control points. With
# edginess 0 the hull degenerates to the point polygon; larger values bulge
# each segment outward.
points = [(60, 80), (90, 190), (170, 170), (190, 90), (120, 60)]
for edginess in (0.0, 0.05, 0.25):
    hull = bezier_hull(points, edginess)
    print(f"edginess {edginess:4.2f}: hull of {len(hull)} vertices")

# Step 3: inpaint noise-filled defects. Same seed, same defect; different
# seeds give different positions, shapes, and noise statistics.
tiles = [img]
for seed in (1, 2, 3):
    defective, mask = generate_defect(img, DefectSpec(rng_seed=seed), brain_mask=brain)
    print(f"defect seed {seed}: area {mask.sum()} px, "
          f"noise mean inside {defective[mask].mean():.0f}")
    tiles.append(defective)

# Step 4: pseudo-normal augmentations (elastic, grid, flip, contrast).
for seed in (10, 11, 12):
    tiles.append(augment_normal(img, seed, AugmentConfig()))

sheet = np.concatenate([np.concatenate(tiles[:4], axis=1),
                        np.concatenate([tiles[0]] + tiles[4:], axis=1)], axis=0)
cv2.imwrite(str(out_dir / "defect_synthesis.png"), sheet)
print(f"contact sheet -> {out_dir / 'defect_synthesis.png'}")

# Step 5: the whole corpus in one call, fully reproducible per seed.
few = [phantom_brain(256, s) for s in (3, 4)]
ds = build_pair_dataset(few, n_normal_aug=8, n_anomalous=8,
                        spec=DefectSpec(), rng_seed=0)
print(f"corpus: {len(ds.originals)} originals + {len(ds.pseudo_normal)} augmented "
      f"normals + {len(ds.anomalous)} defect pairs")
