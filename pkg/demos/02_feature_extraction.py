"""Attention-augmented feature extraction and patch aggregation.

Shows the stage shapes of the residual trunk, the channel/spatial gates
captured per stage, aggregation into a patch-feature grid, and an attention
heatmap overlay.
"""

from pathlib import Path

import cv2
import numpy as np

from contrastad import (DefectSpec, ExtractorConfig, aggregate_layers,
                        attention_heatmap, extract_features, generate_defect,
                        initial_weights)
from contrastad.phantom import phantom_brain

out_dir = Path(__file__).parent / "output"
out_dir.mkdir(exist_ok=True)

cfg = ExtractorConfig(
    backbone_depth=18,
    use_attention=True,
    activation="leaky_relu",
    stages_used=(1, 2, 3),
    pretrained=False,          # seeded random trunk; load a snapshot when available
)
weights = initial_weights(cfg, seed=0)
print(f"weight snapshot: {weights.snapshot_id}, "
      f"{sum(t.size for t in weights.tensors.values()):,} scalars")

img = phantom_brain(256, seed=1)
defective, mask = generate_defect(img, DefectSpec(rng_seed=5))

maps, state = extract_features(defective, cfg, weights)
for s, m in maps.items():
    print(f"stage {s}: {tuple(m.shape)} (channels x h x w)")

# Per-stage maps are resized to the earliest stage, concatenated, and
# smoothed over a small neighborhood: one D-dim vector per grid cell.
grid = aggregate_layers(maps, cfg.patch_neighborhood, input_hw=defective.shape)
print(f"patch grid: {grid.grid_shape}, D={grid.dim}, "
      f"{grid.spatial_scale:.0f} px per cell")

# The gates sit at exactly 0.5 before training (zero-init), so heatmaps of an
# untrained model reflect trunk activations only; training moves them onto
# anomalous regions (see demo 04).
gate = state.channel_gates[1]
print(f"stage-1 channel gate range at init: {float(gate.min()):.2f}.."
      f"{float(gate.max()):.2f}")

heat = np.mean([attention_heatmap(state, s) for s in cfg.stages_used], axis=0)
colored = cv2.applyColorMap((heat * 255).astype(np.uint8), cv2.COLORMAP_JET)
overlay = cv2.addWeighted(cv2.cvtColor(defective, cv2.COLOR_GRAY2BGR), 0.6,
                          colored, 0.4, 0)
cv2.imwrite(str(out_dir / "attention_untrained.png"), overlay)
print(f"untrained attention overlay -> {out_dir / 'attention_untrained.png'}")
