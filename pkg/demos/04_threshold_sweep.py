# %% [markdown]
# # How the IoU threshold thins the geometry graph
#
# A geometry relation unit exists for a pair of boxes when IoU >= theta_iou and
# their normalised centre distance <= theta_dist.  Raising theta_iou can only
# remove pairs, so relation units per image fall as it grows.

# %%
import numpy as np

from vsua.corpus import synth_generate
from vsua.graph import GraphConfig, build_geometry_graph

scenes = [ex.detections for ex in synth_generate(3, 300).examples]
for theta in (0.0, 0.1, 0.2, 0.3, 0.4, 0.5):
    counts = [build_geometry_graph(s, GraphConfig(iou_threshold=theta)).n_relations
              for s in scenes]
    print(f"theta_iou {theta:.1f}: {np.mean(counts):5.2f} relation units / image "
          f"({np.mean(np.array(counts) == 0):.0%} of images have none)")
