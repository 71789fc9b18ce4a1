# %% [markdown]
# # From detections to visual-semantic-unit graphs
#
# A scene is a set of detected objects: a box, a class label, an appearance
# vector and a few attribute guesses.  Two graphs are built from it.  Both
# hold one node per object and one attribute node per object; they differ in
# their relation nodes:
#
# * the **semantic** graph keeps the detector's predicted relationships;
# * the **geometry** graph links boxes that overlap enough and sit close
#   enough, and describes each link by an 8-number spatial cue.

# %%
import numpy as np

from vsua.boxmath import Box, ImageSize, iou, object_geometry_cue, relation_geometry_cue
from vsua.corpus import synth_generate
from vsua.graph import GraphConfig, build_geometry_graph, build_semantic_graph, validate_graph

# %% [markdown]
# ## Boxes
# Boxes are centre-form, in pixels.  IoU is symmetric and is 1 for a box with itself.

# %%
img = ImageSize(100.0, 100.0)
a, b = Box(40, 50, 40, 30), Box(55, 55, 30, 30)
print("IoU(a, b) =", round(iou(a, b), 4), " IoU(a, a) =", iou(a, a))
print("object cue of a:", object_geometry_cue(a, img).round(3))
print("pair cue a -> b:", relation_geometry_cue(a, b, img).round(3))

# %% [markdown]
# ## A synthetic scene
# The generator places 2-5 coloured shapes on a grid and writes two template
# captions about the two largest shapes.

# %%
ds = synth_generate(seed=0, n_images=3)
ex = ds.examples[0]
for o in ex.detections.objects:
    colours = [ds.labels.attributes[k] for k, _ in o.attributes]
    print(o.id, ds.labels.objects[o.label_id], colours, o.box)
print("captions:", [" ".join(c) for c in ex.captions])

# %% [markdown]
# ## The two graphs

# %%
cfg = GraphConfig()
sem = build_semantic_graph(ex.detections, cfg)
geo = build_geometry_graph(ex.detections, cfg)
for g in (sem, geo):
    print(f"{g.kind:9s}: {g.n_objects} objects, {len(g.attribute_units)} attribute units, "
          f"{g.n_relations} relation units, {len(g.edges)} edges, valid={validate_graph(g)}")

for r in sem.relation_units[:5]:
    print("semantic :", r.subject, ds.labels.relations[r.payload], r.object)
for r in geo.relation_units:
    print("geometry :", r.subject, "->", r.object, np.round(r.payload, 2))
