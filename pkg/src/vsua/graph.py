"""Semantic and geometry graphs over visual semantic units.

Nodes are objects, one aggregated attribute unit per object, and relation
units.  A relation between objects i and j is a node of its own, wired
``obj i -> rel -> obj j``, so the object/relation subgraph is bipartite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .boxmath import Box, ImageSize, center_distance_norm, iou, relation_geometry_cue

NO_ATTR = 0

SEMANTIC = "semantic"
GEOMETRY = "geometry"


class InvalidDetectionsError(ValueError):
    pass


@dataclass(frozen=True)
class DetectedObject:
    id: int
    box: Box
    label_id: int
    score: float
    appearance: np.ndarray
    attributes: tuple[tuple[int, float], ...] = ()


@dataclass(frozen=True)
class DetectedRelation:
    subject_id: int
    object_id: int
    predicate_id: int
    score: float


@dataclass(frozen=True)
class SceneDetections:
    image_id: int
    size: ImageSize
    objects: tuple[DetectedObject, ...]
    relations: tuple[DetectedRelation, ...] = ()


@dataclass(frozen=True)
class GraphConfig:
    iou_threshold: float = 0.2
    dist_threshold: float = 0.5
    n_attrs: int = 3
    max_semantic_relations: int = 20

    def __post_init__(self):
        if not (0 <= self.iou_threshold <= 1 and 0 <= self.dist_threshold <= 1):
            raise ValueError("graph thresholds must lie in [0, 1]")
        if self.n_attrs < 1 or self.max_semantic_relations < 0:
            raise ValueError("n_attrs must be >= 1 and max_semantic_relations >= 0")


class RelationUnit(NamedTuple):
    subject: int          # index into VsuGraph.objects
    object: int
    payload: object       # predicate id (semantic) or 8-d cue (geometry)


@dataclass(frozen=True)
class VsuGraph:
    kind: str
    size: ImageSize
    objects: tuple[DetectedObject, ...]
    attribute_units: tuple[tuple[int, tuple[int, ...]], ...]   # (object index, label ids)
    relation_units: tuple[RelationUnit, ...]
    edges: tuple[tuple[tuple[str, int], tuple[str, int]], ...] = field(default=())

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def n_relations(self) -> int:
        return len(self.relation_units)


def aggregate_attributes(obj: DetectedObject, n_attrs: int) -> tuple[int, ...]:
    """Top ``n_attrs`` attribute ids by confidence, padded with NO_ATTR."""
    ranked = sorted(obj.attributes, key=lambda a: -a[1])
    ids = [a for a, _ in ranked[:n_attrs]]
    return tuple(ids + [NO_ATTR] * (n_attrs - len(ids)))


def _edges(n_objects: int, relations: Sequence[RelationUnit]):
    edges = [(("obj", i), ("attr", i)) for i in range(n_objects)]
    for k, r in enumerate(relations):
        edges.append((("obj", r.subject), ("rel", k)))
        edges.append((("rel", k), ("obj", r.object)))
    return tuple(edges)


def _attribute_units(dets: SceneDetections, cfg: GraphConfig):
    return tuple((i, aggregate_attributes(o, cfg.n_attrs)) for i, o in enumerate(dets.objects))


def build_semantic_graph(dets: SceneDetections, cfg: GraphConfig = GraphConfig()) -> VsuGraph:
    index = {o.id: i for i, o in enumerate(dets.objects)}
    for r in dets.relations:
        if r.subject_id not in index or r.object_id not in index:
            raise InvalidDetectionsError(
                f"image {dets.image_id}: relation ({r.subject_id}, {r.predicate_id}, "
                f"{r.object_id}) references a missing object id")
        if r.subject_id == r.object_id:
            raise InvalidDetectionsError(
                f"image {dets.image_id}: relation on object {r.subject_id} with itself")
    # stable sort keeps input order among equal scores
    kept = sorted(dets.relations, key=lambda r: -r.score)[:cfg.max_semantic_relations]
    rels = tuple(RelationUnit(index[r.subject_id], index[r.object_id], r.predicate_id)
                 for r in kept)
    return VsuGraph(SEMANTIC, dets.size, dets.objects, _attribute_units(dets, cfg), rels,
                    _edges(len(dets.objects), rels))


def build_geometry_graph(dets: SceneDetections, cfg: GraphConfig = GraphConfig()) -> VsuGraph:
    objs = dets.objects
    rels = []
    for i in range(len(objs)):
        for j in range(i + 1, len(objs)):
            a, b = objs[i], objs[j]
            if iou(a.box, b.box) < cfg.iou_threshold:
                continue
            if center_distance_norm(a.box, b.box, dets.size) > cfg.dist_threshold:
                continue
            # larger box is the subject; equal areas -> lower id
            if (b.box.area, -b.id) > (a.box.area, -a.id):
                s, o = j, i
            else:
                s, o = i, j
            cue = relation_geometry_cue(objs[s].box, objs[o].box, dets.size)
            rels.append(RelationUnit(s, o, cue))
    rels = tuple(rels)
    return VsuGraph(GEOMETRY, dets.size, objs, _attribute_units(dets, cfg), rels,
                    _edges(len(objs), rels))


# ---------------------------------------------------------------------------
# validation

DUPLICATE_ATTRIBUTE = "duplicate attribute unit"
MISSING_ATTRIBUTE = "missing attribute unit"
NON_BIPARTITE = "non-bipartite edge"
DANGLING_EDGE = "dangling edge endpoint"
RELATION_WIRING = "relation unit wiring"
DUPLICATE_GEOMETRY_PAIR = "duplicate geometry pair"
PAYLOAD_KIND = "payload kind mismatch"


class Violation(NamedTuple):
    kind: str
    detail: str


class GraphValidationError(ValueError):
    def __init__(self, violations: list[Violation]):
        self.violations = violations
        super().__init__("; ".join(f"{v.kind}: {v.detail}" for v in violations))


_ALLOWED_EDGES = {("obj", "attr"), ("obj", "rel"), ("rel", "obj")}


def graph_violations(g: VsuGraph) -> list[Violation]:
    out: list[Violation] = []
    n_obj, n_rel = len(g.objects), len(g.relation_units)
    counts = {"obj": n_obj, "attr": len(g.attribute_units), "rel": n_rel}

    owners = [i for i, _ in g.attribute_units]
    for i in range(n_obj):
        c = owners.count(i)
        if c > 1:
            out.append(Violation(DUPLICATE_ATTRIBUTE, f"object {i} has {c} attribute units"))
        elif c == 0:
            out.append(Violation(MISSING_ATTRIBUTE, f"object {i} has no attribute unit"))

    incoming = [[] for _ in range(n_rel)]
    outgoing = [[] for _ in range(n_rel)]
    for src, dst in g.edges:
        if (src[0], dst[0]) not in _ALLOWED_EDGES:
            out.append(Violation(NON_BIPARTITE, f"{src[0]}->{dst[0]} edge {src}->{dst}"))
            continue
        bad = [n for n in (src, dst) if not 0 <= n[1] < counts[n[0]]]
        if bad:
            out.append(Violation(DANGLING_EDGE, f"edge {src}->{dst} endpoint {bad[0]}"))
            continue
        if dst[0] == "rel":
            incoming[dst[1]].append(src[1])
        elif src[0] == "rel":
            outgoing[src[1]].append(dst[1])

    pairs = set()
    for k, r in enumerate(g.relation_units):
        if incoming[k] != [r.subject] or outgoing[k] != [r.object]:
            out.append(Violation(RELATION_WIRING,
                                 f"relation {k}: in {incoming[k]}, out {outgoing[k]}"))
        if g.kind == GEOMETRY:
            if np.shape(r.payload) != (8,):
                out.append(Violation(PAYLOAD_KIND, f"relation {k} lacks an 8-d cue"))
            key = frozenset((r.subject, r.object))
            if key in pairs:
                out.append(Violation(DUPLICATE_GEOMETRY_PAIR, f"pair {sorted(key)}"))
            pairs.add(key)
        elif not isinstance(r.payload, (int, np.integer)):
            out.append(Violation(PAYLOAD_KIND, f"relation {k} lacks a predicate id"))
    return out


def validate_graph(g: VsuGraph) -> bool:
    """Return True or raise :class:`GraphValidationError` listing violations."""
    violations = graph_violations(g)
    if violations:
        raise GraphValidationError(violations)
    return True
