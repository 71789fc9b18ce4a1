import numpy as np
import pytest

from conftest import make_object, random_scene
from vsua.boxmath import ImageSize, center_distance_norm, iou
from vsua.graph import (DUPLICATE_ATTRIBUTE, NO_ATTR, NON_BIPARTITE, DANGLING_EDGE,
                        DetectedRelation, GraphConfig, GraphValidationError,
                        InvalidDetectionsError, RelationUnit, SceneDetections, VsuGraph,
                        aggregate_attributes, build_geometry_graph, build_semantic_graph,
                        graph_violations, validate_graph)

RED, BIG, OLD, WET = 1, 2, 3, 4
IMG = ImageSize(10, 10)


def two_objects(relations=()):
    objs = (make_object(0, (3, 5, 2, 2)), make_object(1, (7, 5, 2, 2)))
    return SceneDetections(0, IMG, objs, tuple(relations))


@pytest.mark.parametrize("attrs,expected", [
    ([(RED, .9), (BIG, .7), (OLD, .4), (WET, .1)], (RED, BIG, OLD)),
    ([], (NO_ATTR,) * 3),
    ([(RED, .9)], (RED, NO_ATTR, NO_ATTR)),
])
def test_aggregate_attributes(attrs, expected):
    assert aggregate_attributes(make_object(0, (5, 5, 2, 2), attrs=attrs), 3) == expected


def test_semantic_graph_single_relation():
    g = build_semantic_graph(two_objects([DetectedRelation(0, 1, 5, 0.9)]))
    assert g.n_objects == 2 and len(g.attribute_units) == 2 and g.n_relations == 1
    assert g.relation_units[0] == RelationUnit(0, 1, 5)
    assert set(g.edges) == {(("obj", 0), ("attr", 0)), (("obj", 1), ("attr", 1)),
                            (("obj", 0), ("rel", 0)), (("rel", 0), ("obj", 1))}
    assert validate_graph(g)


def test_semantic_graph_no_relations():
    objs = tuple(make_object(i, (2 + 3 * i, 5, 2, 2)) for i in range(3))
    g = build_semantic_graph(SceneDetections(0, IMG, objs))
    assert (g.n_objects, len(g.attribute_units), g.n_relations) == (3, 3, 0)


def test_semantic_graph_top_k():
    rng = np.random.default_rng(0)
    scores = rng.permutation(25) / 25.0
    rels = [DetectedRelation(k % 2, 1 - k % 2, k, float(s)) for k, s in enumerate(scores)]
    g = build_semantic_graph(two_objects(rels), GraphConfig(max_semantic_relations=20))
    # sort-and-truncate oracle
    expected = {r.predicate_id for r in sorted(rels, key=lambda r: r.score)[-20:]}
    assert g.n_relations == 20
    assert {r.payload for r in g.relation_units} == expected


def test_semantic_graph_rejects_dangling():
    with pytest.raises(InvalidDetectionsError, match="missing object"):
        build_semantic_graph(two_objects([DetectedRelation(0, 7, 1, 0.5)]))


def test_geometry_identical_boxes():
    objs = (make_object(0, (5, 5, 4, 4)), make_object(1, (5, 5, 4, 4)))
    g = build_geometry_graph(SceneDetections(0, IMG, objs))
    assert g.n_relations == 1
    np.testing.assert_array_equal(g.relation_units[0].payload, [0, 0, 1, 1, 1, 1, 0, 0])
    assert g.relation_units[0].subject == 0        # equal area -> lower id


def test_geometry_far_boxes():
    objs = (make_object(0, (1, 1, 1, 1)), make_object(1, (9, 9, 1, 1)))
    assert build_geometry_graph(SceneDetections(0, IMG, objs)).n_relations == 0


def test_geometry_subject_is_larger():
    objs = (make_object(0, (5, 5, 2, 2)), make_object(1, (5, 5, 4, 4)))
    g = build_geometry_graph(SceneDetections(0, IMG, objs), GraphConfig(iou_threshold=0.1))
    assert g.relation_units[0][:2] == (1, 0)


def _count(scenes, **kw):
    return np.mean([build_geometry_graph(s, GraphConfig(**kw)).n_relations for s in scenes])


def test_geometry_threshold_monotone(rng):
    scenes = [random_scene(rng, n_obj=6) for _ in range(60)]
    counts = [_count(scenes, iou_threshold=t) for t in (0.0, 0.1, 0.2, 0.3, 0.4)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    dcounts = [_count(scenes, iou_threshold=0.05, dist_threshold=t) for t in (0.1, 0.3, 0.5, 1.0)]
    assert all(a <= b for a, b in zip(dcounts, dcounts[1:]))


def test_builders_satisfy_invariants(rng):
    for _ in range(50):
        s = random_scene(rng)
        cfg = GraphConfig(iou_threshold=0.05, max_semantic_relations=5)
        sem, geo = build_semantic_graph(s, cfg), build_geometry_graph(s, cfg)
        assert validate_graph(sem) and validate_graph(geo)
        assert sem.n_relations == min(5, len(s.relations))
        for r in geo.relation_units:
            a, b = s.objects[r.subject].box, s.objects[r.object].box
            assert a.area >= b.area
            assert iou(a, b) >= 0.05 and center_distance_norm(a, b, s.size) <= 0.5


def test_validate_non_bipartite():
    g = build_semantic_graph(two_objects([DetectedRelation(0, 1, 1, .9),
                                          DetectedRelation(1, 0, 2, .8)]))
    bad = VsuGraph(g.kind, g.size, g.objects, g.attribute_units, g.relation_units,
                   g.edges + ((("rel", 0), ("rel", 1)),))
    with pytest.raises(GraphValidationError) as e:
        validate_graph(bad)
    assert NON_BIPARTITE in [v.kind for v in e.value.violations]


def test_validate_duplicate_attribute_unit():
    g = build_semantic_graph(two_objects())
    bad = VsuGraph(g.kind, g.size, g.objects, g.attribute_units + ((0, (1, 0, 0)),),
                   g.relation_units, g.edges)
    assert DUPLICATE_ATTRIBUTE in [v.kind for v in graph_violations(bad)]


def test_validate_dangling_edge():
    g = build_semantic_graph(two_objects())
    bad = VsuGraph(g.kind, g.size, g.objects, g.attribute_units, g.relation_units,
                   g.edges + ((("obj", 0), ("rel", 3)),))
    assert DANGLING_EDGE in [v.kind for v in graph_violations(bad)]


def test_graph_config_validation():
    with pytest.raises(ValueError):
        GraphConfig(iou_threshold=1.5)
    with pytest.raises(ValueError):
        GraphConfig(n_attrs=0)
