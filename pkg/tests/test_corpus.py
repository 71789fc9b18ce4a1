import json

import numpy as np
import pytest

from vsua.boxmath import Box
from vsua.corpus import (BOS, EOS, PAD, UNK, DanglingReferenceError, DetectionFileError,
                         FeatureShapeError, LabelSpaces, NO_ATTR_TOKEN, SynthConfig,
                         UnknownLabelError, Vocabulary, build_vocabulary, detections_to_doc,
                         encode_caption, load_captions, load_detections, parse_detections,
                         save_captions, save_detections, spatial_predicate, synth_generate,
                         tokenize)
from vsua.graph import GraphConfig, build_geometry_graph, build_semantic_graph, validate_graph

LABELS = LabelSpaces(["cat", "dog"], ["black", "small"], ["on", "near"])


def minimal_doc(**over):
    doc = {"image": {"id": 7, "width": 100, "height": 80},
           "objects": [{"id": 0, "box": [50, 40, 20, 10], "label": "cat", "score": 0.9,
                        "feature": [0.1, 0.2, 0.3],
                        "attributes": [{"label": "black", "score": 0.8}]}],
           "relationships": []}
    doc.update(over)
    return doc


# --- vocabulary --------------------------------------------------------------

def test_min_count_rule():
    caps = [["cat"]] * 5 + [["dax"]] * 4
    v = build_vocabulary(caps)
    assert "cat" in v and "dax" not in v
    assert v.encode(["dax"]) == [BOS, UNK, EOS]


def test_truncation_to_max_len():
    v = build_vocabulary([["w"] * 20] * 5)
    assert len(v.encode(["w"] * 20)) == 16 + 2


def test_empty_token_and_corpus():
    v = build_vocabulary([["", "a"]] * 5, min_count=1)
    assert "" not in v
    with pytest.raises(ValueError):
        build_vocabulary([])


def test_encode_examples():
    v = Vocabulary(["x", "y", "z", "cat"])
    assert encode_caption(v, []) == [BOS, EOS]
    assert v.stoi["cat"] == 7
    assert encode_caption(v, ["cat"]) == [1, 7, 2]


def test_reserved_ids_fixed():
    v = build_vocabulary([["b", "a"]], min_count=1)
    assert v.itos[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
    assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)


def test_round_trip(rng):
    words = [f"w{i}" for i in range(12)]
    caps = [list(rng.choice(words, size=int(rng.integers(0, 16)))) for _ in range(50)]
    v = build_vocabulary(caps, min_count=1)
    for c in caps:
        assert v.decode(v.encode(c)) == c


def test_order_independent_ids(rng):
    caps = [list(rng.choice(list("abcdefg"), size=5)) for _ in range(40)]
    a = build_vocabulary(caps, min_count=2)
    b = build_vocabulary([caps[i] for i in rng.permutation(len(caps))], min_count=2)
    assert a.itos == b.itos and a.content_hash == b.content_hash


def test_frequency_then_lexicographic():
    v = build_vocabulary([["b", "a", "c", "c"]], min_count=1)
    assert v.itos[4:] == ["c", "a", "b"]


def test_vocab_file_round_trip(tmp_path):
    v = build_vocabulary([["b", "a", "c", "c"]], min_count=1)
    v.save(tmp_path / "vocab.txt")
    lines = (tmp_path / "vocab.txt").read_text().splitlines()
    assert lines == ["c", "a", "b"]          # line number = id - 4
    assert Vocabulary.load(tmp_path / "vocab.txt").itos == v.itos


def test_tokenize_lowercases():
    assert tokenize("A Red  Circle\n") == ["a", "red", "circle"]


def test_label_spaces_reserve_no_attr():
    assert LABELS.attributes[0] == NO_ATTR_TOKEN
    assert LABELS.attribute_id("black") == 1
    assert LabelSpaces.from_dict(LABELS.to_dict()) == LABELS


# --- detection files ---------------------------------------------------------

def test_minimal_document():
    d = parse_detections(minimal_doc(), LABELS, d_v=3)
    assert d.image_id == 7 and len(d.objects) == 1
    o = d.objects[0]
    assert o.box == Box(50, 40, 20, 10) and o.label_id == 0 and o.attributes == ((1, 0.8),)


def test_dangling_relationship():
    doc = minimal_doc(relationships=[{"subject": 0, "predicate": "on", "object": 4}])
    with pytest.raises(DanglingReferenceError, match="image 7"):
        parse_detections(doc, LABELS)


def test_feature_length_mismatch():
    with pytest.raises(FeatureShapeError, match="image 7"):
        parse_detections(minimal_doc(), LABELS, d_v=4)


def test_unknown_label_strict_and_lenient():
    doc = minimal_doc()
    doc["objects"][0]["label"] = "zebra"
    with pytest.raises(UnknownLabelError, match="image 7"):
        parse_detections(doc, LABELS)
    assert parse_detections(doc, LABELS, strict=False).objects[0].label_id == 0


def test_malformed_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(DetectionFileError, match="malformed JSON"):
        load_detections(p, LABELS)
    with pytest.raises(DetectionFileError):
        parse_detections({"objects": []}, LABELS)


def test_error_kinds_are_distinct():
    kinds = {UnknownLabelError, DanglingReferenceError, FeatureShapeError}
    assert len(kinds) == 3 and all(issubclass(k, DetectionFileError) for k in kinds)


def test_detection_file_round_trip(tmp_path):
    ds = synth_generate(3, 4)
    for ex in ds.examples:
        p = tmp_path / f"{ex.detections.image_id}.json"
        save_detections(p, ex.detections, ds.labels)
        back = load_detections(p, ds.labels, d_v=32)
        assert detections_to_doc(back, ds.labels) == detections_to_doc(ex.detections, ds.labels)
        assert json.loads(p.read_text()) == detections_to_doc(ex.detections, ds.labels)


def test_captions_file_round_trip(tmp_path):
    caps = {2: ["a b"], 1: ["c", "d e"]}
    save_captions(tmp_path / "c.json", caps)
    assert load_captions(tmp_path / "c.json") == caps
    assert [e["image_id"] for e in json.loads((tmp_path / "c.json").read_text())] == [1, 2]


# --- synthetic corpus --------------------------------------------------------

def test_synth_deterministic():
    a, b = synth_generate(11, 20), synth_generate(11, 20)
    docs = lambda ds: json.dumps([detections_to_doc(e.detections, ds.labels) for e in ds.examples])
    assert docs(a) == docs(b)
    assert [e.captions for e in a.examples] == [e.captions for e in b.examples]
    assert docs(a) != docs(synth_generate(12, 20))


def test_synth_empty():
    assert len(synth_generate(0, 0)) == 0


def test_synth_scenes_are_well_formed():
    cfg = SynthConfig()
    ds = synth_generate(5, 100, cfg)
    for ex in ds.examples:
        d = ex.detections
        assert cfg.min_objects <= len(d.objects) <= cfg.max_objects
        assert all(o.box.w > 0 and o.box.h > 0 for o in d.objects)
        assert len(ex.captions) == 2
        sem, geo = build_semantic_graph(d), build_geometry_graph(d, GraphConfig())
        assert validate_graph(sem) and validate_graph(geo)


def test_synth_captions_in_vocabulary():
    ds = synth_generate(1, 200)
    v = build_vocabulary(ds.all_captions())
    assert all(UNK not in v.encode(c) for c in ds.all_captions())


def test_synth_caption_follows_layout():
    ds = synth_generate(2, 50)
    for ex in ds.examples:
        objs = ex.detections.objects
        big, small = sorted(range(len(objs)), key=lambda i: (-objs[i].box.area, i))[:2]
        pred = spatial_predicate(objs[big].box, objs[small].box, 0.1).split()
        assert ex.captions[0][3:3 + len(pred)] == pred
        assert ex.captions[0][2] == ds.labels.objects[objs[big].label_id]
        assert ex.captions[0][1] == ds.labels.attributes[max(objs[big].attributes,
                                                              key=lambda a: a[1])[0]]


def test_spatial_predicate_examples():
    a = Box(20, 50, 10, 10)
    assert spatial_predicate(a, Box(80, 50, 10, 10), 0.1) == "left of"
    assert spatial_predicate(a, Box(20, 90, 10, 10), 0.1) == "above"
    assert spatial_predicate(a, Box(22, 50, 10, 10), 0.1) == "overlapping"


def test_appearance_is_anchored_on_shape_and_color():
    ds = synth_generate(4, 60)
    groups = {}
    for ex in ds.examples:
        for o in ex.detections.objects:
            color = max(o.attributes, key=lambda a: a[1])[0]
            groups.setdefault((o.label_id, color), []).append(o.appearance)
    resid = np.concatenate([np.asarray(v) - np.mean(v, axis=0) for v in groups.values()])
    n_groups = len(groups)
    pooled = np.sqrt((resid ** 2).sum() / ((len(resid) - n_groups) * resid.shape[1]))
    assert pooled == pytest.approx(SynthConfig().feature_noise, rel=0.1)
    means = [np.mean(v, axis=0) for v in groups.values()]
    gaps = [np.abs(a - b).max() for i, a in enumerate(means) for b in means[:i]]
    assert min(gaps) > 0.5


def test_color_feature_scale_zero_gives_shape_only_appearance():
    ds = synth_generate(4, 60, SynthConfig(color_feature_scale=0.0))
    by_label = {}
    for ex in ds.examples:
        for o in ex.detections.objects:
            by_label.setdefault(o.label_id, []).append(o.appearance)
    assert max(np.std(v, axis=0).max() for v in by_label.values() if len(v) > 1) < 0.2
