"""Vocabularies, caption encoding, detection files and the synthetic corpus."""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .boxmath import Box, ImageSize, iou
from .graph import DetectedObject, DetectedRelation, SceneDetections

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
NO_ATTR_TOKEN = "<no_attr>"


class DetectionFileError(ValueError):
    """Malformed or inconsistent detection document."""


class UnknownLabelError(DetectionFileError):
    pass


class DanglingReferenceError(DetectionFileError):
    pass


class FeatureShapeError(DetectionFileError):
    pass


def tokenize(sentence: str) -> list[str]:
    return sentence.lower().split()


class Vocabulary:
    """Word inventory with reserved ids PAD=0, BOS=1, EOS=2, UNK=3."""

    def __init__(self, tokens: Sequence[str], max_len: int = 16):
        self.itos = list(RESERVED) + list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")
        self.max_len = max_len

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    @property
    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def encode(self, tokens: Sequence[str]) -> list[int]:
        ids = [self.stoi.get(t, UNK) for t in tokens[:self.max_len]]
        return [BOS] + ids + [EOS]

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Drop BOS/PAD, stop at EOS."""
        out = []
        for i in ids:
            if i == EOS:
                break
            if i in (BOS, PAD):
                continue
            out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(RESERVED):]),
                              encoding="utf-8")

    @classmethod
    def load(cls, path, max_len: int = 16) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln], max_len=max_len)


def build_vocabulary(captions: Iterable[Sequence[str]], min_count: int = 5,
                     max_len: int = 16) -> Vocabulary:
    counts = Counter()
    n = 0
    for cap in captions:
        n += 1
        counts.update(t for t in cap if t)
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c >= min_count and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept, max_len=max_len)


def encode_caption(vocab: Vocabulary, tokens: Sequence[str]) -> list[int]:
    return vocab.encode(tokens)


@dataclass
class LabelSpaces:
    """Object, attribute and relation label inventories.

    The attribute space reserves id 0 for NO_ATTR padding.
    """

    objects: list[str]
    attributes: list[str]
    relations: list[str]

    def __post_init__(self):
        if not self.attributes or self.attributes[0] != NO_ATTR_TOKEN:
            self.attributes = [NO_ATTR_TOKEN] + [a for a in self.attributes
                                                 if a != NO_ATTR_TOKEN]
        self._obj = {s: i for i, s in enumerate(self.objects)}
        self._attr = {s: i for i, s in enumerate(self.attributes)}
        self._rel = {s: i for i, s in enumerate(self.relations)}

    def object_id(self, label: str) -> int | None:
        return self._obj.get(label)

    def attribute_id(self, label: str) -> int | None:
        return self._attr.get(label)

    def relation_id(self, label: str) -> int | None:
        return self._rel.get(label)

    def to_dict(self) -> dict:
        return {"objects": self.objects, "attributes": self.attributes,
                "relations": self.relations}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSpaces":
        return cls(list(d["objects"]), list(d["attributes"]), list(d["relations"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "LabelSpaces":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# detection documents

def _resolve(lookup, label: str, what: str, image_id, strict: bool) -> int:
    i = lookup(label)
    if i is None:
        if strict:
            raise UnknownLabelError(f"image {image_id}: unknown {what} label {label!r}")
        return 0
    return i


def parse_detections(doc: dict, labels: LabelSpaces, d_v: int | None = None,
                     strict: bool = True) -> SceneDetections:
    """Turn one detection document into :class:`SceneDetections`.

    Unknown labels raise in strict mode and map to id 0 otherwise.
    """
    try:
        img = doc["image"]
        image_id = int(img["id"])
        size = ImageSize(float(img["width"]), float(img["height"]))
        raw_objs = doc["objects"]
        raw_rels = doc.get("relationships", [])
    except (KeyError, TypeError, ValueError) as e:
        raise DetectionFileError(f"malformed detection document: {e!r}") from None
    objects = []
    seen = set()
    for o in raw_objs:
        try:
            oid = int(o["id"])
            box = Box(*map(float, o["box"])).validate()
            feat = np.asarray(o["feature"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as e:
            raise DetectionFileError(f"image {image_id}: malformed object: {e!r}") from None
        if oid in seen:
            raise DetectionFileError(f"image {image_id}: duplicate object id {oid}")
        seen.add(oid)
        if feat.ndim != 1 or (d_v is not None and feat.shape[0] != d_v):
            raise FeatureShapeError(
                f"image {image_id}: object {oid} feature length {feat.size} != {d_v}")
        attrs = sorted(((_resolve(labels.attribute_id, a["label"], "attribute", image_id,
                                  strict), float(a["score"]))
                        for a in o.get("attributes", [])), key=lambda a: -a[1])
        objects.append(DetectedObject(
            oid, box, _resolve(labels.object_id, o["label"], "object", image_id, strict),
            float(o.get("score", 1.0)), feat, tuple(attrs)))
    relations = []
    for r in raw_rels:
        try:
            s, t = int(r["subject"]), int(r["object"])
        except (KeyError, TypeError, ValueError) as e:
            raise DetectionFileError(f"image {image_id}: malformed relation: {e!r}") from None
        if s not in seen or t not in seen:
            raise DanglingReferenceError(
                f"image {image_id}: relationship ({s}, {r.get('predicate')!r}, {t}) "
                f"references a missing object id")
        if s == t:
            raise DetectionFileError(f"image {image_id}: relationship of object {s} with itself")
        relations.append(DetectedRelation(
            s, t, _resolve(labels.relation_id, r["predicate"], "relation", image_id, strict),
            float(r.get("score", 1.0))))
    return SceneDetections(image_id, size, tuple(objects), tuple(relations))


def load_detections(path, labels: LabelSpaces, d_v: int | None = None,
                    strict: bool = True) -> SceneDetections:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise DetectionFileError(f"{path}: malformed JSON: {e}") from None
    return parse_detections(doc, labels, d_v, strict)


def detections_to_doc(dets: SceneDetections, labels: LabelSpaces) -> dict:
    def num(x):
        x = float(x)
        return int(x) if x.is_integer() else x

    return {
        "image": {"id": dets.image_id, "width": num(dets.size.w), "height": num(dets.size.h)},
        "objects": [{
            "id": o.id, "box": [num(v) for v in o.box], "label": labels.objects[o.label_id],
            "score": o.score, "feature": [float(v) for v in o.appearance],
            "attributes": [{"label": labels.attributes[a], "score": s} for a, s in o.attributes],
        } for o in dets.objects],
        "relationships": [{
            "subject": r.subject_id, "object": r.object_id,
            "predicate": labels.relations[r.predicate_id], "score": r.score,
        } for r in dets.relations],
    }


def save_detections(path, dets: SceneDetections, labels: LabelSpaces) -> None:
    Path(path).write_text(json.dumps(detections_to_doc(dets, labels)), encoding="utf-8")


def load_captions(path) -> dict[int, list[str]]:
    entries = json.loads(Path(path).read_text(encoding="utf-8"))
    return {int(e["image_id"]): list(e["captions"]) for e in entries}


def save_captions(path, captions: dict[int, list[str]]) -> None:
    entries = [{"image_id": k, "captions": v} for k, v in sorted(captions.items())]
    Path(path).write_text(json.dumps(entries, indent=1), encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic scenes

SHAPES = ("circle", "square", "triangle", "star", "heart", "cross", "ring", "diamond")
COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
PREDICATES = ("left of", "right of", "above", "below", "overlapping")


@dataclass(frozen=True)
class SynthConfig:
    canvas: int = 100
    grid: int = 10
    min_objects: int = 2
    max_objects: int = 5
    d_v: int = 32
    feature_noise: float = 0.1
    # appearance = shape anchor + this * color anchor + noise, as region
    # features from a real detector carry color as well as shape
    color_feature_scale: float = 0.5
    overlap_iou: float = 0.1
    # the two largest objects differ in area by at least this factor
    min_area_ratio: float = 1.3
    n_shapes: int = len(SHAPES)
    n_colors: int = len(COLORS)
    anchor_seed: int = 1234


@dataclass
class Example:
    detections: SceneDetections
    captions: list[list[str]]


@dataclass
class Dataset:
    examples: list[Example]
    labels: LabelSpaces
    split: str = "train"

    def __len__(self) -> int:
        return len(self.examples)

    def all_captions(self) -> list[list[str]]:
        return [c for ex in self.examples for c in ex.captions]


def synth_labels(cfg: SynthConfig = SynthConfig()) -> LabelSpaces:
    return LabelSpaces(list(SHAPES[:cfg.n_shapes]), list(COLORS[:cfg.n_colors]),
                       list(PREDICATES))


def spatial_predicate(a: Box, b: Box, overlap_iou: float) -> str:
    """Predicate for ``a <pred> b`` from the true layout (y grows downward)."""
    if iou(a, b) >= overlap_iou:
        return "overlapping"
    dx, dy = b.cx - a.cx, b.cy - a.cy
    if abs(dx) >= abs(dy):
        return "left of" if dx > 0 else "right of"
    return "above" if dy > 0 else "below"


def _phrase(color: str, shape: str) -> list[str]:
    return ["a", color, shape]


def _sample_scene(rng: np.random.Generator, cfg: SynthConfig):
    cell = cfg.canvas / cfg.grid
    while True:
        n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        boxes = []
        for _ in range(n):
            w = float(rng.integers(2, 6) * cell)
            h = float(rng.integers(2, 6) * cell)
            cx = float(rng.integers(1, cfg.grid)) * cell
            cy = float(rng.integers(1, cfg.grid)) * cell
            boxes.append(Box(cx, cy, w, h))
        areas = sorted((b.area for b in boxes), reverse=True)
        if areas[0] >= cfg.min_area_ratio * areas[1]:
            return boxes


def synth_generate(seed: int, n_images: int, cfg: SynthConfig = SynthConfig()) -> Dataset:
    """Deterministic toy scenes with two template captions each.

    Caption 1 describes the largest object relative to the second largest;
    caption 2 describes the same pair from the other side.
    """
    labels = synth_labels(cfg)
    anchor_rng = np.random.default_rng(cfg.anchor_seed)
    anchors = anchor_rng.normal(size=(cfg.n_shapes, cfg.d_v))
    color_anchors = anchor_rng.normal(size=(cfg.n_colors, cfg.d_v))
    rng = np.random.default_rng(seed)
    size = ImageSize(float(cfg.canvas), float(cfg.canvas))
    examples = []
    for image_id in range(n_images):
        boxes = _sample_scene(rng, cfg)
        n = len(boxes)
        shapes = rng.integers(0, cfg.n_shapes, size=n)
        colors = rng.integers(0, cfg.n_colors, size=n)
        objects = []
        for i, box in enumerate(boxes):
            attrs = [(int(colors[i]) + 1, float(rng.uniform(0.7, 1.0)))]
            for _ in range(int(rng.integers(0, 3))):
                other = int(rng.integers(0, cfg.n_colors)) + 1
                if other not in (a for a, _ in attrs):
                    attrs.append((other, float(rng.uniform(0.0, 0.5))))
            attrs.sort(key=lambda a: -a[1])
            feat = (anchors[shapes[i]] + cfg.color_feature_scale * color_anchors[colors[i]]
                    + cfg.feature_noise * rng.normal(size=cfg.d_v))
            objects.append(DetectedObject(i, box, int(shapes[i]),
                                          float(rng.uniform(0.6, 1.0)), feat, tuple(attrs)))
        relations = []
        for i in range(n):
            for j in range(n):
                if i != j:
                    pred = spatial_predicate(boxes[i], boxes[j], cfg.overlap_iou)
                    relations.append(DetectedRelation(i, j, PREDICATES.index(pred),
                                                      float(rng.uniform(0.0, 1.0))))
        order = sorted(range(n), key=lambda i: (-boxes[i].area, i))
        big, small = order[0], order[1]

        def describe(a, b):
            pred = spatial_predicate(boxes[a], boxes[b], cfg.overlap_iou)
            return (_phrase(COLORS[colors[a]], SHAPES[shapes[a]]) + pred.split()
                    + _phrase(COLORS[colors[b]], SHAPES[shapes[b]]))

        dets = SceneDetections(image_id, size, tuple(objects), tuple(relations))
        examples.append(Example(dets, [describe(big, small), describe(small, big)]))
    return Dataset(examples, labels)
