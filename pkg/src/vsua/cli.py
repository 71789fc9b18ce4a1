"""Batch command-line front end.

Subcommands: ``synth``, ``validate``, ``train``, ``caption``, ``eval`` and
``graph-dump``.  Every command writes a run manifest next to its outputs,
exits 0 on success, and reports any failure as one JSON line on stderr.
Set ``VSUA_THREADS`` to cap the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import __version__, checkpoint
from .corpus import (Dataset, Example, LabelSpaces, Vocabulary, build_vocabulary,
                     detections_to_doc, load_captions, load_detections, save_captions,
                     save_detections, synth_generate, tokenize)
from .decoding import beam_search, strip_eos
from .graph import (SEMANTIC, GraphConfig, VsuGraph, build_geometry_graph,
                    build_semantic_graph, graph_violations)
from .metrics import EvalPair, evaluate
from .model import GraphBatch, ModelConfig, VsuaModel
from .training import TrainConfig, build_graphs, prepare, train

ENV_THREADS = "VSUA_THREADS"
log = logging.getLogger("vsua")


class CliError(Exception):
    """A user-facing failure with a short machine-readable kind."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


# ---------------------------------------------------------------------------
# files

def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, command: str, config: dict, seed, inputs, outputs,
                   started: float) -> None:
    doc = {
        "command": command,
        "argv": sys.argv[1:],
        "version": __version__,
        "config": config,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "wall_clock_s": round(time.perf_counter() - started, 3),
    }
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _out_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError("unwritable_path", f"cannot create {path}: {e.strerror}") from None
    if not os.access(path, os.W_OK):
        raise CliError("unwritable_path", f"{path} is not writable")
    return path


def _out_file(path) -> Path:
    path = Path(path)
    _out_dir(path.parent if str(path.parent) else ".")
    return path


# ---------------------------------------------------------------------------
# dataset directories: labels.json, captions.json, detections/<id>.json

def _detection_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise CliError("missing_path", f"{path} does not exist")
    return sorted(path.glob("*.json"))


def _find_labels(explicit, *near: Path) -> LabelSpaces:
    if explicit:
        candidates = [Path(explicit)]
    else:
        candidates = [d / "labels.json" for p in near for d in (p, p.parent)]
    for c in candidates:
        if c.is_file():
            return LabelSpaces.load(c)
    raise CliError("missing_path", "no labels.json found; pass --labels")


def load_scenes(path, labels: LabelSpaces, d_v=None, strict=True) -> list:
    scenes = [load_detections(p, labels, d_v, strict) for p in _detection_files(Path(path))]
    return sorted(scenes, key=lambda d: d.image_id)


def load_dataset_dir(path, split: str = "train") -> Dataset:
    root = Path(path)
    if not root.is_dir():
        raise CliError("missing_path", f"data directory {root} does not exist")
    labels = _find_labels(None, root)
    captions = load_captions(root / "captions.json")
    scenes = load_scenes(root / "detections", labels)
    ids = {d.image_id for d in scenes}
    if ids != set(captions):
        raise CliError("image_id_mismatch",
                       f"{root}: detections and captions cover different image ids "
                       f"({len(ids ^ set(captions))} unmatched)")
    examples = []
    for d in scenes:
        caps = [tokenize(c) for c in captions[d.image_id]]
        if not caps:
            raise CliError("missing_captions", f"image {d.image_id} has no captions")
        examples.append(Example(d, caps))
    return Dataset(examples, labels, split)


# ---------------------------------------------------------------------------
# flat YAML configuration

_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_GRAPH_FIELDS = {f.name: f for f in dataclasses.fields(GraphConfig)}
DERIVED_KEYS = ("vocab_size", "n_obj_labels", "n_attr_labels", "n_rel_labels", "d_v")
EXTRA_DEFAULTS = {"min_count": 5}


def config_keys() -> list[str]:
    return sorted(set(_MODEL_FIELDS) | set(_TRAIN_FIELDS) | set(_GRAPH_FIELDS)
                  | set(EXTRA_DEFAULTS))


def _default(name):
    for fields in (_MODEL_FIELDS, _TRAIN_FIELDS, _GRAPH_FIELDS):
        f = fields.get(name)
        if f is not None and f.default is not dataclasses.MISSING:
            return f.default
    return EXTRA_DEFAULTS.get(name)


def _coerce(name: str, value):
    if name == "unit_set":
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
            raise CliError("config", "unit_set must be a list of O, A, RS, RG")
        bad = set(value) - {"O", "A", "RS", "RG"}
        if bad:
            raise CliError("config", f"unit_set has unknown categories {sorted(bad)}")
        return tuple(value)
    default = _default(name)
    if name == "captions_per_image":
        if value is None or (isinstance(value, int) and not isinstance(value, bool)):
            return value
        raise CliError("config", "captions_per_image must be an integer or null")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise CliError("config", f"{name} must be true or false")
        return value
    if isinstance(default, float) or name == "lr0":
        try:
            return float(value)
        except (TypeError, ValueError):
            raise CliError("config", f"{name} must be a number, got {value!r}") from None
    if isinstance(value, bool) or not isinstance(value, int):
        raise CliError("config", f"{name} must be an integer, got {value!r}")
    return value


def load_config(path) -> dict:
    """Read a flat key: value YAML file; unknown keys are errors."""
    path = Path(path)
    if not path.is_file():
        raise CliError("missing_path", f"config file {path} does not exist")
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(raw, dict):
        raise CliError("config", f"{path}: expected a flat mapping of keys to values")
    known = set(config_keys())
    unknown = sorted(set(map(str, raw)) - known)
    if unknown:
        raise CliError("config", f"{path}: unknown config keys {unknown}")
    return {k: _coerce(k, v) for k, v in raw.items()}


def resolve_config(cfg: dict, vocab: Vocabulary, labels: LabelSpaces, d_v: int):
    derived = {"vocab_size": len(vocab), "n_obj_labels": len(labels.objects),
               "n_attr_labels": len(labels.attributes), "n_rel_labels": len(labels.relations),
               "d_v": d_v}
    for k, v in derived.items():
        if k in cfg and cfg[k] != v:
            raise CliError("config_mismatch",
                           f"config sets {k}={cfg[k]} but the data/vocabulary give {v}")
    merged = {**cfg, **derived}
    pick = lambda fields: {k: merged[k] for k in fields if k in merged}
    try:
        model_cfg = ModelConfig(**pick(_MODEL_FIELDS))
        train_cfg = TrainConfig(**pick(_TRAIN_FIELDS))
        graph_cfg = GraphConfig(**pick(_GRAPH_FIELDS))
    except ValueError as e:
        raise CliError("config", str(e)) from None
    return model_cfg, train_cfg, graph_cfg


def flat_config(model_cfg: ModelConfig, train_cfg: TrainConfig, graph_cfg: GraphConfig,
                min_count: int) -> dict:
    out = {**dataclasses.asdict(graph_cfg), **dataclasses.asdict(train_cfg),
           **model_cfg.to_dict(), "min_count": min_count}
    return dict(sorted(out.items()))


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> dict:
    started = time.perf_counter()
    out = _out_dir(args.out)
    det_dir = _out_dir(out / "detections")
    ds = synth_generate(args.seed, args.n)
    outputs = []
    for ex in ds.examples:
        p = det_dir / f"{ex.detections.image_id:06d}.json"
        save_detections(p, ex.detections, ds.labels)
        outputs.append(p)
    save_captions(out / "captions.json",
                  {ex.detections.image_id: [" ".join(c) for c in ex.captions]
                   for ex in ds.examples})
    ds.labels.save(out / "labels.json")
    outputs += [out / "captions.json", out / "labels.json"]
    write_manifest(out / "manifest.json", "synth", {"seed": args.seed, "n": args.n},
                   args.seed, [], outputs, started)
    return {"images": len(ds), "out": str(out)}


def cmd_validate(args) -> dict:
    root = Path(args.data)
    det_dir = root / "detections" if (root / "detections").is_dir() else root
    labels = _find_labels(args.labels, root)
    scenes = load_scenes(det_dir, labels)
    cfg = GraphConfig()
    problems = []
    for d in scenes:
        for g in (build_semantic_graph(d, cfg), build_geometry_graph(d, cfg)):
            problems += [f"image {d.image_id} {g.kind}: {v.kind}: {v.detail}"
                         for v in graph_violations(g)]
    if problems:
        raise CliError("invalid_graph", f"{len(problems)} violation(s); first: {problems[0]}")
    return {"images": len(scenes), "valid": True}


def cmd_train(args) -> dict:
    started = time.perf_counter()
    cfg = load_config(args.config)
    data = load_dataset_dir(args.data, "train")
    val = load_dataset_dir(args.val, "val") if args.val else None
    if not len(data):
        raise CliError("empty_dataset", f"{args.data} holds no images")
    min_count = cfg.get("min_count", EXTRA_DEFAULTS["min_count"])
    max_len = cfg.get("max_len", _default("max_len"))
    vocab = build_vocabulary(data.all_captions(), min_count=min_count, max_len=max_len)
    d_v = int(data.examples[0].detections.objects[0].appearance.shape[0])
    model_cfg, train_cfg, graph_cfg = resolve_config(cfg, vocab, data.labels, d_v)
    out = _out_dir(args.out)
    model = VsuaModel(model_cfg, seed=train_cfg.seed)
    train_data = prepare(data, vocab, graph_cfg, model)
    val_data = prepare(val, vocab, graph_cfg, model) if val is not None else ()
    log_path = out / "log.ndjson"
    log_path.write_text("", encoding="utf-8")
    result = train(model, train_data, train_cfg, vocab, val_data, out_dir=out,
                   log_path=log_path)
    vocab.save(out / "vocab.txt")
    data.labels.save(out / "labels.json")
    resolved = flat_config(model_cfg, train_cfg, graph_cfg, min_count)
    atomic_write_text(out / "config.json", json.dumps(resolved, indent=2) + "\n")
    outputs = [out / n for n in ("best.ckpt", "last.ckpt", "log.ndjson", "vocab.txt",
                                 "labels.json", "config.json")]
    inputs = [args.data, args.config] + ([args.val] if args.val else [])
    write_manifest(out / "manifest.json", "train", resolved, train_cfg.seed, inputs, outputs,
                   started)
    return {"epochs": len(result.log), "best_val_cider": result.best_val_cider,
            "out": str(out)}


def _load_run(ckpt_path, vocab_path, labels_path, config_path):
    ckpt_path = Path(ckpt_path)
    if not ckpt_path.is_file():
        raise CliError("missing_path", f"checkpoint {ckpt_path} does not exist")
    model, header = checkpoint.load(ckpt_path)
    run_dir = ckpt_path.parent
    vocab = Vocabulary.load(vocab_path or run_dir / "vocab.txt")
    labels = _find_labels(labels_path, run_dir)
    cfg_file = Path(config_path) if config_path else run_dir / "config.json"
    graph_cfg = GraphConfig()
    if cfg_file.is_file():
        flat = json.loads(cfg_file.read_text(encoding="utf-8"))
        graph_cfg = GraphConfig(**{k: flat[k] for k in _GRAPH_FIELDS if k in flat})
        vocab.max_len = flat.get("max_len", vocab.max_len)
    c = model.config
    if header.get("vocab_hash") and header["vocab_hash"] != vocab.content_hash:
        raise CliError("checkpoint_mismatch", "vocabulary does not match the checkpoint")
    if (len(vocab), len(labels.objects), len(labels.attributes), len(labels.relations)) != \
            (c.vocab_size, c.n_obj_labels, c.n_attr_labels, c.n_rel_labels):
        raise CliError("checkpoint_mismatch",
                       "vocabulary or label spaces do not match the checkpoint config")
    if graph_cfg.n_attrs != c.n_attrs:
        raise CliError("checkpoint_mismatch", "graph n_attrs differs from the model's")
    return model, vocab, labels, graph_cfg


def cmd_caption(args) -> dict:
    started = time.perf_counter()
    if args.beam < 1:
        raise CliError("usage", "--beam must be >= 1")
    model, vocab, labels, graph_cfg = _load_run(args.ckpt, args.vocab, args.labels,
                                                args.config)
    scenes = load_scenes(args.detections, labels, model.config.d_v)
    results = []
    for d in scenes:
        sem, geo = build_graphs(d, graph_cfg, model.config)
        batch = GraphBatch.from_graphs([sem] if sem else None, [geo] if geo else None)
        top = beam_search(model, batch, beam=args.beam, max_len=args.max_len)[0]
        words = vocab.decode(strip_eos(top.tokens))
        entry = {"image_id": d.image_id, "caption": " ".join(words), "logprob": top.logprob}
        if args.dump_gates:
            # one row per generated token, the closing <eos> included
            entry["gates"] = [dict(word=vocab.itos[t], **{cat: float(g) for cat, g in
                                                          zip(model.config.unit_set, gates)})
                              for t, gates in zip(top.tokens, top.gates)]
        results.append(entry)
    text = json.dumps(results, indent=1) + "\n"
    if args.out:
        out = _out_file(args.out)
        atomic_write_text(out, text)
        write_manifest(out.with_name(out.name + ".manifest.json"), "caption",
                       {"beam": args.beam, "max_len": args.max_len,
                        "dump_gates": args.dump_gates, **dataclasses.asdict(graph_cfg)},
                       model.seed, [args.ckpt, args.detections], [out], started)
        return {"images": len(results), "out": str(out)}
    sys.stdout.write(text)
    return {}


def _read_predictions(path) -> dict[int, str]:
    entries = json.loads(Path(path).read_text(encoding="utf-8"))
    out = {}
    for e in entries:
        cap = e["caption"] if "caption" in e else e["captions"][0]
        out[int(e["image_id"])] = cap
    return out


def cmd_eval(args) -> dict:
    started = time.perf_counter()
    for p in (args.pred, args.refs):
        if not Path(p).is_file():
            raise CliError("missing_path", f"{p} does not exist")
    pred = _read_predictions(args.pred)
    refs = load_captions(args.refs)
    if set(pred) != set(refs):
        missing = sorted(set(refs) - set(pred))[:5]
        extra = sorted(set(pred) - set(refs))[:5]
        raise CliError("image_id_mismatch",
                       f"predictions and references differ: missing {missing}, extra {extra}")
    corpus = [EvalPair(tokenize(pred[i]), [tokenize(r) for r in refs[i]])
              for i in sorted(refs)]
    metrics = {"images": len(corpus), **evaluate(corpus)}
    text = json.dumps(metrics, indent=1) + "\n"
    if args.out:
        out = _out_file(args.out)
        atomic_write_text(out, text)
        write_manifest(out.with_name(out.name + ".manifest.json"), "eval", {}, None,
                       [args.pred, args.refs], [out], started)
        return {"out": str(out), **metrics}
    sys.stdout.write(text)
    return {}


def graph_to_doc(g: VsuGraph, labels: LabelSpaces, image_id: int) -> dict:
    def payload(p):
        if g.kind == SEMANTIC:
            return {"predicate": labels.relations[p], "predicate_id": int(p)}
        return {"cue": [float(x) for x in p]}

    return {
        "image_id": image_id,
        "kind": g.kind,
        "objects": [o.id for o in g.objects],
        "attribute_units": [{"object": g.objects[i].id,
                             "attributes": [labels.attributes[a] for a in ids]}
                            for i, ids in g.attribute_units],
        "relation_units": [{"subject": g.objects[r.subject].id,
                            "object": g.objects[r.object].id, **payload(r.payload)}
                           for r in g.relation_units],
        "edges": [[f"{a[0]}:{a[1]}", f"{b[0]}:{b[1]}"] for a, b in g.edges],
    }


def cmd_graph_dump(args) -> dict:
    started = time.perf_counter()
    labels = _find_labels(args.labels, Path(args.detections))
    scenes = load_scenes(args.detections, labels)
    try:
        cfg = GraphConfig(iou_threshold=args.iou_threshold, dist_threshold=args.dist_threshold,
                          max_semantic_relations=args.max_relations)
    except ValueError as e:
        raise CliError("usage", str(e)) from None
    build = build_semantic_graph if args.kind == "semantic" else build_geometry_graph
    graphs = [build(d, cfg) for d in scenes]
    counts = [g.n_relations for g in graphs]
    doc = {
        "kind": args.kind,
        "config": dataclasses.asdict(cfg),
        "graphs": [graph_to_doc(g, labels, d.image_id) for g, d in zip(graphs, scenes)],
        "stats": {"images": len(graphs), "relation_units": counts,
                  "relation_units_per_image": float(np.mean(counts)) if counts else 0.0},
    }
    if args.sweep:
        if args.kind != "geometry":
            raise CliError("usage", "--sweep applies to geometry graphs only")
        try:
            thetas = [float(t) for t in args.sweep.split(",")]
        except ValueError:
            raise CliError("usage", f"--sweep expects comma-separated numbers, got "
                                    f"{args.sweep!r}") from None
        rows = []
        for t in thetas:
            c = dataclasses.replace(cfg, iou_threshold=t)
            n = [build_geometry_graph(d, c).n_relations for d in scenes]
            rows.append({"iou_threshold": t,
                         "relation_units_per_image": float(np.mean(n)) if n else 0.0})
        per = [r["relation_units_per_image"] for r in sorted(rows, key=lambda r: r["iou_threshold"])]
        doc["sweep"] = rows
        doc["sweep_non_increasing"] = all(a >= b for a, b in zip(per, per[1:]))
    out = _out_file(args.out)
    atomic_write_text(out, json.dumps(doc, indent=1) + "\n")
    write_manifest(out.with_name(out.name + ".manifest.json"), "graph-dump",
                   {"kind": args.kind, "sweep": args.sweep, **dataclasses.asdict(cfg)}, None,
                   [args.detections], [out], started)
    return {"images": len(graphs), "relation_units_per_image":
            doc["stats"]["relation_units_per_image"], "out": str(out)}


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vsua", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--debug", action="store_true", help="re-raise errors with a traceback")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene/caption dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, required=True, help="number of images")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("validate", help="check every detection file builds valid graphs")
    s.add_argument("--data", required=True, help="dataset or detections directory")
    s.add_argument("--labels", help="labels.json (default: found next to the data)")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("train", help="train a captioner from a dataset directory")
    s.add_argument("--data", required=True, help="training dataset directory")
    s.add_argument("--config", required=True, help="flat YAML config")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--val", help="validation dataset directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("caption", help="caption detection files with a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--detections", required=True, help="detection JSON file or directory")
    s.add_argument("--beam", type=int, default=3)
    s.add_argument("--max-len", type=int, default=16)
    s.add_argument("--dump-gates", action="store_true",
                   help="emit per-word gate values per unit category")
    s.add_argument("--vocab", help="vocab.txt (default: next to the checkpoint)")
    s.add_argument("--labels", help="labels.json (default: next to the checkpoint)")
    s.add_argument("--config", help="resolved run config (default: config.json next to "
                                    "the checkpoint)")
    s.add_argument("--out", help="output JSON (default: stdout)")
    s.set_defaults(func=cmd_caption)

    s = sub.add_parser("eval", help="BLEU-1..4 and CIDEr-D of predictions")
    s.add_argument("--pred", required=True, help="caption output JSON")
    s.add_argument("--refs", required=True, help="captions file")
    s.add_argument("--out", help="metrics JSON (default: stdout)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("graph-dump", help="write graphs and relation-unit statistics")
    s.add_argument("--detections", required=True, help="detection JSON file or directory")
    s.add_argument("--kind", choices=("semantic", "geometry"), required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--labels", help="labels.json (default: found next to the detections)")
    s.add_argument("--iou-threshold", type=float, default=GraphConfig.iou_threshold)
    s.add_argument("--dist-threshold", type=float, default=GraphConfig.dist_threshold)
    s.add_argument("--max-relations", type=int, default=GraphConfig.max_semantic_relations)
    s.add_argument("--sweep", help="comma-separated IoU thresholds to report")
    s.set_defaults(func=cmd_graph_dump)
    return p


def _thread_limit() -> int | None:
    raw = os.environ.get(ENV_THREADS)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise CliError("environment", f"{ENV_THREADS} must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    command = None
    debug = False
    try:
        args = build_parser().parse_args(argv)
        command, debug = args.command, args.debug
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        n = _thread_limit()
        if n is None:
            summary = args.func(args)
        else:
            with threadpool_limits(n):
                summary = args.func(args)
        if summary:
            print(json.dumps(summary), file=sys.stderr)
        return 0
    except Exception as e:  # every failure becomes one structured line
        if debug:
            raise
        kind = e.kind if isinstance(e, CliError) else type(e).__name__
        msg = str(e).replace("\n", " ")
        print(json.dumps({"error": kind, "command": command, "message": msg}),
              file=sys.stderr)
        return 2 if kind == "usage" else 1


if __name__ == "__main__":
    sys.exit(main())
