"""Teacher-forced cross-entropy training with Adam and step-decayed learning rate."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from decimal import Decimal
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .autodiff import Tape, backward
from .corpus import PAD, Dataset, Vocabulary
from .decoding import greedy_decode, strip_eos
from .graph import (GraphConfig, SceneDetections, VsuGraph, build_geometry_graph,
                    build_semantic_graph)
from .metrics import EvalPair, cider_d
from .model import GraphBatch, ModelConfig, VsuaModel

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 5e-4
    decay: float = 0.8
    decay_every: int = 5
    batch_size: int = 16
    epochs: int = 30
    grad_clip: float = 5.0
    seed: int = 0
    # None trains on every reference caption; 1 keeps only the first
    captions_per_image: int | None = None
    eval_every: int = 1
    max_len: int = 16

    def __post_init__(self):
        if self.lr0 <= 0 or not 0 < self.decay <= 1 or self.batch_size < 1:
            raise ValueError("need lr0 > 0, 0 < decay <= 1 and batch_size >= 1")
        if self.decay_every < 1 or self.epochs < 0:
            raise ValueError("need decay_every >= 1 and epochs >= 0")


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """lr0 * decay ** (epoch // decay_every), evaluated in decimal so that
    e.g. 5e-4 * 0.8**2 is exactly the float 3.2e-4."""
    k = epoch // cfg.decay_every
    return float(Decimal(repr(cfg.lr0)) * Decimal(repr(cfg.decay)) ** k)


class AdamState:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> AdamState:
    """In-place bias-corrected Adam update of ``params`` (name -> Tensor)."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter "
                             f"{name} shape {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


def clip_global_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return norm


# ---------------------------------------------------------------------------
# data preparation

@dataclass
class PreparedImage:
    image_id: int
    semantic: VsuGraph | None
    geometry: VsuGraph | None
    captions: list[list[int]]
    references: list[list[str]]


def build_graphs(dets: SceneDetections, graph_cfg: GraphConfig,
                 model_cfg: ModelConfig) -> tuple[VsuGraph | None, VsuGraph | None]:
    """The graphs a model configuration consumes (the semantic graph alone
    still carries objects and attributes when no relation category is used)."""
    sem = build_semantic_graph(dets, graph_cfg) if model_cfg.needs_semantic else None
    geo = build_geometry_graph(dets, graph_cfg) if model_cfg.needs_geometry else None
    if sem is None and geo is None:
        sem = build_semantic_graph(dets, graph_cfg)
    return sem, geo


def prepare(dataset: Dataset, vocab: Vocabulary, graph_cfg: GraphConfig,
            model: VsuaModel) -> list[PreparedImage]:
    out = []
    for ex in dataset.examples:
        sem, geo = build_graphs(ex.detections, graph_cfg, model.config)
        out.append(PreparedImage(ex.detections.image_id, sem, geo,
                                 [vocab.encode(c) for c in ex.captions], ex.captions))
    return out


def make_batch(images: Sequence[PreparedImage]) -> GraphBatch:
    sem = [im.semantic for im in images]
    geo = [im.geometry for im in images]
    return GraphBatch.from_graphs(sem if any(s is not None for s in sem) else None,
                                  geo if any(g is not None for g in geo) else None)


def pad_captions(caps: Sequence[Sequence[int]]) -> np.ndarray:
    T = max(len(c) for c in caps)
    out = np.full((len(caps), T), PAD, dtype=np.intp)
    for i, c in enumerate(caps):
        out[i, :len(c)] = c
    return out


def batch_loss(model: VsuaModel, images: Sequence[PreparedImage], captions, train: bool):
    return model.loss(make_batch(images), pad_captions(captions), train)


def evaluate_loss(model: VsuaModel, data: Sequence[PreparedImage], batch_size: int = 64,
                  captions_per_image: int | None = None) -> float:
    """Per-token cross-entropy with dropout off."""
    total = 0.0
    n_tok = 0
    pairs = [(im, c) for im in data for c in im.captions[:captions_per_image]]
    for s in range(0, len(pairs), batch_size):
        chunk = pairs[s:s + batch_size]
        loss, n = batch_loss(model, [p[0] for p in chunk], [p[1] for p in chunk], False)
        total += float(loss.data) * n
        n_tok += n
    return total / max(n_tok, 1)


def generate(model: VsuaModel, data: Sequence[PreparedImage], max_len: int = 16,
             batch_size: int = 64) -> list[list[int]]:
    out = []
    for s in range(0, len(data), batch_size):
        out.extend(strip_eos(seq) for seq in
                   greedy_decode(model, make_batch(data[s:s + batch_size]), max_len))
    return out


def evaluate_cider(model: VsuaModel, data: Sequence[PreparedImage], vocab: Vocabulary,
                   max_len: int = 16) -> float:
    if not data:
        return float("nan")
    preds = generate(model, data, max_len)
    corpus = [EvalPair(vocab.decode(p), im.references) for p, im in zip(preds, data)]
    return cider_d(corpus)


# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: VsuaModel
    log: list[dict]
    best_val_cider: float | None = None


def train(model: VsuaModel, train_data: Sequence[PreparedImage], cfg: TrainConfig,
          vocab: Vocabulary | None = None, val_data: Sequence[PreparedImage] = (),
          out_dir=None, log_path=None, max_steps: int | None = None) -> TrainResult:
    """Train in place.  Returns the model and one log record per epoch.

    With ``out_dir`` the best validation CIDEr-D checkpoint goes to
    ``best.ckpt`` and the final parameters to ``last.ckpt``.
    """
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    names = list(model.params)
    pairs = [(i, k) for i, im in enumerate(train_data)
             for k in range(len(im.captions[:cfg.captions_per_image]))]
    records: list[dict] = []
    best = None
    step = 0
    out_dir = Path(out_dir) if out_dir is not None else None
    vocab_hash = vocab.content_hash if vocab is not None else ""
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        order = rng.permutation(len(pairs))
        loss_sum = 0.0
        tok_sum = 0
        for bi, s in enumerate(range(0, len(order), cfg.batch_size)):
            chunk = [pairs[j] for j in order[s:s + cfg.batch_size]]
            images = [train_data[i] for i, _ in chunk]
            caps = [train_data[i].captions[k] for i, k in chunk]
            with Tape() as tape:
                loss, n_tok = batch_loss(model, images, caps, train=True)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at epoch {epoch}, batch {bi}, step {step}")
            g = backward(tape, loss, model.parameters())
            grads = {n: g[model.params[n]] for n in names}
            tape.clear()
            clip_global_norm(grads, cfg.grad_clip)
            adam_step(model.params, grads, state, lr)
            loss_sum += value * n_tok
            tok_sum += n_tok
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        rec = {"epoch": epoch, "step": step, "lr": lr,
               "train_loss": loss_sum / max(tok_sum, 1), "train_loss_sum": loss_sum,
               "val_loss": None, "val_cider": None}
        if val_data and vocab is not None and (epoch + 1) % cfg.eval_every == 0:
            rec["val_loss"] = evaluate_loss(model, val_data)
            rec["val_cider"] = evaluate_cider(model, val_data, vocab, cfg.max_len)
            if best is None or rec["val_cider"] > best:
                best = rec["val_cider"]
                if out_dir is not None:
                    checkpoint.save(out_dir / "best.ckpt", model, vocab_hash,
                                    {"epoch": epoch, "val_cider": best})
        records.append(rec)
        log.info("epoch %d step %d lr %.3g loss %.4f val_cider %s", epoch, step, lr,
                 rec["train_loss"], rec["val_cider"])
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(rec) + "\n")
        if max_steps is not None and step >= max_steps:
            break
    if out_dir is not None:
        checkpoint.save(out_dir / "last.ckpt", model, vocab_hash)
        if best is None:
            checkpoint.save(out_dir / "best.ckpt", model, vocab_hash)
    return TrainResult(model, records, best)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
