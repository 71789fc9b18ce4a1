"""VSUA captioning model: unit features, GCN embeddings, gated attention, decoder.

Everything runs batched.  A :class:`GraphBatch` packs B images' graphs into
padded arrays with masks; padded objects and relations never receive
attention weight.  A category with no real units in an image contributes a
zero context vector.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxmath import object_geometry_cue
from .graph import GEOMETRY, SEMANTIC, VsuGraph

CATEGORIES = ("O", "A", "RS", "RG")
PAD = 0


class EmptyUnitSetError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_obj_labels: int
    n_attr_labels: int
    n_rel_labels: int
    d_v: int = 2048
    d: int = 1000
    d_att: int = 512
    d_lstm: int = 1000
    d_word: int = 1000
    d_lbl: int = 128
    n_attrs: int = 3
    dropout_p: float = 0.5
    use_gate: bool = True
    unit_set: tuple[str, ...] = CATEGORIES
    # False gives the no-graph baseline: object units are W_res f^v only
    use_gcn: bool = True

    def __post_init__(self):
        object.__setattr__(self, "unit_set",
                           tuple(c for c in CATEGORIES if c in set(self.unit_set)))
        dims = (self.vocab_size, self.n_obj_labels, self.n_attr_labels, self.n_rel_labels,
                self.d_v, self.d, self.d_att, self.d_lstm, self.d_word, self.d_lbl,
                self.n_attrs)
        if min(dims) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if not self.unit_set:
            raise ValueError("unit_set must contain at least one of O, A, RS, RG")
        if not self.use_gcn and self.unit_set != ("O",):
            raise ValueError("use_gcn=False is only defined for unit_set {O}")

    @property
    def needs_semantic(self) -> bool:
        return "RS" in self.unit_set

    @property
    def needs_geometry(self) -> bool:
        return "RG" in self.unit_set

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unit_set"] = list(self.unit_set)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["unit_set"] = tuple(d.get("unit_set", CATEGORIES))
        return cls(**d)


# ---------------------------------------------------------------------------
# batching

@dataclass
class GraphBatch:
    """Padded arrays for B images (N objects max, R relations max per kind)."""

    appearance: np.ndarray        # (B, N, D_v)
    obj_labels: np.ndarray        # (B, N)
    obj_geometry: np.ndarray      # (B, N, 5)
    obj_mask: np.ndarray          # (B, N) bool
    attr_ids: np.ndarray          # (B, N, N_a)
    mean_appearance: np.ndarray   # (B, D_v)
    # per relation kind: subj/obj flat indices into B*N rows, payload, mask
    relations: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.appearance.shape[0]

    @classmethod
    def from_graphs(cls, semantic: Sequence[VsuGraph | None] | None = None,
                    geometry: Sequence[VsuGraph | None] | None = None) -> "GraphBatch":
        sem = list(semantic) if semantic is not None else []
        geo = list(geometry) if geometry is not None else []
        n_img = max(len(sem), len(geo))
        sem = sem or [None] * n_img
        geo = geo or [None] * n_img
        base = [s if s is not None else g for s, g in zip(sem, geo)]
        if any(b is None for b in base):
            raise ValueError("every image needs at least one graph")
        for s, g in zip(sem, geo):
            if s is not None and g is not None and len(s.objects) != len(g.objects):
                raise ValueError("semantic and geometry graphs disagree on objects")
        n_max = max(1, max(b.n_objects for b in base))
        d_v = len(base[0].objects[0].appearance) if base[0].objects else 0
        n_a = len(base[0].attribute_units[0][1]) if base[0].attribute_units else 1
        B = len(base)
        app = np.zeros((B, n_max, d_v))
        lbl = np.zeros((B, n_max), dtype=np.intp)
        geom = np.zeros((B, n_max, 5))
        mask = np.zeros((B, n_max), dtype=bool)
        attrs = np.zeros((B, n_max, n_a), dtype=np.intp)
        for b, g in enumerate(base):
            if not g.objects:
                raise ValueError("an image needs at least one object")
            for i, o in enumerate(g.objects):
                if len(o.appearance) != d_v:
                    raise ad.ShapeError(
                        f"object {o.id}: appearance length {len(o.appearance)} != {d_v}")
                app[b, i] = o.appearance
                lbl[b, i] = o.label_id
                geom[b, i] = object_geometry_cue(o.box, g.size)
                mask[b, i] = True
            for i, ids in g.attribute_units:
                attrs[b, i] = ids
        mean_app = app.sum(axis=1) / mask.sum(axis=1, keepdims=True)
        batch = cls(app, lbl, geom, mask, attrs, mean_app)
        if any(s is not None for s in sem):
            batch.relations["RS"] = _pack_relations(sem, n_max, SEMANTIC)
        if any(g is not None for g in geo):
            batch.relations["RG"] = _pack_relations(geo, n_max, GEOMETRY)
        return batch


def _pack_relations(graphs, n_max: int, kind: str) -> dict:
    B = len(graphs)
    r_max = max(1, max((g.n_relations for g in graphs if g is not None), default=0))
    subj = np.zeros((B, r_max), dtype=np.intp)
    obj = np.zeros((B, r_max), dtype=np.intp)
    mask = np.zeros((B, r_max), dtype=bool)
    payload = (np.zeros((B, r_max), dtype=np.intp) if kind == SEMANTIC
               else np.zeros((B, r_max, 8)))
    for b, g in enumerate(graphs):
        subj[b], obj[b] = b * n_max, b * n_max
        if g is None:
            continue
        if g.kind != kind:
            raise ValueError(f"expected a {kind} graph, got {g.kind}")
        for k, r in enumerate(g.relation_units):
            subj[b, k] = b * n_max + r.subject
            obj[b, k] = b * n_max + r.object
            payload[b, k] = r.payload
            mask[b, k] = True
    return {"subject": subj, "object": obj, "payload": payload, "mask": mask}


# ---------------------------------------------------------------------------
# layers

class UnitEmbeddings(NamedTuple):
    units: dict          # category -> Tensor (B, K, d)
    masks: dict          # category -> bool array (B, K)


class DecoderState(NamedTuple):
    h1: Tensor
    c1: Tensor
    h2: Tensor
    c2: Tensor


def _fc_relu_drop(x: Tensor, W: Tensor, b: Tensor, p: float, rng, train: bool) -> Tensor:
    return ad.dropout(ad.relu(ad.matmul(x, W) + b), p, rng, train)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, W: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Four-gate LSTM; gate blocks in W/b are ordered input, forget, output, candidate."""
    H = h.shape[-1]
    z = ad.matmul(ad.concat([x, h]), W) + b
    i = ad.sigmoid(ad.slice_last(z, 0, H))
    f = ad.sigmoid(ad.slice_last(z, H, 2 * H))
    o = ad.sigmoid(ad.slice_last(z, 2 * H, 3 * H))
    g = ad.tanh(ad.slice_last(z, 3 * H, 4 * H))
    c_new = f * c + i * g
    return o * ad.tanh(c_new), c_new


def soft_attention(query: Tensor, units: Tensor, Wu: Tensor, Wh: Tensor, w: Tensor,
                   mask: np.ndarray | None = None, projected: Tensor | None = None
                   ) -> tuple[Tensor, Tensor]:
    """Additive attention of a (B, d_q) query over (B, K, d) units.

    Scores are ``w . tanh(Wu u_k + Wh h)``, i.e. ``W_a [u_k; h]`` with W_a
    stored as two column blocks.  ``projected`` may carry a cached ``units @ Wu``.
    Returns the (B, d) context and (B, K) weights.
    """
    B, K, d = units.shape
    if K == 0:
        raise EmptyUnitSetError("soft_attention over an empty unit set")
    pu = projected if projected is not None else ad.matmul(units, Wu)
    ph = ad.reshape(ad.matmul(query, Wh), (B, 1, Wh.shape[1]))
    scores = ad.reshape(ad.matmul(ad.tanh(pu + ph), w), (B, K))
    alpha = ad.softmax(scores, mask)
    context = ad.reshape(ad.matmul(ad.reshape(alpha, (B, 1, K)), units), (B, d))
    return context, alpha


def _glorot(rng: np.random.Generator, shape) -> np.ndarray:
    a = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-a, a, size=shape)


class VsuaModel:
    """All learnable parameters plus the forward computations.

    Parameters live in ``self.params`` (an ordered name -> Tensor map whose
    order is the checkpoint order).
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.seed = seed
        self.dtype = dtype
        self.rng = np.random.default_rng(seed + 1)   # dropout stream
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self._init_params(np.random.default_rng(seed))

    # -- parameters ---------------------------------------------------------

    def param_shapes(self) -> OrderedDict:
        c = self.config
        s: OrderedDict[str, tuple] = OrderedDict()
        if c.use_gcn:
            s["emb_obj"] = (c.n_obj_labels, c.d_lbl)
            s["phi_o.W"] = (c.d_v + c.d_lbl + 5, c.d)
            s["phi_o.b"] = (c.d,)
            s["g_o.W"] = (c.d, c.d)
            s["g_o.b"] = (c.d,)
        s["W_res"] = (c.d_v, c.d)
        if "A" in c.unit_set:
            s["emb_attr"] = (c.n_attr_labels, c.d_lbl)
            s["phi_a.W"] = (c.n_attrs * c.d_lbl, c.d)
            s["phi_a.b"] = (c.d,)
            s["g_a.W"] = (2 * c.d, c.d)
            s["g_a.b"] = (c.d,)
        if "RS" in c.unit_set:
            s["emb_rel"] = (c.n_rel_labels, c.d_lbl)
            s["phi_rs.W"] = (c.d_lbl, c.d)
            s["phi_rs.b"] = (c.d,)
            s["g_rs.W"] = (3 * c.d, c.d)
            s["g_rs.b"] = (c.d,)
        if "RG" in c.unit_set:
            s["phi_rg.W"] = (8, c.d)
            s["phi_rg.b"] = (c.d,)
            s["g_rg.W"] = (3 * c.d, c.d)
            s["g_rg.b"] = (c.d,)
        for cat in c.unit_set:
            s[f"att_{cat}.Wu"] = (c.d, c.d_att)
            s[f"att_{cat}.Wh"] = (c.d_lstm, c.d_att)
            s[f"att_{cat}.w"] = (c.d_att, 1)
        n = len(c.unit_set)
        if c.use_gate:
            s["gate.W"] = (c.d_lstm + n * c.d, n)
        s["W_e"] = (c.vocab_size, c.d_word)
        s["lstm1.W"] = (c.d_lstm + c.d_v + c.d_word + c.d_lstm, 4 * c.d_lstm)
        s["lstm1.b"] = (4 * c.d_lstm,)
        s["lstm2.W"] = (c.d_lstm + n * c.d + c.d_lstm, 4 * c.d_lstm)
        s["lstm2.b"] = (4 * c.d_lstm,)
        s["out.W"] = (c.d_lstm, c.vocab_size)
        s["out.b"] = (c.vocab_size,)
        return s

    def _init_params(self, rng: np.random.Generator) -> None:
        H = self.config.d_lstm
        for name, shape in self.param_shapes().items():
            if name.startswith(("emb_", "W_e")):
                v = rng.normal(0.0, 0.1, size=shape)
                if name == "emb_attr":
                    v[0] = 0.0          # NO_ATTR padding row
            elif len(shape) == 1:
                v = np.zeros(shape)
                if name.startswith("lstm"):
                    v[H:2 * H] = 1.0    # forget-gate bias
            else:
                v = _glorot(rng, shape)
            self.params[name] = Tensor(v.astype(self.dtype), requires_grad=True, name=name)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def _drop(self, x: Tensor, train: bool) -> Tensor:
        return ad.dropout(x, self.config.dropout_p, self.rng, train)

    # -- unit features --------------------------------------------------------

    def fuse_object_features(self, appearance, labels, geometry, train: bool = False) -> Tensor:
        """phi_o over [appearance; label embedding; 5-d geometry cue]."""
        appearance = ad._as_tensor(appearance)
        if appearance.shape[-1] != self.config.d_v:
            raise ad.ShapeError(f"appearance length {appearance.shape[-1]} != "
                                f"d_v {self.config.d_v}")
        x = ad.concat([appearance, ad.take_rows(self["emb_obj"], labels),
                       ad._as_tensor(geometry)])
        return _fc_relu_drop(x, self["phi_o.W"], self["phi_o.b"],
                             self.config.dropout_p, self.rng, train)

    def fuse_attribute_features(self, attr_ids, train: bool = False) -> Tensor:
        attr_ids = np.asarray(attr_ids)
        c = self.config
        if attr_ids.shape[-1] != c.n_attrs:
            raise ValueError(f"attribute unit has {attr_ids.shape[-1]} ids, "
                             f"expected {c.n_attrs}")
        e = ad.take_rows(self["emb_attr"], attr_ids)
        x = ad.reshape(e, attr_ids.shape[:-1] + (c.n_attrs * c.d_lbl,))
        return _fc_relu_drop(x, self["phi_a.W"], self["phi_a.b"], c.dropout_p, self.rng, train)

    def fuse_relation_features(self, payload, kind: str, train: bool = False) -> Tensor:
        """Semantic payload: predicate ids.  Geometry payload: (..., 8) cues."""
        p = self.config.dropout_p
        payload = np.asarray(payload)
        if kind == "RS":
            if payload.dtype.kind not in "iu":
                raise ValueError("semantic relation payload must be predicate ids")
            x = ad.take_rows(self["emb_rel"], payload)
            return _fc_relu_drop(x, self["phi_rs.W"], self["phi_rs.b"], p, self.rng, train)
        if kind == "RG":
            if payload.shape[-1:] != (8,):
                raise ValueError("geometry relation payload must be 8-d cues")
            return _fc_relu_drop(Tensor(payload), self["phi_rg.W"], self["phi_rg.b"],
                                 p, self.rng, train)
        raise ValueError(f"unknown relation kind {kind!r}")

    # -- GCN embeddings -------------------------------------------------------

    def embed_units(self, batch: GraphBatch, train: bool = False) -> UnitEmbeddings:
        c = self.config
        p = c.dropout_p
        B, N = batch.obj_mask.shape
        residual = ad.matmul(Tensor(batch.appearance), self["W_res"])
        if c.use_gcn:
            f_o = self.fuse_object_features(batch.appearance, batch.obj_labels,
                                            batch.obj_geometry, train)
            u_o = _fc_relu_drop(f_o, self["g_o.W"], self["g_o.b"], p, self.rng, train) + residual
        else:
            u_o = residual
        units = {"O": u_o}
        masks = {"O": batch.obj_mask}
        if "A" in c.unit_set:
            f_a = self.fuse_attribute_features(batch.attr_ids, train)
            g = _fc_relu_drop(ad.concat([u_o, f_a]), self["g_a.W"], self["g_a.b"],
                              p, self.rng, train)
            units["A"] = g + f_a
            masks["A"] = batch.obj_mask
        flat_o = ad.reshape(u_o, (B * N, c.d))
        for kind in ("RS", "RG"):
            if kind not in c.unit_set:
                continue
            rel = batch.relations.get(kind)
            if rel is None:
                raise ValueError(f"batch is missing {kind} relations required by unit_set")
            f_r = self.fuse_relation_features(rel["payload"], kind, train)
            u_s = ad.take_rows(flat_o, rel["subject"])
            u_t = ad.take_rows(flat_o, rel["object"])
            tag = "g_rs" if kind == "RS" else "g_rg"
            g = _fc_relu_drop(ad.concat([u_s, f_r, u_t]), self[f"{tag}.W"], self[f"{tag}.b"],
                              p, self.rng, train)
            units[kind] = g + f_r
            masks[kind] = rel["mask"]
        return UnitEmbeddings(units, masks)

    # -- attention + decoding -------------------------------------------------

    def project_units(self, emb: UnitEmbeddings) -> dict:
        """Cache the query-independent half of every attention score."""
        return {cat: ad.matmul(emb.units[cat], self[f"att_{cat}.Wu"])
                for cat in self.config.unit_set}

    def context_gated_attention(self, h1: Tensor, emb: UnitEmbeddings,
                                projected: dict | None = None):
        """Returns (context c_t, gates beta (B, n_cat), {category: weights})."""
        c = self.config
        atts, weights = [], {}
        for cat in c.unit_set:
            ctx, alpha = soft_attention(
                h1, emb.units[cat], self[f"att_{cat}.Wu"], self[f"att_{cat}.Wh"],
                self[f"att_{cat}.w"], emb.masks[cat],
                projected[cat] if projected is not None else None)
            atts.append(ctx)
            weights[cat] = alpha
        if c.use_gate:
            beta = ad.sigmoid(ad.matmul(ad.concat([h1] + atts), self["gate.W"]))
            parts = [ad.slice_last(beta, k, k + 1) * a for k, a in enumerate(atts)]
        else:
            beta = Tensor(np.ones((h1.shape[0], len(atts))))
            parts = atts
        ctx = parts[0] if len(parts) == 1 else ad.concat(parts)
        return ctx, beta, weights

    def init_state(self, batch_size: int) -> DecoderState:
        z = np.zeros((batch_size, self.config.d_lstm), dtype=self.dtype)
        return DecoderState(Tensor(z), Tensor(z), Tensor(z), Tensor(z))

    def decoder_step(self, state: DecoderState, words, mean_appearance, emb: UnitEmbeddings,
                     projected: dict | None = None):
        """One step: attention LSTM, gated attention, language LSTM, logits.

        Returns (new state, logits (B, V), diagnostics dict with ``beta`` and
        per-category ``alpha``).
        """
        c = self.config
        words = np.asarray(words, dtype=np.intp)
        if state.h1.shape[-1] != c.d_lstm or state.h2.shape[-1] != c.d_lstm:
            raise ad.ShapeError(f"decoder state width {state.h1.shape[-1]} != {c.d_lstm}")
        if words.size and (words.min() < 0 or words.max() >= c.vocab_size):
            raise ValueError("word id out of vocabulary range")
        x1 = ad.concat([state.h2, ad._as_tensor(mean_appearance),
                        ad.take_rows(self["W_e"], words)])
        h1, c1 = lstm_cell(x1, state.h1, state.c1, self["lstm1.W"], self["lstm1.b"])
        ctx, beta, weights = self.context_gated_attention(h1, emb, projected)
        h2, c2 = lstm_cell(ad.concat([h1, ctx]), state.h2, state.c2,
                           self["lstm2.W"], self["lstm2.b"])
        logits = ad.matmul(h2, self["out.W"]) + self["out.b"]
        return DecoderState(h1, c1, h2, c2), logits, {"beta": beta, "alpha": weights}

    def caption_logprob(self, batch: GraphBatch, captions, train: bool = False
                        ) -> tuple[Tensor, Tensor]:
        """Teacher-forced log-likelihood of BOS..EOS captions (B, T), PAD-padded.

        Returns (total log-prob scalar, per-token log-probs (B, T-1)); PAD
        targets contribute exactly zero.
        """
        captions = np.asarray(captions, dtype=np.intp)
        if captions.ndim != 2 or captions.shape[0] != batch.size:
            raise ad.ShapeError(f"captions shape {captions.shape} vs batch {batch.size}")
        if captions.min() < 0 or captions.max() >= self.config.vocab_size:
            raise ValueError("caption token id out of vocabulary range")
        emb = self.embed_units(batch, train)
        projected = self.project_units(emb)
        vbar = Tensor(batch.mean_appearance)
        state = self.init_state(batch.size)
        steps = []
        for t in range(captions.shape[1] - 1):
            state, logits, _ = self.decoder_step(state, captions[:, t], vbar, emb, projected)
            steps.append(ad.pick(ad.log_softmax(logits), captions[:, t + 1]))
        mask = (captions[:, 1:] != PAD).astype(self.dtype)
        per_token = ad.stack(steps, axis=1) * Tensor(mask)
        return ad.tsum(per_token), per_token

    def loss(self, batch: GraphBatch, captions, train: bool = True) -> tuple[Tensor, int]:
        """Mean per-token negative log-likelihood and the token count."""
        total, _ = self.caption_logprob(batch, captions, train)
        n_tok = int((np.asarray(captions)[:, 1:] != PAD).sum())
        return ad.scale(total, -1.0 / max(n_tok, 1)), n_tok
