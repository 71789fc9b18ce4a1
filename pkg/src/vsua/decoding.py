"""Greedy and beam-search caption generation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .corpus import BOS, EOS
from .model import DecoderState, GraphBatch, UnitEmbeddings, VsuaModel


@dataclass
class Hypothesis:
    tokens: list[int]
    logprob: float
    state: DecoderState | None = None
    finished: bool = False
    gates: list = field(default_factory=list)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def _select(emb: UnitEmbeddings, projected: dict, rows: np.ndarray):
    units = {k: Tensor(v.data[rows]) for k, v in emb.units.items()}
    masks = {k: v[rows] for k, v in emb.masks.items()}
    proj = {k: Tensor(v.data[rows]) for k, v in projected.items()}
    return UnitEmbeddings(units, masks), proj


def _take_state(state: DecoderState, rows) -> DecoderState:
    return DecoderState(*(Tensor(s.data[rows]) for s in state))


def beam_search(model: VsuaModel, batch: GraphBatch, image: int = 0, beam: int = 3,
                max_len: int = 16, length_normalize: bool = False) -> list[Hypothesis]:
    """Beam search for one image of ``batch``; returns up to ``beam`` finished
    hypotheses, best first.

    Candidates are ranked by summed log-prob, ties by token id then parent
    order.  Walking that ranking, finished candidates (EOS or ``max_len``
    tokens) retire into the pool and unfinished ones refill the beam until it
    holds ``beam`` hypotheses, so the beam never narrows.  Because summed
    log-probs only decrease, the search stops once the pool holds ``beam``
    hypotheses no active one can beat (this early exit is skipped under
    length normalization, where it would not be exact).
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")

    def rank(h):
        return h.logprob / len(h.tokens) if length_normalize else h.logprob

    one = np.array([image])
    emb_all = model.embed_units(batch, train=False)
    proj_all = model.project_units(emb_all)
    vbar_all = batch.mean_appearance
    active = [Hypothesis([], 0.0, model.init_state(1))]
    done: list[Hypothesis] = []
    while active:
        rows = np.repeat(one, len(active))
        emb, proj = _select(emb_all, proj_all, rows)
        state = DecoderState(*(Tensor(np.concatenate([h.state[i].data for h in active]))
                              for i in range(4)))
        words = [h.tokens[-1] if h.tokens else BOS for h in active]
        new_state, logits, diag = model.decoder_step(state, words, Tensor(vbar_all[rows]),
                                                     emb, proj)
        logp = _log_softmax(logits.data)
        V = logp.shape[1]
        cand = []
        for k, h in enumerate(active):
            for tok in range(V):
                cand.append((h.logprob + float(logp[k, tok]), tok, k))
        cand.sort(key=lambda c: (-c[0], c[1], c[2]))
        nxt = []
        for score, tok, k in cand:
            if len(nxt) == beam:
                break
            parent = active[k]
            tokens = parent.tokens + [tok]
            hyp = Hypothesis(tokens, score, _take_state(new_state, [k]),
                             finished=(tok == EOS or len(tokens) >= max_len),
                             gates=parent.gates + [diag["beta"].data[k].copy()])
            (done if hyp.finished else nxt).append(hyp)
        active = nxt
        done.sort(key=lambda h: -rank(h))
        if (not length_normalize and active and len(done) >= beam
                and active[0].logprob <= done[beam - 1].logprob):
            break
    return done[:beam]


def greedy_decode(model: VsuaModel, batch: GraphBatch, max_len: int = 16) -> list[list[int]]:
    """Argmax decoding for every image in ``batch`` (ties -> lowest id).

    Returned sequences exclude BOS and include the final EOS when emitted.
    """
    return [seq for seq, _, _ in greedy_decode_with_scores(model, batch, max_len)]


def greedy_decode_with_scores(model: VsuaModel, batch: GraphBatch, max_len: int = 16):
    """Like :func:`greedy_decode` but also returns log-probs and per-step gates."""
    B = batch.size
    emb = model.embed_units(batch, train=False)
    proj = model.project_units(emb)
    vbar = Tensor(batch.mean_appearance)
    state = model.init_state(B)
    words = np.full(B, BOS)
    seqs = [[] for _ in range(B)]
    scores = np.zeros(B)
    gates = [[] for _ in range(B)]
    live = np.ones(B, dtype=bool)
    for _ in range(max_len):
        state, logits, diag = model.decoder_step(state, words, vbar, emb, proj)
        logp = _log_softmax(logits.data)
        words = logp.argmax(axis=1)   # first maximum = lowest id
        for b in np.flatnonzero(live):
            seqs[b].append(int(words[b]))
            scores[b] += logp[b, words[b]]
            gates[b].append(diag["beta"].data[b].copy())
            if words[b] == EOS:
                live[b] = False
        if not live.any():
            break
    return [(seqs[b], float(scores[b]), gates[b]) for b in range(B)]


def strip_eos(tokens: list[int]) -> list[int]:
    return tokens[:-1] if tokens and tokens[-1] == EOS else tokens
