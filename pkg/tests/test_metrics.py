import math

import numpy as np
import pytest
from pycocoevalcap.bleu.bleu import Bleu
from pycocoevalcap.cider.cider import Cider

from vsua.metrics import EvalPair, bleu, bleu_all, cider_d, cider_d_scores, evaluate

WORDS = "a the red blue green circle square star left right of above below".split()


def random_corpus(rng, n_pairs=8, n_refs=(1, 4), lengths=(3, 10)):
    def sent():
        return list(rng.choice(WORDS, size=int(rng.integers(*lengths))))
    return [EvalPair(sent(), [sent() for _ in range(int(rng.integers(*n_refs)))])
            for _ in range(n_pairs)]


def coco(corpus):
    res = {i: [" ".join(p.candidate)] for i, p in enumerate(corpus)}
    gts = {i: [" ".join(r) for r in p.references] for i, p in enumerate(corpus)}
    return res, gts


def distinct_self_corpus(rng, n=6):
    # distinct captions of length >= 4, so every order has an informative n-gram
    out = []
    while len(out) < n:
        s = list(rng.choice(WORDS, size=int(rng.integers(4, 9))))
        if s not in [p.candidate for p in out]:
            out.append(EvalPair(s, [s]))
    return out


# --- BLEU --------------------------------------------------------------------

def test_bleu_perfect():
    c = [EvalPair("a red circle above a blue star".split(), ["a red circle above a blue star".split()])]
    assert [bleu(c, n) for n in (1, 2, 3, 4)] == [1.0] * 4


def test_bleu_clipped_unigram():
    assert bleu([EvalPair(["a", "a", "a"], [["a", "b"]])], 1) == pytest.approx(1 / 3, abs=1e-12)


def test_bleu_disjoint():
    assert bleu([EvalPair(["x", "y"], [["a", "b"]])], 1) == 0.0


def test_bleu_brevity_penalty_closest_shorter_on_tie():
    # candidate length 3; references of length 2 and 4 tie -> r = 2 -> no penalty
    c = [EvalPair(["a", "b", "c"], [["a", "b"], ["a", "b", "c", "d"]])]
    assert bleu(c, 1) == 1.0
    # a single longer reference triggers exp(1 - r/c)
    c = [EvalPair(["a", "b"], [["a", "b", "c", "d"]])]
    assert bleu(c, 1) == pytest.approx(math.exp(1 - 4 / 2), abs=1e-12)


def test_bleu_empty_candidate_contributes_nothing():
    good = EvalPair(["a", "b"], [["a", "b"]])
    assert bleu([good, EvalPair([], [["a", "b"]])], 1) == pytest.approx(math.exp(1 - 4 / 2))
    assert bleu([EvalPair([], [["a"]])], 1) == 0.0


def test_bleu_rejects_bad_order_and_missing_refs():
    with pytest.raises(ValueError):
        bleu([EvalPair(["a"], [["a"]])], 5)
    with pytest.raises(ValueError):
        bleu([EvalPair(["a"], [])], 1)


@pytest.mark.parametrize("seed", range(5))
def test_bleu_matches_reference_implementation(seed):
    # the reference scorer smooths zero match counts; include exact pairs so every
    # order has matches and both definitions agree
    rng = np.random.default_rng(seed)
    corpus = random_corpus(rng, n_pairs=12) + distinct_self_corpus(rng, n=2)
    ref, _ = Bleu(4).compute_score(*reversed(coco(corpus)), verbose=0)
    for n in range(1, 5):
        assert bleu(corpus, n) == pytest.approx(ref[n - 1], abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_bleu_non_increasing_in_order(seed):
    corpus = random_corpus(np.random.default_rng(seed))
    scores = [bleu(corpus, n) for n in range(1, 5)]
    assert all(a >= b - 1e-15 for a, b in zip(scores, scores[1:]))


# --- CIDEr-D -----------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_cider_self_reference_is_ten(seed):
    corpus = distinct_self_corpus(np.random.default_rng(seed))
    assert cider_d(corpus) == pytest.approx(10.0, abs=1e-6)
    assert Cider().compute_score(*reversed(coco(corpus)))[0] == pytest.approx(10.0, abs=1e-6)


def test_cider_disjoint_is_zero():
    corpus = [EvalPair(["x", "y", "z"], [["a", "b", "c"]]),
              EvalPair(["u", "v"], [["d", "e", "f"]])]
    assert cider_d(corpus) == 0.0


@pytest.mark.parametrize("seed", range(8))
def test_cider_matches_reference_implementation(seed):
    corpus = random_corpus(np.random.default_rng(seed), n_pairs=10)
    want_mean, want = Cider().compute_score(*reversed(coco(corpus)))
    np.testing.assert_allclose(cider_d_scores(corpus), want, atol=1e-9)
    assert cider_d(corpus) == pytest.approx(want_mean, abs=1e-9)


def in_reference_corpus(rng, n_pairs=8):
    """Candidates assembled from a reference's own words, so every candidate
    n-gram has non-zero document frequency."""
    out = []
    for p in random_corpus(rng, n_pairs):
        r = p.references[0]
        i = int(rng.integers(0, len(r)))
        out.append(EvalPair(r[i:] or r, p.references))
    return out


@pytest.mark.parametrize("seed", range(5))
def test_cider_duplication_invariance(seed):
    corpus = in_reference_corpus(np.random.default_rng(seed))
    assert cider_d(corpus + corpus) == pytest.approx(cider_d(corpus), abs=1e-12)


def test_cider_duplication_changes_unseen_ngram_weight():
    # an n-gram absent from every reference keeps idf = log N, which moves with N
    corpus = [EvalPair(["a", "b", "zz"], [["a", "b", "c"]]),
              EvalPair(["d", "e"], [["d", "e", "f"]])]
    assert cider_d(corpus + corpus) != pytest.approx(cider_d(corpus), abs=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_metrics_order_independent(seed):
    rng = np.random.default_rng(seed)
    corpus = random_corpus(rng)
    shuffled = [corpus[i] for i in rng.permutation(len(corpus))]
    a, b = evaluate(corpus), evaluate(shuffled)
    assert a.keys() == b.keys()
    for k in a:
        assert a[k] == pytest.approx(b[k], abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_metrics_relabel_invariant(seed):
    rng = np.random.default_rng(seed)
    corpus = random_corpus(rng)
    perm = dict(zip(WORDS, rng.permutation([f"w{i}" for i in range(len(WORDS))])))
    relabel = [EvalPair([perm[t] for t in p.candidate], [[perm[t] for t in r] for r in p.references])
               for p in corpus]
    a, b = evaluate(corpus), evaluate(relabel)
    for k in a:
        assert a[k] == pytest.approx(b[k], abs=1e-12)


def test_single_image_corpus_is_defined():
    assert cider_d([EvalPair(["a", "b"], [["a", "b"]])]) == 0.0
    assert cider_d([]) == 0.0


def test_bleu_all_keys():
    c = [EvalPair(["a"], [["a"]])]
    assert list(bleu_all(c)) == ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4"]
