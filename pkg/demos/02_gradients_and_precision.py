# %% [markdown]
# # Reverse-mode gradients and how far a finite difference can check them
#
# Operations on `Tensor`s are recorded on a `Tape`; `backward` walks it in
# reverse.  `finite_diff_check` compares the result with central differences
# and reports max |g_tape - g_fd| / max(1e-8, |g_tape| + |g_fd|).

# %%
import numpy as np

import vsua.autodiff as ad
from vsua.autodiff import Tape, Tensor, backward, finite_diff_check
from vsua.corpus import build_vocabulary, synth_generate
from vsua.graph import GraphConfig
from vsua.model import ModelConfig, VsuaModel
from vsua.training import make_batch, pad_captions, prepare

# %% [markdown]
# ## A small expression

# %%
x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
w = Tensor(np.array([[1.0], [2.0], [-0.5]]), requires_grad=True)
with Tape() as tape:
    y = ad.tsum(ad.tanh(ad.matmul(ad.reshape(x, (1, 3)), w)))
g = backward(tape, y, [x, w])
print("dy/dx =", g[x])
print("check:", finite_diff_check(lambda: ad.tsum(ad.tanh(ad.matmul(ad.reshape(x, (1, 3)), w))),
                                  [x, w]))

# %% [markdown]
# ## A whole caption log-likelihood, at two precisions
#
# The loss of a caption is a sum of roughly ten log-probabilities, so its value is
# about 10-30.  With eps = 1e-5 a double-precision difference quotient cannot
# resolve changes below about ulp(|f|) / (2 eps) ~ 2e-10.  Coordinates whose true
# gradient is ~1e-7 then show relative errors of 1e-4..1e-3 even though the
# tape is exact.  The model is dtype-generic, so rerunning in long double
# removes that floor.

# %%
ds = synth_generate(0, 3)
vocab = build_vocabulary(ds.all_captions(), min_count=1)


def setup(dtype):
    cfg = ModelConfig(vocab_size=len(vocab), n_obj_labels=8, n_attr_labels=7, n_rel_labels=5,
                      d_v=32, d=8, d_att=6, d_lstm=8, d_word=6, d_lbl=4, dropout_p=0.0)
    m = VsuaModel(cfg, seed=0, dtype=dtype)
    data = prepare(ds, vocab, GraphConfig(), m)
    batch, caps = make_batch(data), pad_captions([im.captions[0] for im in data])
    return m, (lambda: m.caption_logprob(batch, caps)[0])


for dtype in (np.float64, np.longdouble):
    m, f = setup(dtype)
    err = finite_diff_check(f, m.parameters(), max_coords=6, rng=np.random.default_rng(0))
    print(f"{np.dtype(dtype).name:12s} worst relative error {err:.1e}")
