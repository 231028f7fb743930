"""
Which distillation losses leave a calibrated student alone?
============================================================

Put the student exactly at the true click rates P, with the teacher there
too. A calibration-compatible loss should then have nothing left to say:
its gradient must vanish.
"""

# %%
import numpy as np

from clid.losses import clid_distill, compat_probe, listmle_distill, listnet_distill
from clid.ranker import sigmoid

P = np.array([0.8, 0.2])
s = np.log(P) - np.log1p(-P)  # the logits that reproduce P exactly

# %% [markdown]
# CLID compares list-normalised probabilities, so a student that already
# outputs P has zero gradient.

# %%
out = clid_distill(P, sigmoid(s))
print("clid    value %.4f  grad %s" % (out.value, out.grad))

# %% [markdown]
# ListNet normalises the *logits* with a softmax instead. softmax(logit P)
# is not P / sum(P), so it keeps pushing.

# %%
out = listnet_distill(P, s)
print("listnet value %.4f  grad %s" % (out.value, out.grad))

# %% [markdown]
# ListMLE never settles at all: scaling the logits up along the teacher
# order always lowers it.

# %%
for scale in (1, 2, 10):
    print("listmle scale %2d  value %.4f" % (scale, listmle_distill(P, scale * s).value))

# %% [markdown]
# The same check over a thousand random lists of 2 to 20 items.

# %%
for kind in ("pointwise", "clid", "listnet", "listmle"):
    rep = compat_probe(kind, (2, 20), 1000)
    print("%-9s max|grad| %.2e  descends under x2 scaling: %5.1f%%"
          % (kind, rep.max_grad_norm, 100 * rep.descent_fraction))
