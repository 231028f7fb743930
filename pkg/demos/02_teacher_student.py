"""
Teacher, student and the privileged context
============================================

Synthetic lists where a document's click rate depends on the other
documents shown with it. The teacher sees that context, the student does
not, and distillation carries some of it across.
"""

# %%
import numpy as np

from clid import trainer
from clid.data import gen_synthetic, split_lists
from clid.ranker import forward
from clid.trainer import Splits, TrainConfig

syn = gen_synthetic(600, 20, 32, context_strength=2.0, seed=0, weight_scale=1.5, context_scale=3.0)
ds = syn.dataset()
splits = Splits(*(ds.subset(i) for i in split_lists(ds.n_lists)))
print("lists per split:", splits.train.n_lists, splits.valid.n_lists, splits.test.n_lists)

# %% [markdown]
# Each row of the teacher input is the document's own features followed by
# the mean of the other documents in its list.

# %%
print("student width", splits.train.width, "teacher width", splits.train.teacher_features.shape[1])

# %%
cfg = TrainConfig(epochs=10, hidden=(32, 16), lr=0.05, seed=1)
teacher = trainer.train_teacher(splits, cfg)
print("teacher", trainer.evaluate_ranker(teacher.params, splits.test, teacher=True))

# %% [markdown]
# Base ignores the teacher. The distilled students share its seed, so they
# start from the same weights.

# %%
for method, ratio in [("base", 1.0), ("base+pointwise", 1.0), ("base+listnet", 1.0), ("clid", 10.0)]:
    rep, _ = trainer.run_method(method, splits, cfg, teacher=teacher.params, weight_ratio=ratio)
    print("%-15s ndcg@10 %.4f  logloss %.4f  ece %.4f" % (method, rep.ndcg10, rep.logloss, rep.ece))

# %% [markdown]
# The latent click rates are known here, so calibration can also be read
# off directly: mean predicted rate against mean true rate on the test split.

# %%
_, res = trainer.run_method("clid", splits, cfg, teacher=teacher.params, weight_ratio=10.0)
pred = forward(res.params, splits.test.features).probs
print("mean prediction %.4f  mean true rate %.4f" % (pred.mean(), splits.test.true_prob.mean()))
