"""
Scoring context dependency
==========================

Each instruction is scored by how much its response tokens attend back to
user tokens, taking the best head per token in the middle layer. Turns
scoring above beta get an indicator token appended before training.
"""

import numpy as np

from ctxscope.annotate import annotate, dataset_stats, preprocess, score_dataset
from ctxscope.model import Model, ModelConfig
from ctxscope.pipeline import SyntheticSpec, synthesize_corpus

raw = synthesize_corpus(SyntheticSpec(n_conversations=40))
corpus, pstats = preprocess(raw)
print(pstats.to_json())

# %%
model = Model.init(ModelConfig(n_layers=2, n_heads=4, d_model=32, init_std=0.3))
records = score_dataset(corpus, model, "tinyllama")
scores = np.array([r.score for r in records if r.score is not None])
print(f"{len(records)} instructions, score quartiles {np.round(np.quantile(scores, [0.25, 0.5, 0.75]), 3)}")

# %%
# Scores by species of conversation
species = {c.id: c.meta.get("species") for c in raw}
for sp in ("dependent", "independent"):
    s = [r.score for r in records if species[r.conv_id] == sp and r.score is not None]
    print(f"{sp:12s} mean={np.mean(s):.3f}")

# %%
for beta in (0.3, 0.6, 0.9):
    _, _, report = annotate(corpus, records, beta)
    print(report)

# %%
annotated, _, _ = annotate(corpus, records, float(np.median(scores)))
st = dataset_stats(annotated, bin_width=100)
print(st.to_json())
