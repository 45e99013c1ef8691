"""
Needle in a haystack
====================

A fact is planted at a chosen depth inside filler text of a chosen token
length, the model is asked for it, and recall counts how many keywords
appear in the first hundred generated tokens. Cases that do not fit the
context window are scored as misses.
"""

import numpy as np

from ctxscope.model import Model, ModelConfig
from ctxscope.nih import DEFAULT_NEEDLE, build_context, build_grid, default_haystack, recall, run_nih
from ctxscope.tokenizer import tokenize

text, start = build_context(default_haystack(), 120, 0.5, DEFAULT_NEEDLE)
print(len(tokenize(text)), "tokens, needle at", start)
print(text[:200], "...")

# %%
grid = build_grid(max_len=4000)
print(len(grid), "cases,", len({c.context_len for c in grid}), "lengths,", len({c.depth for c in grid}), "depths")

# %%
print(recall(tokenize("the code is 4817"), ["4817"]), recall(tokenize("no idea"), ["4817"]))

# %%
# A small grid through an untrained model, with one length past the window
model = Model.init(ModelConfig(n_layers=1, n_heads=2, d_model=16, max_seq_len=300))
rep = run_nih(model, build_grid(64, 320, 3, 3, prompt_style="desk"), generation_len=8)
print("mean recall", rep.mean_recall, "failures", rep.failures)
mat = np.array([[c.recall for c in rep.cells if c.depth == d] for d in sorted({c.depth for c in rep.cells})])
print(mat)
