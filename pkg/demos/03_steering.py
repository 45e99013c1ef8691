"""
Re-weighting attention toward the user
======================================

Steering multiplies the non-user part of an attention row by alpha and
renormalizes. Heads are picked per layer by the mass they already put on
user tokens, and alpha is chosen by a small sweep on needle cases.
"""

import numpy as np

from ctxscope.model import Model, ModelConfig
from ctxscope.nih import build_grid, render_case
from ctxscope.steering import probe_heads, steer_row, sweep_alpha

row = np.array([0.4, 0.1, 0.2, 0.3])
user = np.array([False, True, True, False])
for a in (1.0, 0.5, 0.1):
    out = steer_row(row, user, a)
    print(f"alpha={a:<4} row={np.round(out, 3)}  user mass={out[user].sum():.3f}")

# %%
# Twice with alpha equals once with alpha squared
print(np.allclose(steer_row(steer_row(row, user, 0.5), user, 0.5), steer_row(row, user, 0.25)))

# %%
# Head selection on an untrained model, probed on one needle prompt
model = Model.init(ModelConfig(n_layers=2, n_heads=4, d_model=32, max_seq_len=512, init_std=0.3))
cases = build_grid(64, 160, 3, 3, prompt_style="desk")
sel = probe_heads(model, render_case(cases[0]))
print("selected heads per layer:", sel.heads)

# %%
# Alpha sweep; with an untrained model recall stays at zero, so alpha=1 wins the tie
res = sweep_alpha(model, cases, alphas=(1.0, 0.5, 0.1), selection=sel, generation_len=8)
print(res.recall, "best", res.best_alpha)
