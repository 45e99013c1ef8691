"""
Where the last token looks
==========================

The attention row of the final prompt position is split into user,
assistant and BOS shares. Template tokens are dropped and the rest
renormalized, which makes a templated prompt comparable with the same
conversation rendered without a template.
"""

from ctxscope.model import Model, ModelConfig
from ctxscope.probe import allocation, allocation_delta_row
from ctxscope.tokenizer import conversation, load_template, render

model = Model.init(ModelConfig(n_layers=2, n_heads=2, d_model=16, init_std=0.5))
conv = conversation("The lamp is by the north gate.", "Noted.", "Where is the lamp?")

# %%
for name in ("null", "tinyllama", "chatml"):
    seq = render(conv, load_template(name), include_response_prefix=True)
    _, rec = model.forward(seq.tokens, capture_attention=True)
    br = allocation(rec, seq, layer=1, head=0)
    print(f"{name:10s} user={br.user:.3f} assistant={br.assistant:.3f} bos={br.bos:.3f} renormalized={br.renormalized}")

# %%
# Template minus null, per head of layer 1
for h in range(2):
    d = allocation_delta_row(model, conv, "tinyllama", 1, h)
    print(f"head {h}: d_user={d.d_user:+.3f} d_assistant={d.d_assistant:+.3f}")

# %%
# With the null template the delta vanishes exactly
d = allocation_delta_row(model, conv, "null", 1, 0)
print(d.d_user, d.d_assistant)
