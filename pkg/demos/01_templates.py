"""
Rendering conversations with role spans
=======================================

A conversation is rendered through a chat template into token ids plus a
role label and a turn index for every position. Everything downstream
(loss masks, attention shares, dependency scores) reads these labels.
"""

import numpy as np

from ctxscope.tokenizer import Role, conversation, load_template, render, tokenize

conv = conversation("The code is 4817. What is the code?", "The code is 4817.",
                    "Thanks, and the color?", "Blue.", indicators=(0,))

# %%
# Byte-level ids sit above a small block of special tokens
print(tokenize("hi"), "->", len(tokenize("hi")), "tokens")

# %%
# The same conversation under two templates
for name in ("null", "tinyllama"):
    seq = render(conv, load_template(name))
    counts = {r.name: int((seq.roles == r).sum()) for r in Role}
    print(f"{name:10s} len={len(seq):4d}", {k: v for k, v in counts.items() if v})

# %%
# Per-position labels: the first turn is flagged, so an [IND] token follows it
seq = render(conv, load_template("tinyllama"))
print(seq.text()[:160])
ind = np.flatnonzero(seq.roles == Role.INDICATOR)
print("indicator at", ind, "turn", seq.turn_index[ind])

# %%
# An open final user turn renders as a generation prompt
prompt = render(conversation("What is the code?"), load_template("tinyllama"), include_response_prefix=True)
print(repr(prompt.text()))
