"""
Training the tiny decoder
=========================

A small pre-LN decoder in numpy, trained with a hand-written backward pass
on assistant tokens only. We train for a few steps on a synthetic corpus,
then check a gradient against central differences.
"""

import numpy as np

from ctxscope.annotate import preprocess, render_corpus
from ctxscope.model import Model, ModelConfig, TrainParams, batch_loss, grad, init_weights, make_batch, train
from ctxscope.pipeline import SyntheticSpec, synthesize_corpus
from ctxscope.tokenizer import conversation, decode_text, load_template, render

corpus, _ = preprocess(synthesize_corpus(SyntheticSpec(n_conversations=60)))
seqs, n_cut = render_corpus(corpus, "tinyllama")
print(len(seqs), "sequences,", n_cut, "truncated")

# %%
cfg = ModelConfig(n_layers=2, n_heads=4, d_model=32)
weights, trace = train(seqs, cfg, TrainParams(steps=80, lr=3e-3))
print("loss: first %.3f  last %.3f" % (trace[0], np.mean(trace[-10:])))
for step in range(0, len(trace), 20):
    print(f"{step:4d} {trace[step]:.3f} " + "#" * int(trace[step] * 8))

# %%
# Greedy decoding from the trained weights
model = Model(cfg, weights)
prompt = render(conversation("Question: What is the code for the red box?"), load_template("tinyllama"),
                include_response_prefix=True)
print(repr(decode_text(model.generate(prompt, 30))))

# %%
# One coordinate of the analytic gradient against central differences
small = ModelConfig(n_layers=1, n_heads=2, d_model=8, max_seq_len=64)
w = init_weights(small)
batch = make_batch([render(conversation("the red box", "code 12"), load_template("null"))])
g = grad(w, batch, small)
eps, idx = 1e-5, (3, 5)
w["layers.0.mlp.w1"][idx] += eps
lp = batch_loss(w, batch, small)
w["layers.0.mlp.w1"][idx] -= 2 * eps
lm = batch_loss(w, batch, small)
print("analytic %.8f  numeric %.8f" % (g["layers.0.mlp.w1"][idx], (lp - lm) / (2 * eps)))
