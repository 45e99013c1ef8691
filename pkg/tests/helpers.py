"""Oracles and stubs shared by the test modules.

Everything here is written independently of the package internals: loops
instead of vectorized code, complex numbers for rotary positions, plain
Python softmax. The tests compare the package against these.
"""

from __future__ import annotations

import math
from types import SimpleNamespace

import numpy as np

from ctxscope.errors import SequenceTooLong
from ctxscope.tokenizer import Conversation, Role, Turn, tokenize

WORDS = ("amber", "river", "stone", "quiet", "north", "lamp", "seven", "field", "cloud", "ember", "tin", "gate")


def random_text(rng, lo=1, hi=6) -> str:
    return " ".join(WORDS[int(i)] for i in rng.integers(0, len(WORDS), size=int(rng.integers(lo, hi + 1))))


def random_conversation(rng, n_pairs=3, open_last=False, cid="c0") -> Conversation:
    turns = []
    for _ in range(n_pairs):
        turns.append(Turn("user", random_text(rng), bool(rng.random() < 0.3)))
        turns.append(Turn("assistant", random_text(rng)))
    if open_last:
        turns.append(Turn("user", random_text(rng)))
    return Conversation(cid, tuple(turns))


def random_record(rng, n_layers, n_heads, T, spread=3.0) -> np.ndarray:
    """Random strictly causal row-stochastic attention, shape (L, H, T, T)."""
    w = np.zeros((n_layers, n_heads, T, T))
    for l in range(n_layers):
        for h in range(n_heads):
            for q in range(T):
                logits = rng.normal(0.0, spread, size=q + 1)
                e = np.exp(logits - logits.max())
                w[l, h, q, :q + 1] = e / e.sum()
    return w


def brute_dependency(w, seq, turn, layer) -> float:
    """Triple loop over (response token, head, key)."""
    T = w.shape[-1]
    roles, turns = [int(r) for r in seq.roles], [int(t) for t in seq.turn_index]
    user_roles = (int(Role.USER), int(Role.INDICATOR))
    resp = [i for i in range(T) if roles[i] == Role.ASSISTANT and turns[i] == turn]
    rows = w[layer].tolist()
    total = 0.0
    for y in resp:
        best = -1.0
        for h in range(w.shape[1]):
            s = 0.0
            for k in range(T):
                if roles[k] in user_roles and 1 <= turns[k] <= turn:
                    s += rows[h][y][k]
            best = max(best, s)
        total += best
    return total / len(resp)


def brute_heads(w, user_mask, q=-1):
    heads = []
    for l in range(w.shape[0]):
        best_h, best = 0, -1.0
        for h in range(w.shape[1]):
            s = sum(w[l, h, q, k] for k in range(w.shape[-1]) if user_mask[k])
            if s > best:  # strict: earlier head keeps ties
                best_h, best = h, s
        heads.append(best_h)
    return tuple(heads)


# ---------------------------------------------------------------- reference transformer

def _ln(v, g, b, eps=1e-5):
    mu = sum(v) / len(v)
    var = sum((x - mu) ** 2 for x in v) / len(v)
    return np.array([(x - mu) / math.sqrt(var + eps) for x in v]) * g + b


def _gelu(x):
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def _rotate(vec, pos, base):
    half = len(vec) // 2
    z = vec[:half] + 1j * vec[half:]
    theta = np.array([base ** (-i / half) for i in range(half)])
    z = z * np.exp(1j * pos * theta)
    return np.concatenate([z.real, z.imag])


def reference_forward(tokens, w, cfg):
    """Position-by-position forward pass; returns (logits (T, V), attention (L, H, T, T))."""
    T, D, H = len(tokens), cfg.d_model, cfg.n_heads
    dh = D // H
    xs = [w["tok_emb"][t].copy() for t in tokens]
    if cfg.positional == "learned":
        xs = [x + w["pos_emb"][i] for i, x in enumerate(xs)]
    att = np.zeros((cfg.n_layers, H, T, T))
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        hs = [_ln(x, w[p + "ln1.g"], w[p + "ln1.b"]) for x in xs]
        qs = [h @ w[p + "attn.wq"] for h in hs]
        ks = [h @ w[p + "attn.wk"] for h in hs]
        vs = [h @ w[p + "attn.wv"] for h in hs]
        outs = []
        for i in range(T):
            o = np.zeros(D)
            for hd in range(H):
                sl = slice(hd * dh, (hd + 1) * dh)
                qi = qs[i][sl]
                if cfg.positional == "rotary":
                    qi = _rotate(qi, i, cfg.rope_base)
                scores = []
                for j in range(i + 1):
                    kj = ks[j][sl]
                    if cfg.positional == "rotary":
                        kj = _rotate(kj, j, cfg.rope_base)
                    scores.append(float(qi @ kj) / math.sqrt(dh))
                m = max(scores)
                e = [math.exp(s - m) for s in scores]
                z = sum(e)
                for j in range(i + 1):
                    att[l, hd, i, j] = e[j] / z
                    o[sl] += att[l, hd, i, j] * vs[j][sl]
            outs.append(o)
        mids = [x + o @ w[p + "attn.wo"] for x, o in zip(xs, outs)]
        new = []
        for x in mids:
            h2 = _ln(x, w[p + "ln2.g"], w[p + "ln2.b"])
            a = h2 @ w[p + "mlp.w1"] + w[p + "mlp.b1"]
            g = np.array([_gelu(v) for v in a])
            new.append(x + g @ w[p + "mlp.w2"] + w[p + "mlp.b2"])
        xs = new
    logits = np.array([_ln(x, w["ln_f.g"], w["ln_f.b"]) @ w["lm_head.w"] + w["lm_head.b"] for x in xs])
    return logits, att


# ---------------------------------------------------------------- stub models

class ScriptedModel:
    """Stands in for Model in harness tests; ``fn(prompt, steering)`` yields output ids."""

    def __init__(self, fn, max_seq_len=10**6, n_layers=1, n_heads=1):
        self.fn = fn
        self.config = SimpleNamespace(max_seq_len=max_seq_len, n_layers=n_layers, n_heads=n_heads)
        self.calls = []

    def generate(self, prompt, max_new_tokens, steering=None):
        if len(prompt) > self.config.max_seq_len - max_new_tokens:
            raise SequenceTooLong("prompt too long for the stub")
        self.calls.append((len(prompt), steering))
        return list(self.fn(prompt, steering))[:max_new_tokens]


def echo_model(text, **kw):
    ids = tokenize(text)
    return ScriptedModel(lambda prompt, steering: ids, **kw)


def eos_model(**kw):
    return ScriptedModel(lambda prompt, steering: [], **kw)


def steering_fixed_model(answer="4817", threshold=0.3):
    """Answers correctly only when steered with alpha <= ``threshold``."""
    good, bad = tokenize(answer), tokenize("I do not know")

    def fn(prompt, steering):
        return good if steering is not None and steering.alpha <= threshold else bad
    return ScriptedModel(fn)
