"""A small decoder-only transformer in float64 numpy.

Pre-norm blocks with causal multi-head attention (rotary or learned absolute
positions) and a GELU MLP. The forward pass can hand back every post-softmax
attention matrix and can re-weight selected heads toward user tokens. The
backward pass is written out by hand so training needs nothing beyond numpy.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyCorpus, EmptyLossMask, SequenceTooLong, TokenOutOfVocab
from .steering import SteeringSpec, steer_rows
from .tokenizer import DEFAULT_TOKENIZER, AnnotatedSequence, Role

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    vocab_size: int = DEFAULT_TOKENIZER.vocab_size
    max_seq_len: int = 512
    rng_seed: int = 0
    positional: str = "rotary"
    d_ff: int | None = None
    rope_base: float = 10000.0
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.positional not in ("rotary", "learned"):
            raise ValueError(f"unknown positional scheme {self.positional!r}")
        if self.positional == "rotary" and self.d_head % 2:
            raise ValueError("rotary positions need an even head dimension")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class AttentionRecord:
    """Post-softmax attention for one sequence, shape (layers, heads, T, T)."""

    weights: np.ndarray

    def __getitem__(self, idx):
        return self.weights[idx]

    @property
    def n_layers(self) -> int:
        return self.weights.shape[0]

    @property
    def n_heads(self) -> int:
        return self.weights.shape[1]

    @property
    def seq_len(self) -> int:
        return self.weights.shape[2]


def weight_shapes(config: ModelConfig) -> dict[str, tuple]:
    D, F, V = config.d_model, config.ff_dim, config.vocab_size
    shapes = {"tok_emb": (V, D)}
    if config.positional == "learned":
        shapes["pos_emb"] = (config.max_seq_len, D)
    for l in range(config.n_layers):
        p = f"layers.{l}."
        shapes.update({
            p + "ln1.g": (D,), p + "ln1.b": (D,),
            p + "attn.wq": (D, D), p + "attn.wk": (D, D), p + "attn.wv": (D, D), p + "attn.wo": (D, D),
            p + "ln2.g": (D,), p + "ln2.b": (D,),
            p + "mlp.w1": (D, F), p + "mlp.b1": (F,), p + "mlp.w2": (F, D), p + "mlp.b2": (D,),
        })
    shapes.update({"ln_f.g": (D,), "ln_f.b": (D,), "lm_head.w": (D, V), "lm_head.b": (V,)})
    return shapes


def init_weights(config: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(config.rng_seed)
    out_std = config.init_std / np.sqrt(2 * config.n_layers)
    weights = {}
    for name, shape in weight_shapes(config).items():
        if name.endswith((".g",)):
            w = np.ones(shape)
        elif name.endswith((".b", ".b1", ".b2")):
            w = np.zeros(shape)
        elif name.endswith(("attn.wo", "mlp.w2")):
            w = rng.normal(0.0, out_std, shape)
        else:
            w = rng.normal(0.0, config.init_std, shape)
        weights[name] = w
    return weights


# ---------------------------------------------------------------- primitives

def _layernorm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_back(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _gelu(a):
    t = np.tanh(_GELU_C * (a + 0.044715 * (a * a * a)))
    return 0.5 * a * (1.0 + t), t


def _gelu_back(da_out, a, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * a * a)
    return da_out * (0.5 * (1.0 + t) + 0.5 * a * dt)


def _rope_tables(T, d_head, base):
    half = d_head // 2
    inv = base ** (-np.arange(half) / half)
    ang = np.arange(T)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def _rope(x, cos, sin):
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)


def _rope_back(g, cos, sin):
    half = g.shape[-1] // 2
    g1, g2 = g[..., :half], g[..., half:]
    return np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1)


@lru_cache(maxsize=8)
def _future_mask(T):
    m = np.triu(np.full((T, T), -np.inf), k=1)
    m.setflags(write=False)
    return m


def _causal_softmax(S):
    """Row softmax over keys k <= q; future entries come out exactly 0. Works in place."""
    S += _future_mask(S.shape[-1])
    S -= S.max(-1, keepdims=True)
    np.exp(S, out=S)
    S /= S.sum(-1, keepdims=True)
    return S


# ---------------------------------------------------------------- forward / backward

def _check_tokens(tokens, config):
    T = tokens.shape[-1]
    if T > config.max_seq_len:
        raise SequenceTooLong(f"sequence of {T} tokens exceeds max_seq_len={config.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise TokenOutOfVocab(f"token ids must lie in [0, {config.vocab_size})")


def _forward_batch(tokens, weights, config, steering=None, capture=False, keep_cache=False):
    """tokens: (B, T) int array. Returns (logits, attention list, cache)."""
    B, T = tokens.shape
    H, dh = config.n_heads, config.d_head
    scale = 1.0 / np.sqrt(dh)
    cache = {"tokens": tokens, "layers": []}
    x = weights["tok_emb"][tokens]
    if config.positional == "learned":
        x = x + weights["pos_emb"][:T]
    else:
        cos, sin = _rope_tables(T, dh, config.rope_base)
        cache["rope"] = (cos, sin)
    steer_at = {}
    if steering is not None and steering.alpha != 1.0:
        mask = np.asarray(steering.user_mask, dtype=bool)
        if mask.shape[-1] != T:
            raise ValueError(f"steering mask length {mask.shape[-1]} != sequence length {T}")
        for l, h in steering.targets:
            if not (0 <= l < config.n_layers and 0 <= h < config.n_heads):
                raise ValueError(f"steering target {(l, h)} out of bounds")
            steer_at.setdefault(l, []).append(h)
    attn = []
    for l in range(config.n_layers):
        p = f"layers.{l}."
        h_in, ln1 = _layernorm(x, weights[p + "ln1.g"], weights[p + "ln1.b"])
        q = (h_in @ weights[p + "attn.wq"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = (h_in @ weights[p + "attn.wk"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = (h_in @ weights[p + "attn.wv"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        if config.positional == "rotary":
            q, k = _rope(q, cos, sin), _rope(k, cos, sin)
        A = _causal_softmax(q @ k.transpose(0, 1, 3, 2) * scale)
        if l in steer_at:
            m = mask if mask.ndim == 2 else np.broadcast_to(mask, (B, T))
            for h in steer_at[l]:
                A[:, h] = steer_rows(A[:, h], m[:, None, :], steering.alpha)
        if capture:
            attn.append(A)
        O = (A @ v).transpose(0, 2, 1, 3).reshape(B, T, H * dh)
        x_mid = x + O @ weights[p + "attn.wo"]
        h2, ln2 = _layernorm(x_mid, weights[p + "ln2.g"], weights[p + "ln2.b"])
        a = h2 @ weights[p + "mlp.w1"] + weights[p + "mlp.b1"]
        g, t = _gelu(a)
        x_out = x_mid + g @ weights[p + "mlp.w2"] + weights[p + "mlp.b2"]
        if keep_cache:
            cache["layers"].append(dict(ln1=ln1, h_in=h_in, q=q, k=k, v=v, A=A, O=O,
                                        ln2=ln2, h2=h2, a=a, g=g, t=t))
        x = x_out
    hf, lnf = _layernorm(x, weights["ln_f.g"], weights["ln_f.b"])
    logits = hf @ weights["lm_head.w"] + weights["lm_head.b"]
    if keep_cache:
        cache["lnf"], cache["hf"] = lnf, hf
    return logits, attn, cache


def _backward_batch(dlogits, weights, config, cache):
    B, T, _ = dlogits.shape
    H, dh, D = config.n_heads, config.d_head, config.d_model
    scale = 1.0 / np.sqrt(dh)
    grads = {name: np.zeros_like(w) for name, w in weights.items()}
    hf = cache["hf"]
    grads["lm_head.w"] = hf.reshape(-1, D).T @ dlogits.reshape(-1, dlogits.shape[-1])
    grads["lm_head.b"] = dlogits.reshape(-1, dlogits.shape[-1]).sum(0)
    dhf = dlogits @ weights["lm_head.w"].T
    dx, grads["ln_f.g"], grads["ln_f.b"] = _layernorm_back(dhf, weights["ln_f.g"], cache["lnf"])
    for l in reversed(range(config.n_layers)):
        p = f"layers.{l}."
        c = cache["layers"][l]
        # MLP branch
        grads[p + "mlp.b2"] = dx.reshape(-1, D).sum(0)
        grads[p + "mlp.w2"] = c["g"].reshape(-1, c["g"].shape[-1]).T @ dx.reshape(-1, D)
        dg = dx @ weights[p + "mlp.w2"].T
        da = _gelu_back(dg, c["a"], c["t"])
        grads[p + "mlp.b1"] = da.reshape(-1, da.shape[-1]).sum(0)
        grads[p + "mlp.w1"] = c["h2"].reshape(-1, D).T @ da.reshape(-1, da.shape[-1])
        dh2 = da @ weights[p + "mlp.w1"].T
        dmid, grads[p + "ln2.g"], grads[p + "ln2.b"] = _layernorm_back(dh2, weights[p + "ln2.g"], c["ln2"])
        dx_mid = dx + dmid
        # attention branch
        grads[p + "attn.wo"] = c["O"].reshape(-1, D).T @ dx_mid.reshape(-1, D)
        dO = (dx_mid @ weights[p + "attn.wo"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        A, q, k, v = c["A"], c["q"], c["k"], c["v"]
        dA = dO @ v.transpose(0, 1, 3, 2)
        dv = A.transpose(0, 1, 3, 2) @ dO
        dA -= (dA * A).sum(-1, keepdims=True)
        dS = np.multiply(dA, A, out=dA)
        dq = dS @ k * scale
        dk = dS.transpose(0, 1, 3, 2) @ q * scale
        if config.positional == "rotary":
            cos, sin = cache["rope"]
            dq, dk = _rope_back(dq, cos, sin), _rope_back(dk, cos, sin)
        merge = lambda z: z.transpose(0, 2, 1, 3).reshape(B * T, D)  # noqa: E731
        h_in = c["h_in"].reshape(-1, D)
        grads[p + "attn.wq"] = h_in.T @ merge(dq)
        grads[p + "attn.wk"] = h_in.T @ merge(dk)
        grads[p + "attn.wv"] = h_in.T @ merge(dv)
        dh_in = (merge(dq) @ weights[p + "attn.wq"].T + merge(dk) @ weights[p + "attn.wk"].T
                 + merge(dv) @ weights[p + "attn.wv"].T).reshape(B, T, D)
        dres, grads[p + "ln1.g"], grads[p + "ln1.b"] = _layernorm_back(dh_in, weights[p + "ln1.g"], c["ln1"])
        dx = dx_mid + dres
    tokens = cache["tokens"]
    np.add.at(grads["tok_emb"], tokens.reshape(-1), dx.reshape(-1, D))
    if config.positional == "learned":
        grads["pos_emb"][:T] += dx.sum(0)
    return grads


def forward(tokens, weights, config: ModelConfig, capture_attention: bool = False,
            steering: SteeringSpec | None = None):
    """Run one sequence through the model.

    Returns ``(logits, record)`` where ``logits`` has shape (T, vocab) and
    ``record`` is an :class:`AttentionRecord` when ``capture_attention`` is set,
    else ``None``.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_tokens(tokens, config)
    logits, attn, _ = _forward_batch(tokens[None, :], weights, config, steering=steering, capture=capture_attention)
    record = AttentionRecord(np.stack([a[0] for a in attn])) if capture_attention else None
    return logits[0], record


# ---------------------------------------------------------------- loss / grad

def _log_softmax(logits):
    z = logits - logits.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def loss_sft(logits, targets, assistant_mask) -> float:
    """Mean next-token cross-entropy over masked target positions only."""
    mask = np.asarray(assistant_mask, dtype=bool)
    if not mask.any():
        raise EmptyLossMask("no assistant position in the loss mask")
    logp = _log_softmax(np.asarray(logits)[mask])
    tgt = np.asarray(targets)[mask]
    return float(-logp[np.arange(len(tgt)), tgt].mean())


def make_batch(seqs: Sequence[AnnotatedSequence], pad_id: int = DEFAULT_TOKENIZER.pad_id):
    """Shift sequences into (inputs, targets, mask) arrays, right-padded.

    The mask selects target positions whose token has role ASSISTANT.
    """
    T = max(len(s) for s in seqs) - 1
    B = len(seqs)
    inputs = np.full((B, T), pad_id, dtype=np.int64)
    targets = np.full((B, T), pad_id, dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    for i, s in enumerate(seqs):
        n = len(s) - 1
        inputs[i, :n] = s.tokens[:-1]
        targets[i, :n] = s.tokens[1:]
        mask[i, :n] = s.roles[1:] == Role.ASSISTANT
    return inputs, targets, mask


def loss_and_grad(weights, batch, config: ModelConfig):
    """Loss and gradient for a batch given as AnnotatedSequences or (inputs, targets, mask)."""
    if isinstance(batch, tuple):
        inputs, targets, mask = batch
    else:
        inputs, targets, mask = make_batch(batch)
    _check_tokens(inputs, config)
    if not mask.any():
        raise EmptyLossMask("no assistant position in the batch")
    logits, _, cache = _forward_batch(inputs, weights, config, keep_cache=True)
    logp = _log_softmax(logits)
    n = int(mask.sum())
    sel = logp[mask]
    tsel = targets[mask]
    loss = float(-sel[np.arange(n), tsel].mean())
    dlogits = np.zeros_like(logits)
    p = np.exp(sel)
    p[np.arange(n), tsel] -= 1.0
    dlogits[mask] = p / n
    return loss, _backward_batch(dlogits, weights, config, cache)


def grad(weights, batch, config: ModelConfig) -> dict[str, np.ndarray]:
    return loss_and_grad(weights, batch, config)[1]


def batch_loss(weights, batch, config: ModelConfig) -> float:
    inputs, targets, mask = batch if isinstance(batch, tuple) else make_batch(batch)
    logits, _, _ = _forward_batch(inputs, weights, config)
    return loss_sft(logits, targets, mask)


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainParams:
    lr: float = 3e-3
    steps: int = 500
    batch_size: int = 8
    clip: float = 1.0
    trunc_len: int = 4096
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    warmup: int = 20
    bucket: int = 8


def truncate_for_training(seqs, trunc_len, max_seq_len):
    """Right-truncate to the training limit, dropping sequences with no loss target left."""
    limit = min(trunc_len, max_seq_len + 1)
    out = []
    for s in seqs:
        s = s.truncate(limit)
        if len(s) > 1 and (s.roles[1:] == Role.ASSISTANT).any():
            out.append(s)
    return out


def _bucketed_batches(rng, lengths, batch_size, bucket):
    """One epoch of batches: shuffle, sort windows of ``bucket`` batches by
    length so padding stays small, then shuffle the batch order."""
    order = rng.permutation(len(lengths))
    window = batch_size * max(1, bucket)
    batches = []
    for i in range(0, len(order), window):
        chunk = order[i:i + window]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches += [chunk[j:j + batch_size] for j in range(0, len(chunk), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def train(seqs: Sequence[AnnotatedSequence], config: ModelConfig, params: TrainParams = TrainParams(),
          weights=None, log_every: int = 0, logger=None):
    """Adam training on rendered conversations.

    Batches are drawn from a seeded permutation per epoch, so the result is a
    pure function of (seqs, config, params). Returns ``(weights, loss_trace)``
    where the trace holds the pre-update batch loss of every step.
    """
    seqs = truncate_for_training(seqs, params.trunc_len, config.max_seq_len)
    if not seqs:
        raise EmptyCorpus("no trainable sequence after preprocessing and truncation")
    weights = {k: v.copy() for k, v in (weights or init_weights(config)).items()}
    rng = np.random.default_rng(config.rng_seed + 1)
    m = {k: np.zeros_like(v) for k, v in weights.items()}
    v2 = {k: np.zeros_like(v) for k, v in weights.items()}
    b1, b2 = params.betas
    trace = []
    batches = []
    lengths = np.array([len(s) for s in seqs])
    for step in range(params.steps):
        if not batches:
            batches = _bucketed_batches(rng, lengths, params.batch_size, params.bucket)
        idx = batches.pop()
        loss, g = loss_and_grad(weights, [seqs[i] for i in idx], config)
        trace.append(loss)
        norm = np.sqrt(sum(float((x * x).sum()) for x in g.values()))
        if params.clip and norm > params.clip:
            for x in g.values():
                x *= params.clip / norm
        lr = params.lr * min(1.0, (step + 1) / max(1, params.warmup))
        t = step + 1
        for k in weights:
            m[k] = b1 * m[k] + (1 - b1) * g[k]
            v2[k] = b2 * v2[k] + (1 - b2) * g[k] * g[k]
            mhat = m[k] / (1 - b1 ** t)
            vhat = v2[k] / (1 - b2 ** t)
            weights[k] -= lr * mhat / (np.sqrt(vhat) + params.eps)
        if logger is not None and log_every and (step % log_every == 0 or step == params.steps - 1):
            logger.info("step %d loss %.4f", step, loss)
    return weights, trace


# ---------------------------------------------------------------- generation

def generate(weights, config: ModelConfig, prompt: AnnotatedSequence, max_new_tokens: int,
             steering: SteeringSpec | None = None, eos_id: int = DEFAULT_TOKENIZER.eos_id) -> list[int]:
    """Greedy decoding; stops at EOS (not included) or after ``max_new_tokens``."""
    if len(prompt) > config.max_seq_len - max_new_tokens:
        raise SequenceTooLong(
            f"prompt of {len(prompt)} tokens leaves no room for {max_new_tokens} new tokens "
            f"within max_seq_len={config.max_seq_len}")
    tokens = list(int(t) for t in prompt.tokens)
    base_mask = None
    if steering is not None:
        base_mask = np.asarray(steering.user_mask if steering.user_mask is not None else prompt.user_mask(), dtype=bool)
    out: list[int] = []
    for _ in range(max_new_tokens):
        spec = None
        if steering is not None:
            mask = np.concatenate([base_mask, np.zeros(len(out), dtype=bool)])
            spec = SteeringSpec(steering.alpha, steering.targets, mask)
        logits, _ = forward(tokens, weights, config, steering=spec)
        nxt = int(np.argmax(logits[-1]))
        if nxt == eos_id:
            break
        out.append(nxt)
        tokens.append(nxt)
    return out


@dataclass
class Model:
    """A config plus its weights; the object the evaluation harnesses drive."""

    config: ModelConfig
    weights: dict = field(repr=False)

    @classmethod
    def init(cls, config: ModelConfig) -> "Model":
        return cls(config, init_weights(config))

    def forward(self, tokens, capture_attention=False, steering=None):
        return forward(tokens, self.weights, self.config, capture_attention, steering)

    def generate(self, prompt, max_new_tokens, steering=None):
        return generate(self.weights, self.config, prompt, max_new_tokens, steering)

    def save(self, path):
        save_checkpoint(path, self.weights, self.config)

    @classmethod
    def load(cls, path) -> "Model":
        weights, config = load_checkpoint(path)
        return cls(config, weights)


# ---------------------------------------------------------------- persistence

_MAGIC = b"CTXSCKPT"


def save_checkpoint(path, weights, config: ModelConfig) -> None:
    """Write ``magic | u64 header length | JSON header | little-endian float64 payload``."""
    table = []
    offset = 0
    for name in sorted(weights):
        w = weights[name]
        table.append({"name": name, "shape": list(w.shape), "offset": offset})
        offset += w.size * 8
    header = json.dumps({"config": config.to_dict(), "tensors": table}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for name in sorted(weights):
            f.write(np.ascontiguousarray(weights[name], dtype="<f8").tobytes())


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n])
    base = 16 + n
    weights = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        start = base + t["offset"]
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=start).astype(np.float64)
        weights[t["name"]] = arr.reshape(t["shape"])
    return weights, ModelConfig(**header["config"])


def write_loss_trace(path, trace) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for i, loss in enumerate(trace):
            w.writerow([i, repr(float(loss))])
