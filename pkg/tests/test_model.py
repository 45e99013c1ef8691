import math

import numpy as np
import pytest

from ctxscope.errors import EmptyCorpus, EmptyLossMask, SequenceTooLong, TokenOutOfVocab
from ctxscope.model import (Model, ModelConfig, TrainParams, batch_loss, forward, generate, grad, init_weights,
                            load_checkpoint, loss_and_grad, loss_sft, make_batch, save_checkpoint, train,
                            write_loss_trace)
from ctxscope.steering import SteeringSpec, steer_row
from ctxscope.tokenizer import Role, TemplateSpec, conversation, render

from helpers import random_conversation, reference_forward

NULL = TemplateSpec.null()


def noisy_weights(cfg, seed, scale=0.3):
    """Init weights plus noise so gains, biases and projections are all non-trivial."""
    rng = np.random.default_rng(seed)
    return {k: v + rng.normal(0.0, scale, v.shape) for k, v in init_weights(cfg).items()}


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def random_configs(n=20, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        H = int(rng.choice([1, 2, 4]))
        dh = int(rng.choice([2, 4, 8]))
        out.append(ModelConfig(n_layers=int(rng.integers(1, 4)), n_heads=H, d_model=H * dh, vocab_size=40,
                               max_seq_len=16, rng_seed=i, positional=str(rng.choice(["rotary", "learned"]))))
    return out


def test_forward_matches_reference_on_random_configs():
    rng = np.random.default_rng(11)
    for cfg in random_configs():
        w = noisy_weights(cfg, cfg.rng_seed)
        toks = rng.integers(0, cfg.vocab_size, size=int(rng.integers(1, 13)))
        logits, rec = forward(toks, w, cfg, capture_attention=True)
        ref_logits, ref_att = reference_forward(toks, w, cfg)
        assert rel_err(logits, ref_logits) <= 1e-6, cfg
        assert np.max(np.abs(rec.weights - ref_att)) <= 1e-9


def test_attention_rows_stochastic_and_causal():
    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=16)
    w = noisy_weights(cfg, 1)
    toks = np.random.default_rng(2).integers(0, cfg.vocab_size, size=30)
    _, rec = forward(toks, w, cfg, capture_attention=True)
    A = rec.weights
    assert np.all(np.abs(A.sum(-1) - 1.0) <= 1e-6)
    upper = np.triu(np.ones((30, 30), dtype=bool), k=1)
    assert np.all(A[..., upper] == 0.0)
    assert np.all(A[..., ~upper] > 0.0)


def test_single_token_attention_is_one():
    cfg = ModelConfig(n_layers=2, n_heads=4, d_model=16)
    _, rec = forward([9], init_weights(cfg), cfg, capture_attention=True)
    assert np.array_equal(rec.weights, np.ones((2, 4, 1, 1)))


def test_zeroed_qk_gives_uniform_rows():
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16)
    w = init_weights(cfg)
    w["layers.0.attn.wq"][:] = 0.0
    w["layers.0.attn.wk"][:] = 0.0
    _, rec = forward([20, 20], w, cfg, capture_attention=True)
    assert np.allclose(rec.weights[0, :, 1], [0.5, 0.5], atol=0, rtol=1e-15)


def test_input_validation():
    cfg = ModelConfig(n_layers=1, n_heads=1, d_model=8, max_seq_len=4)
    w = init_weights(cfg)
    with pytest.raises(SequenceTooLong):
        forward([1] * 5, w, cfg)
    with pytest.raises(TokenOutOfVocab):
        forward([cfg.vocab_size], w, cfg)


def test_uniform_loss_is_log_vocab():
    assert math.isclose(loss_sft(np.zeros((3, 64)), [1, 2, 3], [False, True, False]), math.log(64), rel_tol=1e-12)
    assert round(math.log(64), 4) == 4.1589


def test_empty_mask_raises():
    with pytest.raises(EmptyLossMask):
        loss_sft(np.zeros((2, 8)), [0, 1], [False, False])


def test_loss_matches_scalar_oracle():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(12, 30))
    tgt = rng.integers(0, 30, size=12)
    mask = rng.random(12) < 0.5
    mask[0] = True
    terms = []
    for i in range(12):
        if mask[i]:
            z = max(logits[i])
            terms.append(-(logits[i, tgt[i]] - z - math.log(sum(math.exp(v - z) for v in logits[i]))))
    assert math.isclose(loss_sft(logits, tgt, mask), sum(terms) / len(terms), rel_tol=1e-12)


def _fd_batch(cfg):
    rng = np.random.default_rng(5)
    seqs = [render(random_conversation(rng, 2, cid=str(i)), NULL) for i in range(2)]
    return make_batch(seqs)


def test_gradient_matches_central_differences():
    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=16, max_seq_len=128, rng_seed=3)
    w = noisy_weights(cfg, 3)
    batch = _fd_batch(cfg)
    g = grad(w, batch, cfg)
    rng = np.random.default_rng(6)
    eps = 1e-4
    worst = 0.0
    for name in sorted(w):
        for _ in range(3):
            idx = tuple(int(rng.integers(s)) for s in w[name].shape)
            if name == "tok_emb":  # pick a row the batch actually uses
                idx = (int(batch[0][0, 3]), idx[1])
            old = w[name][idx]
            w[name][idx] = old + eps
            lp = batch_loss(w, batch, cfg)
            w[name][idx] = old - eps
            lm = batch_loss(w, batch, cfg)
            w[name][idx] = old
            fd = (lp - lm) / (2 * eps)
            an = g[name][idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
    assert worst <= 1e-4


def test_zero_weight_unembedding_gradient_is_uniform_baseline():
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16, max_seq_len=64)
    w = {k: np.zeros_like(v) for k, v in init_weights(cfg).items()}
    seqs = [render(conversation("ab", "ab"), NULL), render(conversation("ba", "ba"), NULL)]
    inputs, targets, mask = make_batch(seqs)
    g = grad(w, (inputs, targets, mask), cfg)
    used = set(targets[mask].tolist())
    unused = [v for v in range(cfg.vocab_size) if v not in used]
    # every logit is 0, so dL/db_v = mean over masked positions of (1/V - [v == target])
    assert np.allclose(g["lm_head.b"][unused], 1.0 / cfg.vocab_size, rtol=1e-12, atol=0)
    assert np.array_equal(g["lm_head.w"][:, unused], np.zeros((cfg.d_model, len(unused))))


def test_loss_mask_isolation():
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16, max_seq_len=64)
    w = noisy_weights(cfg, 2)
    seq = render(conversation("question here", "answer"), NULL)
    inputs, targets, mask = make_batch([seq])
    user_pos = np.flatnonzero(~mask[0])[0]
    t2 = targets.copy()
    t2[0, user_pos] = (t2[0, user_pos] + 7) % cfg.vocab_size
    l1, g1 = loss_and_grad(w, (inputs, targets, mask), cfg)
    l2, g2 = loss_and_grad(w, (inputs, t2, mask), cfg)
    assert l1 == l2
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)


def test_mask_selects_assistant_targets():
    seq = render(conversation("hi", "yo"), load_tinyllama())
    _, targets, mask = make_batch([seq])
    assert np.array_equal(mask[0], seq.roles[1:] == Role.ASSISTANT)


def load_tinyllama():
    from ctxscope.tokenizer import load_template
    return load_template("tinyllama")


def _tiny_corpus(n=6):
    rng = np.random.default_rng(8)
    return [render(random_conversation(rng, 1, cid=str(i)), NULL) for i in range(n)]


def test_train_zero_steps_returns_init():
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16, max_seq_len=64)
    w, trace = train(_tiny_corpus(), cfg, TrainParams(steps=0))
    init = init_weights(cfg)
    assert trace == [] and all(np.array_equal(w[k], init[k]) for k in init)


def test_train_is_deterministic_and_learns():
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16, max_seq_len=64)
    p = TrainParams(steps=40, batch_size=3, lr=1e-2, warmup=5)
    w1, t1 = train(_tiny_corpus(), cfg, p)
    w2, t2 = train(_tiny_corpus(), cfg, p)
    assert t1 == t2
    assert all(np.array_equal(w1[k], w2[k]) for k in w1)
    assert np.mean(t1[-5:]) < 0.5 * t1[0]


def test_train_empty_corpus():
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16)
    with pytest.raises(EmptyCorpus):
        train([], cfg, TrainParams(steps=1))
    with pytest.raises(EmptyCorpus):
        train([render(conversation("only a question"), NULL)], cfg, TrainParams(steps=1))


def test_generate_basics():
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16, max_seq_len=40)
    w = noisy_weights(cfg, 0)
    prompt = render(conversation("abc"), NULL)
    assert generate(w, cfg, prompt, 0) == []
    a, b = generate(w, cfg, prompt, 10), generate(w, cfg, prompt, 10)
    assert a == b and len(a) <= 10
    with pytest.raises(SequenceTooLong):
        generate(w, cfg, prompt, 40)


def test_generate_stops_at_eos():
    cfg = ModelConfig(n_layers=1, n_heads=1, d_model=8, max_seq_len=40)
    w = init_weights(cfg)
    w["lm_head.b"][1] = 100.0  # EOS always wins
    assert generate(w, cfg, render(conversation("abc"), NULL), 10) == []


def test_steering_alpha_one_is_bit_identical():
    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=16)
    w = noisy_weights(cfg, 4)
    seq = render(conversation("the user part", "reply", "more"), NULL)
    base, _ = forward(seq.tokens, w, cfg)
    same, _ = forward(seq.tokens, w, cfg, steering=SteeringSpec(1.0, ((0, 1), (1, 0)), seq.user_mask()))
    assert np.array_equal(base, same)


def test_steered_rows_equal_steer_row_of_unsteered():
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16)
    w = noisy_weights(cfg, 5)
    seq = render(conversation("user words", "reply", "again"), NULL)
    mask = seq.user_mask()
    _, plain = forward(seq.tokens, w, cfg, capture_attention=True)
    _, steered = forward(seq.tokens, w, cfg, capture_attention=True, steering=SteeringSpec(0.3, ((0, 1),), mask))
    for q in range(len(seq)):
        want = steer_row(plain.weights[0, 1, q], mask, 0.3) if mask[:q + 1].any() and not mask[:q + 1].all() \
            else plain.weights[0, 1, q]
        assert np.allclose(steered.weights[0, 1, q], want, rtol=0, atol=1e-15)
    assert np.array_equal(steered.weights[0, 0], plain.weights[0, 0])  # untargeted head untouched
    assert np.all(np.abs(steered.weights.sum(-1) - 1) <= 1e-12)


def test_checkpoint_roundtrip(tmp_path):
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16, positional="learned")
    w = noisy_weights(cfg, 9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, w, cfg)
    w2, cfg2 = load_checkpoint(path)
    assert cfg2 == cfg
    assert all(np.array_equal(w[k], w2[k]) for k in w)
    assert path.read_bytes()[:8] == b"CTXSCKPT"
    m = Model.load(path)
    assert m.config == cfg


def test_loss_trace_csv(tmp_path):
    write_loss_trace(tmp_path / "l.csv", [2.5, 1.25])
    assert (tmp_path / "l.csv").read_text().splitlines() == ["step,loss", "0,2.5", "1,1.25"]
