import numpy as np
import pytest
from hypothesis import given, strategies as st

from routed_steering import model as M
from routed_steering import vocab
from routed_steering.autodiff import Tensor

prompts = st.lists(st.integers(0, vocab.VOCAB_SIZE - 1), min_size=1, max_size=20)


@given(prompts, st.integers(1, 2))
def test_split_forward_is_bitwise_monolithic(tiny_model, toks, layer):
    state = M.forward_to_layer(tiny_model, toks, layer)
    assert np.array_equal(M.continue_from_layer(tiny_model, state), M.forward(tiny_model, toks))


@given(prompts)
def test_zero_steer_generate_equals_plain(tiny_model, toks):
    a = M.generate(tiny_model, toks, max_steps=5)
    b = M.generate(tiny_model, toks, steer=np.zeros(tiny_model.config.model_dim), max_steps=5)
    assert a.tokens == b.tokens


def test_cached_decode_matches_recompute(tiny_model):
    # each greedy step equals argmax of a fresh monolithic pass on the prefix
    prompt = [vocab.BOS, 5, 9, 12]
    gen = M.generate(tiny_model, prompt, max_steps=6, eos=-1)
    seq = list(prompt)
    for tok in gen.tokens:
        assert tok == int(np.argmax(M.forward(tiny_model, seq)))
        seq.append(tok)


def test_greedy_many_matches_generate(tiny_model):
    rng = np.random.default_rng(0)
    ps = [list(rng.integers(1, vocab.VOCAB_SIZE, size=rng.integers(3, 9))) for _ in range(20)]
    steers = rng.normal(scale=0.5, size=(20, tiny_model.config.model_dim))
    batched = M.greedy_many(tiny_model, ps, steers, max_steps=5)
    for p, s, b in zip(ps, steers, batched):
        assert M.generate(tiny_model, p, steer=s, max_steps=5).tokens == b


def test_sample_batch_is_seeded(tiny_model):
    steers = np.zeros((4, tiny_model.config.model_dim))
    prompt = [vocab.BOS, 7, 8]
    a = M.sample_batch(tiny_model, prompt, steers, 1.5, [np.random.default_rng(i) for i in range(4)], 6)
    b = M.sample_batch(tiny_model, prompt, steers, 1.5, [np.random.default_rng(i) for i in range(4)], 6)
    assert a[0] == b[0]
    assert all(np.array_equal(x, y) for x, y in zip(a[1], b[1]))
    assert all(np.all(lp <= 0) for lp in a[1])


def test_steered_logits_replays_steered_decoding(tiny_model):
    d = tiny_model.config.model_dim
    prompt = [vocab.BOS, 4, 6, 11]
    steer = np.random.default_rng(3).normal(size=d)
    gen = M.generate(tiny_model, prompt, steer=steer, max_steps=4, eos=-1).tokens
    seq = np.array([prompt + gen[:-1]])
    logits = M.steered_logits(tiny_model, seq, steer[None], [len(prompt) - 1], 1).data[0]
    assert [int(t) for t in logits[len(prompt) - 1:].argmax(axis=-1)] == gen


def test_steer_fn_computes_once_from_prefill(tiny_model):
    calls = []

    def fn(state):
        calls.append(state.hidden.copy())
        return np.zeros_like(state.hidden)

    M.generate(tiny_model, [vocab.BOS, 3, 4], max_steps=4, steer_fn=fn, eos=-1)
    assert len(calls) == 1


def test_frozen_weights_are_read_only(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.weights["tok_emb"][0, 0] = 1.0
    assert tiny_model.current_fingerprint() == tiny_model.fingerprint


def test_context_errors(tiny_model):
    with pytest.raises(M.ContextError):
        M.forward(tiny_model, [])
    with pytest.raises(M.ContextError):
        M.forward(tiny_model, [0] * (tiny_model.config.max_context + 1))
    with pytest.raises(M.ContextError):
        M.forward(tiny_model, [vocab.VOCAB_SIZE])
    with pytest.raises(M.ContextError):
        M.forward_to_layer(tiny_model, [1, 2], layer=tiny_model.config.num_layers)


def test_stale_resume_context_rejected(tiny_model):
    cache = M.DecodeCache(tiny_model.config, 1)
    s1 = M.forward_to_layer(tiny_model, [1, 2, 3], 1, cache)
    M.continue_from_layer(tiny_model, s1)
    M.forward_to_layer(tiny_model, [1, 2, 3, 4], 1, cache)
    with pytest.raises(M.ContextError):
        M.continue_from_layer(tiny_model, s1)


def test_checkpoint_roundtrip_and_corruption(tiny_model, tmp_path):
    p = tmp_path / "m.bin"
    M.save_model(tiny_model, p)
    back = M.load_model(p)
    assert back.fingerprint == tiny_model.fingerprint
    assert back.config == tiny_model.config
    raw = bytearray(p.read_bytes())
    raw[100] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(M.CheckpointError):
        M.load_model(p)


def test_decode_token_ties_and_errors():
    assert M.decode_token(np.array([1.0, 3.0, 3.0])) == 1
    with pytest.raises(ValueError):
        M.decode_token(np.zeros(3), temperature=0.0, rng=np.random.default_rng(0))
    with pytest.raises(FloatingPointError):
        M.decode_token(np.array([0.0, np.nan]))


def test_block_output_has_fixed_scale(tiny_model):
    toks = np.array([[vocab.BOS, 3, 5, 7, 9]])
    h = M.lower_pass(tiny_model, toks, 1)
    rms = np.sqrt(((h - h.mean(axis=-1, keepdims=True)) ** 2).mean(axis=-1))
    np.testing.assert_allclose(rms, tiny_model.config.residual_scale, rtol=0.02)


def test_injection_mask_positions():
    m = M.injection_mask([4, 3], [1, 2], 5)[..., 0]
    np.testing.assert_array_equal(m, [[0, 1, 1, 1, 0], [0, 0, 1, 0, 0]])


def test_upper_pass_is_differentiable(tiny_model):
    from routed_steering import autodiff as ad
    toks = np.array([[vocab.BOS, 3, 5]])
    lower = M.lower_pass(tiny_model, toks, 1)
    v = ad.parameter(np.zeros(tiny_model.config.model_dim))
    out = M.upper_pass(tiny_model, Tensor(lower) + v, 1)
    out[0, -1, 3].backward()
    assert v.grad is not None and np.abs(v.grad).sum() > 0
