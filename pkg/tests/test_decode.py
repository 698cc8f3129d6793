import numpy as np
import pytest

import hybridlab as hl
from hybridlab.config import preset, with_vocab
from hybridlab.decode import (
    DecodeState,
    FullKV,
    RollingKV,
    decode_step,
    generate,
    measure_decode,
    prefill,
    sample_token,
)
from hybridlab.model import HybridModel
from hybridlab.tensor import ContractError, named_rng, no_grad

PRESETS = ("toy-llama", "toy-mamba", "toy-swa", "toy-inter", "toy-intra", "toy-intra-2l")


def cached_vs_full(name, total=24, prompt=5, batch=2, seed=1):
    cfg, layout = preset(name)
    model = HybridModel(cfg, layout, seed=seed)
    tokens = named_rng(seed, f"dec-{name}").integers(0, cfg.vocab, size=(batch, total))
    state, logits = prefill(model, tokens[:, :prompt])
    rows = [logits.data[:, -1]]
    for t in range(prompt, total):
        rows.append(decode_step(model, state, tokens[:, t]).data)
    with no_grad():
        full = model.forward(tokens).data
    worst = max(
        float(np.abs(rows[i] - full[:, prompt - 1 + i]).max()) for i in range(len(rows))
    )
    return worst, state, cfg, layout


@pytest.mark.parametrize("name", PRESETS)
def test_cached_decoding_equals_full_forward(name):
    worst, _, _, _ = cached_vs_full(name)
    assert worst < 1e-8, worst


@pytest.mark.parametrize("name", PRESETS)
def test_measured_cache_bytes_match_the_cost_model(name):
    _, state, cfg, layout = cached_vs_full(name, total=16)
    assert state.cache_bytes() == hl.cache_bytes(layout, cfg, state.position)


def test_state_bytes_match_at_every_step():
    cfg, layout = preset("toy-swa")
    model = HybridModel(cfg, layout, seed=0)
    state, _ = prefill(model, np.zeros((1, 1), dtype=np.int64))
    for _ in range(cfg.window + cfg.sink + 6):
        decode_step(model, state, 3)
        assert state.cache_bytes() == hl.cache_bytes(layout, cfg, state.position)


def test_prefill_rejects_empty_prompt():
    cfg, layout = preset("toy-llama")
    model = HybridModel(cfg, layout, seed=0)
    with pytest.raises(ContractError):
        prefill(model, np.zeros((1, 0), dtype=np.int64))


def test_decode_step_advances_position():
    cfg, layout = preset("toy-llama")
    model = HybridModel(cfg, layout, seed=0)
    state, _ = prefill(model, np.array([[1, 2, 3]]))
    assert state.position == 3
    decode_step(model, state, 4)
    assert state.position == 4


def test_full_kv_stores_positions_in_order():
    kv = FullKV(n_kv=1, d_qk=2, d_v=2)
    for p in range(4):
        kv.append(np.full((1, 1, 2), p, dtype=np.float64), np.zeros((1, 1, 2)), p)
    ks, vs, positions = kv.read()
    assert kv.entries == 4
    assert positions.tolist() == [0, 1, 2, 3]
    assert ks.shape == (1, 4, 1, 2)


def test_rolling_kv_keeps_sinks_and_recycles_the_ring():
    window, sink = 4, 2
    kv = RollingKV(window=window, sink=sink, n_kv=1, d_qk=2, d_v=2)
    total = 11
    for p in range(total):
        kv.append(np.full((1, 1, 2), p, dtype=np.float64), np.zeros((1, 1, 2)), p)
    assert kv.entries == kv.capacity == window + sink
    _, _, positions = kv.read()
    held = sorted(positions.tolist())
    # sinks stay forever; the ring holds the trailing window
    assert held == [0, 1] + list(range(total - window, total))


def test_rolling_kv_matches_visible_set_of_the_training_mask():
    cfg, _ = preset("toy-swa")
    window, sink = cfg.window, cfg.sink
    kv = RollingKV(window=window, sink=sink, n_kv=1, d_qk=2, d_v=2)
    L = 30
    for p in range(L):
        kv.append(np.zeros((1, 1, 2)), np.zeros((1, 1, 2)), p)
    _, _, positions = kv.read()
    # decode appends the query's own key before reading, so the cached
    # set is exactly the last training-mask row
    mask_row = hl.swa_mask(L, window, sink)[L - 1]
    assert set(positions.tolist()) == set(np.nonzero(mask_row)[0].tolist())


def test_greedy_generation_is_deterministic():
    cfg, layout = preset("toy-llama")
    model = HybridModel(cfg, layout, seed=0)
    prompt = named_rng(0, "gen").integers(0, cfg.vocab, size=(1, 6))
    a, _ = generate(model, prompt, n_new=6)
    b, _ = generate(model, prompt, n_new=6)
    assert np.array_equal(a, b)
    assert a.shape == (1, 6)


def test_tempered_sampling_uses_the_rng():
    cfg, layout = preset("toy-llama")
    model = HybridModel(cfg, layout, seed=0)
    prompt = named_rng(0, "gen").integers(0, cfg.vocab, size=(1, 6))
    a, _ = generate(model, prompt, n_new=8, temperature=1.0, rng=named_rng(5, "s"))
    b, _ = generate(model, prompt, n_new=8, temperature=1.0, rng=named_rng(5, "s"))
    c, _ = generate(model, prompt, n_new=8, temperature=1.0, rng=named_rng(6, "s"))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sample_token_greedy_is_argmax():
    logits = np.array([[0.1, 2.0, -1.0]])
    assert sample_token(logits).tolist() == [1]


def test_measure_decode_trace_shape_and_accounting():
    cfg, layout = preset("toy-inter")
    model = HybridModel(cfg, layout, seed=0)
    trace = measure_decode(model, prompt_len=6, gen_len=5)
    assert len(trace) == 5
    assert [t.position for t in trace] == list(range(6, 11))
    for t in trace:
        assert t.cache_bytes_measured == t.cache_bytes_accounted
        assert t.flops == hl.model_decode_step_flops(layout, cfg, t.position)


def test_measure_decode_interleaved_trace_is_the_blockwise_sum():
    # a 1:5 stack's per-step ops must equal the mix of its parts
    cfg, layout = preset("toy-inter")
    model = HybridModel(cfg, layout, seed=0)
    trace = measure_decode(model, prompt_len=4, gen_len=3)
    for row in trace:
        want = sum(hl.decode_step_flops(b, cfg, row.position) for b in layout.blocks)
        want += 2 * cfg.d_model * cfg.vocab
        assert row.flops == want


def test_mamba_state_bytes_do_not_grow():
    cfg, layout = preset("toy-mamba")
    model = HybridModel(cfg, layout, seed=0)
    s1, _ = prefill(model, np.zeros((1, 3), dtype=np.int64))
    s2, _ = prefill(model, np.zeros((1, 40), dtype=np.int64))
    assert s1.cache_bytes() == s2.cache_bytes()


def test_full_attention_state_bytes_grow_linearly():
    cfg, layout = preset("toy-llama")
    model = HybridModel(cfg, layout, seed=0)
    s1, _ = prefill(model, np.zeros((1, 10), dtype=np.int64))
    s2, _ = prefill(model, np.zeros((1, 20), dtype=np.int64))
    assert s2.cache_bytes() == 2 * s1.cache_bytes()
