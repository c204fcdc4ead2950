import numpy as np
import pytest

from exitserve.kv_cache import KvStore
from exitserve.model import (
    ModelConfig,
    ModelWeights,
    ToyDecoder,
    full_forward,
    gelu,
    greedy_token,
    reference_decode,
)


def _store(model, blocks=256):
    cfg = model.config
    return KvStore(cfg.n_layers, cfg.d_model, blocks, block_size=4)


def _forward_token(model, store, seq_id, tok):
    h = model.embed(tok)
    for i in range(1, model.n_layers + 1):
        h = model.layer_forward(i, [(seq_id, h)], store)[0]
    return h


@pytest.mark.parametrize("kw", [dict(n_layers=1), dict(d_model=1), dict(vocab_size=1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_embed(small_model):
    h = small_model.embed(5)
    assert h.shape == (16,)
    np.testing.assert_array_equal(h, small_model.embed(5))
    with pytest.raises(IndexError):
        small_model.embed(small_model.config.vocab_size)
    with pytest.raises(IndexError):
        small_model.embed(-1)


def test_compute_kv_pair_matches_direct_matvec(small_model):
    h = np.random.default_rng(0).normal(size=16)
    for i in range(1, 5):
        lw = small_model.weights.layers[i - 1]
        k, v = small_model.compute_kv_pair(i, h)
        np.testing.assert_allclose(k, lw.w_k @ h, rtol=0, atol=1e-12)
        np.testing.assert_allclose(v, lw.w_v @ h, rtol=0, atol=1e-12)
    k0, v0 = small_model.compute_kv_pair(2, np.zeros(16))
    assert not k0.any() and not v0.any()
    with pytest.raises(IndexError):
        small_model.compute_kv_pair(5, h)


def test_lm_head(small_model):
    assert not small_model.lm_head(np.zeros(16)).any()
    x = np.arange(16.0)
    assert small_model.lm_head(x).shape == (32,)
    np.testing.assert_allclose(small_model.lm_head(2 * x), 2 * small_model.lm_head(x), atol=1e-12)
    with pytest.raises(ValueError):
        small_model.lm_head(np.zeros(15))


def test_greedy_token():
    assert greedy_token([0.1, 0.9, 0.3]) == 1
    assert greedy_token([0.5, 0.5]) == 0
    assert greedy_token([2.0] * 7) == 0
    with pytest.raises(ValueError):
        greedy_token([])


def test_single_position_attends_to_itself(small_model):
    store = _store(small_model)
    store.allocate(0, 1)
    h = small_model.embed(3)
    out = small_model.layer_forward(1, [(0, h)], store)[0]
    lw = small_model.weights.layers[0]
    # with one cached position attention returns v itself
    x = h + lw.w_o @ (lw.w_v @ h)
    x = x + lw.w_down @ gelu(lw.w_up @ x)
    np.testing.assert_allclose(out, x, atol=1e-12)
    assert np.all(np.isfinite(out)) and out.shape == (16,)


def test_layer_forward_errors(small_model):
    store = _store(small_model)
    store.allocate(0, 1)
    with pytest.raises(IndexError):
        small_model.layer_forward(0, [(0, small_model.embed(1))], store)
    with pytest.raises(Exception):
        small_model.layer_forward(1, [(99, small_model.embed(1))], store)
    # layer 2 before layer 1 at this position
    with pytest.raises(RuntimeError):
        small_model.layer_forward(2, [(0, small_model.embed(1))], store)


def test_batched_equals_unbatched(small_model):
    prompts = [[4, 9, 2], [7, 7], [1, 30, 12, 5]]
    batched = _store(small_model)
    for sid, p in enumerate(prompts):
        batched.allocate(sid, 8)
    # each sequence alone, in its own cache: the oracle
    alone = {}
    for sid, p in enumerate(prompts):
        st = _store(small_model)
        st.allocate(sid, 8)
        alone[sid] = [_forward_token(small_model, st, sid, t) for t in p]
    steps = max(len(p) for p in prompts)
    for t in range(steps):
        active = [(sid, p[t]) for sid, p in enumerate(prompts) if t < len(p)]
        hs = [small_model.embed(tok) for _, tok in active]
        for i in range(1, small_model.n_layers + 1):
            hs = small_model.layer_forward(i, [(sid, h) for (sid, _), h in zip(active, hs)], batched)
        for (sid, _), h in zip(active, hs):
            np.testing.assert_allclose(h, alone[sid][t], rtol=0, atol=1e-9)


def test_identical_histories_give_identical_outputs(small_model):
    store = _store(small_model)
    store.allocate(0, 4)
    store.allocate(1, 4)
    for tok in (3, 8):
        hs = [small_model.embed(tok)] * 2
        for i in range(1, 5):
            hs = small_model.layer_forward(i, [(0, hs[0]), (1, hs[1])], store)
        np.testing.assert_array_equal(hs[0], hs[1])


def test_batch_permutation_permutes_outputs(small_model):
    toks = [3, 11, 20]
    outs = {}
    for order in ([0, 1, 2], [2, 0, 1]):
        store = _store(small_model)
        for sid in order:
            store.allocate(sid, 2)
        hs = [small_model.embed(toks[sid]) for sid in order]
        for i in range(1, 5):
            hs = small_model.layer_forward(i, [(sid, h) for sid, h in zip(order, hs)], store)
        outs[tuple(order)] = dict(zip(order, hs))
    for sid in range(3):
        np.testing.assert_allclose(outs[(0, 1, 2)][sid], outs[(2, 0, 1)][sid], atol=1e-12)


def test_causality_future_positions_do_not_change_prefix(small_model):
    tokens = [5, 1, 17, 9, 22]
    short = full_forward(small_model.weights, tokens[:3])
    long = full_forward(small_model.weights, tokens)
    for a, b in zip(short, long):
        np.testing.assert_allclose(a, b[:3], rtol=0, atol=1e-12)


def test_cached_path_matches_full_forward(small_model):
    tokens = [5, 1, 17, 9, 22, 3]
    store = _store(small_model)
    store.allocate(0, len(tokens))
    cached = [_forward_token(small_model, store, 0, t) for t in tokens]
    ref = full_forward(small_model.weights, tokens)[-1]
    np.testing.assert_allclose(np.stack(cached), ref, rtol=0, atol=1e-9)


def test_reference_decode_is_deterministic(small_model):
    a = reference_decode(small_model.weights, [3, 4], 6)
    b = reference_decode(small_model.weights, [3, 4], 6)
    assert a == b and 1 <= len(a) <= 6


def test_weights_json_round_trip(tmp_path, small_model):
    path = tmp_path / "w.json"
    small_model.weights.save(path)
    loaded = ModelWeights.load(path)
    assert loaded.config == small_model.config
    np.testing.assert_array_equal(loaded.embedding, small_model.weights.embedding)
    for a, b in zip(loaded.layers, small_model.weights.layers):
        np.testing.assert_array_equal(a.w_down, b.w_down)
    np.testing.assert_array_equal(loaded.probe_w, small_model.weights.probe_w)


def test_weights_json_validates_dimensions(small_model):
    doc = small_model.weights.to_json()
    doc["layers"][1]["w_up"] = doc["layers"][1]["w_up"][:-1]
    with pytest.raises(ValueError, match="w_up"):
        ModelWeights.from_json(doc)
    doc = small_model.weights.to_json()
    doc["layers"] = doc["layers"][:-1]
    with pytest.raises(ValueError):
        ModelWeights.from_json(doc)


def test_seeded_weights_depend_on_seed():
    a = ModelWeights.seeded(ModelConfig(n_layers=2, d_model=4, vocab_size=8, seed=0))
    b = ModelWeights.seeded(ModelConfig(n_layers=2, d_model=4, vocab_size=8, seed=1))
    assert not np.array_equal(a.layers[0].w_q, b.layers[0].w_q)
    assert not np.array_equal(a.layers[0].w_q, a.layers[1].w_q)
