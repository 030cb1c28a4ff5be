import numpy as np
import pytest

from inattention.model import (
    ModelConfig,
    ModelParams,
    Sampler,
    decode_step,
    forward_full,
    forward_last,
    generate,
    init_params,
    new_cache,
    param_breakdown,
    param_count,
    tensor_names,
)
from inattention.tensor import Rng

from conftest import small_config

# (d_model, mlp_factor, n_layers) with reference dense / InAttention totals
REFERENCE_SIZES = [
    (768, 3, 12, 235610880, 235629312),
    (1024, 4, 16, 421168128, 421200896),
    (1280, 5, 20, 733646080, 733697280),
]


@pytest.mark.parametrize("d,f,L,dense_total,inat_total", REFERENCE_SIZES)
def test_parameter_delta_is_two_d_per_layer(d, f, L, dense_total, inat_total):
    for V in (257, 50304, 214479):
        cfg = ModelConfig(d_model=d, mlp_factor=f, n_layers=L, n_heads=8, vocab_size=V)
        delta = param_count(cfg.with_variant("inattention")) - param_count(cfg)
        assert delta == 2 * d * L == inat_total - dense_total


@pytest.mark.parametrize("d,f,L,dense_total,inat_total", REFERENCE_SIZES)
def test_reference_totals_with_tied_embeddings(d, f, L, dense_total, inat_total):
    # the reference totals fit a tied embedding over a 214479-entry vocabulary
    cfg = ModelConfig(d_model=d, mlp_factor=f, n_layers=L, n_heads=8, vocab_size=214479, tie_embeddings=True)
    assert param_count(cfg) == dense_total
    assert param_count(cfg.with_variant("inattention")) == inat_total


def test_count_matches_materialized_tensors():
    for variant in ("dense", "inattention"):
        for tie in (False, True):
            cfg = small_config(variant, tie_embeddings=tie)
            p = init_params(cfg, 0)
            assert p.n_params() == param_count(cfg) == sum(param_breakdown(cfg).values())
            assert [n for n, _ in p.named_tensors()] == tensor_names(cfg)


def test_init_shares_common_tensors_across_variants():
    a = init_params(small_config("dense"), 3)
    b = init_params(small_config("inattention"), 3)
    named_b = dict(b.named_tensors())
    for name, t in a.named_tensors():
        np.testing.assert_array_equal(t.data, named_b[name].data)
    for lp in b.layers:
        np.testing.assert_array_equal(lp.normn.gain.data, 1.0)
        np.testing.assert_array_equal(lp.normn.bias.data, 0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(variant="sparse")
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"d_model": 8, "n_heads": 2, "width": 3})
    cfg = small_config("inattention")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_from_named_rejects_wrong_shapes():
    cfg = small_config()
    arrays = {n: t.data for n, t in init_params(cfg, 0).named_tensors()}
    arrays["decoder"] = arrays["decoder"][:, :-1]
    with pytest.raises(ValueError):
        ModelParams.from_named(cfg, arrays)
    with pytest.raises(KeyError):
        ModelParams.from_named(cfg, {**arrays, "extra": np.zeros(1)})


def test_forward_shapes_and_token_checks(tiny64):
    p = tiny64()
    assert forward_full(p, np.arange(5)).shape == (5, 32)
    assert forward_full(p, np.zeros((3, 4), int)).shape == (3, 4, 32)
    assert forward_last(p, np.zeros((3, 4), int)).shape == (3, 32)
    with pytest.raises(IndexError):
        forward_full(p, [0, 32])
    with pytest.raises(ValueError):
        forward_full(p, [])


def test_dense_is_causal(tiny64):
    p = tiny64()
    a = forward_full(p, [1, 2, 3, 4, 5]).data
    b = forward_full(p, [1, 2, 3, 9, 9]).data
    np.testing.assert_array_equal(a[:3], b[:3])
    assert not np.allclose(a[3:], b[3:])


def test_inattention_is_causal(tiny64):
    p = tiny64("inattention")
    a = forward_full(p, [1, 2, 3, 4, 5]).data
    b = forward_full(p, [1, 2, 3, 9, 9]).data
    np.testing.assert_array_equal(a[:3], b[:3])


@pytest.mark.parametrize("T", [1, 2, 7, 33])
def test_fast_path_matches_full_last_row(tiny64, T):
    p = tiny64("inattention", seed=T, init_std=0.3)
    toks = Rng(T).integers(0, 32, (2, T))
    np.testing.assert_allclose(forward_last(p, toks).data, forward_full(p, toks).data[:, -1], atol=1e-12)


def test_one_layer_models_agree(tiny64):
    d = tiny64("dense", n_layers=1, init_std=0.3)
    i = tiny64("inattention", n_layers=1, init_std=0.3)
    toks = Rng(2).integers(0, 32, 11)
    np.testing.assert_allclose(forward_full(d, toks).data, forward_full(i, toks).data, atol=1e-12)


def test_two_layer_models_differ(tiny64):
    d = tiny64("dense", init_std=0.3)
    i = tiny64("inattention", init_std=0.3)
    toks = Rng(2).integers(0, 32, 11)
    assert np.abs(forward_full(d, toks).data - forward_full(i, toks).data).max() > 1e-6


def test_tied_decoder_uses_embedding(tiny64):
    p = tiny64(tie_embeddings=True, init_std=0.3)
    assert p.decoder is None
    before = forward_full(p, [1, 2, 3]).data
    p.embedding.data[7] += Rng(1).normal((16,))
    after = forward_full(p, [1, 2, 3]).data
    assert not np.allclose(before[:, 7], after[:, 7])


def test_small_model_gradients():
    from conftest import model_gradient_errors

    p = init_params(small_config("inattention", d_model=8, n_layers=1, vocab_size=6, init_std=0.3), 0)
    errs = model_gradient_errors(p, np.array([[1, 4, 2, 5, 0]]), eps=1e-5)
    assert max(errs.values()) < 1e-4, errs


# ---------------------------------------------------------------- decoding


@pytest.mark.parametrize("variant,policy", [("dense", None), ("inattention", "embeddings"), ("inattention", "kv")])
def test_decode_matches_full(tiny64, variant, policy):
    p = tiny64(variant, init_std=0.3)
    toks = Rng(4).integers(0, 32, 9)
    full = forward_full(p, toks).data
    cache = new_cache(p.config, policy)
    for t, tok in enumerate(toks):
        logits, cache = decode_step(p, cache, int(tok))
        np.testing.assert_allclose(logits.data, full[t], atol=1e-12)
    assert cache.length == 9


def test_cache_sizes(tiny64):
    p = tiny64("inattention")
    d, L = p.config.d_model, p.config.n_layers
    emb = new_cache(p.config, "embeddings")
    kv = new_cache(p.config, "kv")
    for tok in range(6):
        _, emb = decode_step(p, emb, tok)
        _, kv = decode_step(p, kv, tok)
    assert emb.nbytes() == 6 * d * 8
    assert kv.nbytes() == 2 * L * 6 * d * 8


def test_cache_policy_errors(tiny64):
    with pytest.raises(ValueError):
        new_cache(tiny64().config, "embeddings")
    with pytest.raises(ValueError):
        new_cache(tiny64("inattention").config, "hidden")
    with pytest.raises(ValueError):
        decode_step(tiny64("dense"), new_cache(tiny64("inattention").config), 1)


def test_generate_zero_tokens_echoes_prompt(tiny64):
    assert generate(tiny64(), [3, 1, 4], 0) == [3, 1, 4]


def test_greedy_generation_matches_argmax(tiny64):
    p = tiny64("inattention", init_std=0.3)
    out = generate(p, [1, 2], 4)
    seq = [1, 2]
    for _ in range(4):
        seq.append(int(np.argmax(forward_full(p, seq).data[-1])))
    assert out == seq


def test_temperature_sampling_is_seeded(tiny64):
    p = tiny64(init_std=0.3)
    a = generate(p, [1], 8, Sampler("temperature", 1.0, seed=5))
    b = generate(p, [1], 8, Sampler("temperature", 1.0, seed=5))
    assert a == b
    assert all(0 <= t < 32 for t in a)


def test_sampler_distribution():
    s = Sampler("temperature", 1.0, seed=0)
    logits = np.log(np.array([0.7, 0.2, 0.1]))
    counts = np.bincount([s.sample(logits) for _ in range(4000)], minlength=3) / 4000
    np.testing.assert_allclose(counts, [0.7, 0.2, 0.1], atol=0.03)


def test_sampler_validation():
    with pytest.raises(ValueError):
        Sampler("beam")
    with pytest.raises(ValueError):
        Sampler("temperature", 0.0)
