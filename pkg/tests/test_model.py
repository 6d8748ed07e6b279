import numpy as np
import pytest

from disdis.autodiff import Tape, finite_diff_check
from disdis.model import (
    CategoricalDistribution, ModelConfig, build_decode_indexed,
    build_history_embedding, decode, embed_history, enumerate_predictions,
    init_params, load_tape_params, most_likely_predict, params_from_doc,
    params_to_doc, posterior_dist, prior_dist, sample_z,
)

TINY = ModelConfig(latent_k=3, embed_dim=4, future_dim=3, code_dim=3,
                   encoder_hidden=4, decoder_hidden=4)


@pytest.fixture(scope="module")
def params():
    return init_params(TINY, seed=1)


def rand_obs(seed=0):
    return np.random.default_rng(seed).normal(scale=0.5, size=(8, 2))


def rand_fut(seed=1):
    return np.random.default_rng(seed).normal(scale=0.5, size=(12, 2))


def test_embed_history_deterministic(params):
    obs = rand_obs()
    f1, f2 = embed_history(params, obs), embed_history(params, obs)
    np.testing.assert_array_equal(f1, f2)
    assert f1.shape == (TINY.embed_dim,)


def test_embed_history_zero_input_finite(params):
    f = embed_history(params, np.zeros((8, 2)))
    assert np.isfinite(f).all()


def test_embed_history_rejects_bad_shape(params):
    with pytest.raises(ValueError):
        embed_history(params, np.zeros((7, 2)))


def test_prior_uniform_at_zero_weights(params):
    p = params.copy()
    p.arrays["prior.W"][:] = 0.0
    p.arrays["prior.b"][:] = 0.0
    dist = prior_dist(p, embed_history(p, rand_obs()))
    np.testing.assert_allclose(dist.probs, np.full(TINY.latent_k, 1.0 / TINY.latent_k),
                               atol=1e-15)


def test_prior_probs_sum_to_one_and_argmax_matches_logits(params):
    dist = prior_dist(params, embed_history(params, rand_obs(3)))
    assert abs(dist.probs.sum() - 1.0) < 1e-9
    assert np.argmax(dist.probs) == np.argmax(dist.logits)


def test_posterior_uniform_at_zero_weights(params):
    p = params.copy()
    p.arrays["post.W"][:] = 0.0
    p.arrays["post.b"][:] = 0.0
    dist = posterior_dist(p, embed_history(p, rand_obs()), rand_fut())
    np.testing.assert_allclose(dist.probs, np.full(TINY.latent_k, 1.0 / TINY.latent_k),
                               atol=1e-15)


def test_posterior_deterministic(params):
    f = embed_history(params, rand_obs(5))
    fut = rand_fut(6)
    d1, d2 = posterior_dist(params, f, fut), posterior_dist(params, f, fut)
    np.testing.assert_array_equal(d1.logits, d2.logits)


def test_decode_shape_and_range_check(params):
    f = embed_history(params, rand_obs())
    y = decode(params, f, 0)
    assert y.shape == (12, 2)
    with pytest.raises(ValueError):
        decode(params, f, TINY.latent_k)
    with pytest.raises(ValueError):
        decode(params, f, -1)


def test_decode_distinct_latents_generically_distinct(params):
    f = embed_history(params, rand_obs(9))
    outputs = [decode(params, f, z) for z in range(TINY.latent_k)]
    for i in range(len(outputs)):
        for j in range(i + 1, len(outputs)):
            assert np.abs(outputs[i] - outputs[j]).max() > 1e-9


def test_most_likely_tie_breaks_to_lowest_index(params):
    p = params.copy()
    p.arrays["prior.W"][:] = 0.0
    p.arrays["prior.b"][:] = 0.0  # uniform prior: every latent ties
    obs = rand_obs(2)
    f = embed_history(p, obs)
    np.testing.assert_array_equal(most_likely_predict(p, obs), decode(p, f, 0))


def test_most_likely_peaked_prior(params):
    p = params.copy()
    p.arrays["prior.W"][:] = 0.0
    p.arrays["prior.b"][:] = 0.0
    p.arrays["prior.b"][0, 2] = 5.0
    obs = rand_obs(4)
    f = embed_history(p, obs)
    np.testing.assert_array_equal(most_likely_predict(p, obs), decode(p, f, 2))


def test_most_likely_invariant_to_monotone_logit_transform(params):
    obs = rand_obs(8)
    base = most_likely_predict(params, obs)
    p = params.copy()
    p.arrays["prior.W"] *= 3.0  # strictly monotone transform of the logits
    p.arrays["prior.b"] *= 3.0
    np.testing.assert_allclose(most_likely_predict(p, obs), base, atol=1e-12)


def test_sample_z_one_hot():
    dist = CategoricalDistribution(logits=np.array([0.0, 50.0, 0.0]),
                                   probs=np.array([0.0, 1.0, 0.0]))
    rng = np.random.default_rng(0)
    assert all(sample_z(dist, rng) == 1 for _ in range(20))


def test_sample_z_uniform_frequencies_within_binomial_ci():
    k, n = 5, 100_000
    dist = CategoricalDistribution.from_logits(np.zeros(k))
    rng = np.random.default_rng(123)
    draws = np.array([sample_z(dist, rng) for _ in range(n)])
    se = np.sqrt((1 / k) * (1 - 1 / k) / n)
    freqs = np.bincount(draws, minlength=k) / n
    assert (np.abs(freqs - 1 / k) < 4 * se).all()


def test_sample_z_reproducible():
    dist = CategoricalDistribution.from_logits(np.array([0.3, -0.2, 1.0]))
    a = [sample_z(dist, np.random.default_rng(9)) for _ in range(10)]
    b = [sample_z(dist, np.random.default_rng(9)) for _ in range(10)]
    assert a == b


def test_encoder_gradients_match_finite_differences(params):
    obs = rand_obs(11)[None]
    names = [n for n in params.arrays if n.startswith(("enc.", "enc_out."))]

    def loss(p):
        t = Tape()
        pv = {n: t.param(n, p[n]) for n in names}
        for n, a in params.arrays.items():
            if n not in p:
                pv[n] = t.const(a)
        f = build_history_embedding(t, pv, TINY, obs)
        return t, t.mean(t.square(f))

    sub = {n: params.arrays[n] for n in names}
    report = finite_diff_check(loss, sub, step=1e-5, tolerance=1e-5)
    assert report.passed, str(report)


def test_decoder_gradients_match_finite_differences(params):
    f_val = embed_history(params, rand_obs(12))[None]
    names = [n for n in params.arrays
             if n.startswith(("dec.", "dec_init.", "dec_out.", "zembed."))]

    def loss(p):
        t = Tape()
        pv = {n: t.param(n, p[n]) for n in names}
        pos = build_decode_indexed(t, pv, TINY, t.const(f_val), [1])
        return t, t.mean(t.square(pos))

    sub = {n: params.arrays[n] for n in names}
    report = finite_diff_check(loss, sub, step=1e-5, tolerance=1e-5)
    assert report.passed, str(report)


def test_enumerate_predictions_matches_single_sample_ops(params):
    obs = np.stack([rand_obs(i) for i in range(3)])
    probs, trajs = enumerate_predictions(params, obs, chunk_rows=4)
    for i in range(3):
        f = embed_history(params, obs[i])
        np.testing.assert_allclose(probs[i], prior_dist(params, f).probs, atol=1e-12)
        for z in range(TINY.latent_k):
            np.testing.assert_allclose(trajs[i, z], decode(params, f, z), atol=1e-12)


def test_params_doc_roundtrip_bit_exact(params):
    doc = params_to_doc(params)
    restored = params_from_doc(doc)
    assert restored.config == params.config
    for name, arr in params.arrays.items():
        assert np.array_equal(restored.arrays[name], arr)


def test_params_doc_shape_mismatch_rejected(params):
    doc = params_to_doc(params)
    doc["arrays"]["prior.W"]["shape"] = [1, 1]
    with pytest.raises(ValueError):
        params_from_doc(doc)


def test_categorical_distribution_validation():
    with pytest.raises(ValueError):
        CategoricalDistribution(logits=np.zeros(3), probs=np.array([0.5, 0.4, 0.2]))
