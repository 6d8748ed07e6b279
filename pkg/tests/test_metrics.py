import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disdis.dataio import SyntheticPersona, normalize, synth_generate
from disdis.metrics import (
    PCMDCurve, ade, best_of_n, dump_latents, fde, metric_report,
    pattern_purity, pcmd, pcmd_dataset, pcmd_from_distances, rank_order,
    write_metric_report, write_pcmd_csv,
)
from disdis.model import ModelConfig, embed_history, init_params, most_likely_predict, prior_dist

TINY = ModelConfig(latent_k=5, embed_dim=4, future_dim=3, code_dim=3,
                   encoder_hidden=4, decoder_hidden=4)

PERSONAS = [
    SyntheticPersona(0, 0.15, 0.5, 0.02),
    SyntheticPersona(1, -0.15, 0.5, 0.02),
]


@pytest.fixture(scope="module")
def params():
    return init_params(TINY, seed=3)


@pytest.fixture(scope="module")
def samples():
    return [normalize(s) for s in synth_generate(PERSONAS, 4, seed=21)]


def straight(n=12):
    return np.stack([np.arange(1.0, n + 1.0), np.zeros(n)], axis=1)


# -- ade / fde ------------------------------------------------------------------

def test_ade_fde_zero_on_equal():
    gt = straight()
    assert ade(gt, gt) == 0.0
    assert fde(gt, gt) == 0.0


def test_ade_constant_offset():
    # oracle: every step offset by (3, 4) -> norm 5 at each of 12 steps
    gt = straight()
    assert abs(ade(gt + np.array([3.0, 4.0]), gt) - 5.0) < 1e-12


def test_ade_final_step_only():
    # oracle: single final offset of 1.2 m averaged over 12 steps -> 0.1
    gt = straight()
    pred = gt.copy()
    pred[-1, 1] += 1.2
    assert abs(ade(pred, gt) - 0.1) < 1e-12


def test_fde_final_offset():
    gt = straight()
    pred = gt.copy()
    pred[-1] += np.array([3.0, 4.0])
    assert abs(fde(pred, gt) - 5.0) < 1e-12


def test_fde_ignores_non_final_steps():
    gt = straight()
    pred = gt.copy()
    pred[:-1] += 7.5
    assert fde(pred, gt) == 0.0


def test_ade_length_mismatch():
    with pytest.raises(ValueError):
        ade(straight(11), straight(12))
    with pytest.raises(ValueError):
        fde(straight(11), straight(12))


# -- pcmd core ------------------------------------------------------------------

def test_pcmd_sort_cummin_example_descending_probs():
    # oracle: probs already sorted; cummin of [1.0, 0.4, 0.2]
    a, f = pcmd_from_distances([0.5, 0.3, 0.2], [1.0, 0.4, 0.2], [1.0, 0.4, 0.2])
    np.testing.assert_allclose(a, [1.0, 0.4, 0.2], atol=1e-15)
    np.testing.assert_allclose(f, [1.0, 0.4, 0.2], atol=1e-15)


def test_pcmd_sort_cummin_example_reordering():
    # oracle: probs [0.2, 0.5, 0.3] rank latents as z2, z3, z1; distances
    # [0.1, 0.9, 0.5] then cummin to [0.9, 0.5, 0.1]
    a, _ = pcmd_from_distances([0.2, 0.5, 0.3], [0.1, 0.9, 0.5], [0.1, 0.9, 0.5])
    np.testing.assert_allclose(a, [0.9, 0.5, 0.1], atol=1e-15)


def test_rank_order_ties_break_to_lowest_index():
    np.testing.assert_array_equal(rank_order([0.25, 0.25, 0.5]), [2, 0, 1])
    np.testing.assert_array_equal(rank_order([0.25, 0.25, 0.25, 0.25]), [0, 1, 2, 3])


def brute_force_pcmd(probs, dists):
    """Direct evaluation: min distance over every threshold-achievable set."""
    probs, dists = np.asarray(probs), np.asarray(dists)
    out = {}
    for tau in sorted(set(probs), reverse=True):
        chosen = probs >= tau
        out[int(chosen.sum())] = dists[chosen].min()
    return out


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**32 - 1), st.booleans())
def test_pcmd_matches_brute_force_threshold_oracle(k, seed, with_ties):
    rng = np.random.default_rng(seed)
    probs = rng.random(k)
    if with_ties:
        probs[: k // 2] = probs[0]
    probs = probs / probs.sum()
    dists = rng.random(k)
    curve, _ = pcmd_from_distances(probs, dists, dists)
    for m, expected in brute_force_pcmd(probs, dists).items():
        assert abs(curve[m - 1] - expected) < 1e-12


def test_pcmd_model_curve_monotone_and_endpoints(params, samples):
    s = samples[0]
    curve = pcmd(params, s)
    assert curve.M == TINY.latent_k
    assert (np.diff(curve.ade) <= 1e-15).all()
    assert (np.diff(curve.fde) <= 1e-15).all()
    pred = most_likely_predict(params, s.obs)
    assert abs(curve.ade[0] - ade(pred, s.fut)) < 1e-12
    assert abs(curve.fde[0] - fde(pred, s.fut)) < 1e-12
    from disdis.model import decode
    f = embed_history(params, s.obs)
    all_ade = [ade(decode(params, f, z), s.fut) for z in range(TINY.latent_k)]
    assert abs(curve.ade[-1] - min(all_ade)) < 1e-12


def test_pcmd_m_validation(params, samples):
    with pytest.raises(ValueError):
        pcmd(params, samples[0], M=0)
    with pytest.raises(ValueError):
        pcmd(params, samples[0], M=TINY.latent_k + 1)


def test_pcmd_m_one_equals_most_likely(params, samples):
    s = samples[1]
    curve = pcmd(params, s, M=1)
    pred = most_likely_predict(params, s.obs)
    assert abs(curve.ade[0] - ade(pred, s.fut)) < 1e-12


def test_pcmd_sampled_mode_deterministic_given_seed(params, samples):
    c1 = pcmd(params, samples[0], M=9, mode="sampled", rng=np.random.default_rng(5))
    c2 = pcmd(params, samples[0], M=9, mode="sampled", rng=np.random.default_rng(5))
    np.testing.assert_array_equal(c1.ade, c2.ade)
    assert (np.diff(c1.ade) <= 1e-15).all()


def test_pcmd_dataset_mean_and_determinism(params, samples):
    c1 = pcmd_dataset(params, samples)
    c2 = pcmd_dataset(params, samples)
    np.testing.assert_array_equal(c1.ade, c2.ade)
    np.testing.assert_array_equal(c1.fde, c2.fde)
    per_sample = [pcmd(params, s) for s in samples]
    np.testing.assert_allclose(c1.ade, np.mean([c.ade for c in per_sample], axis=0),
                               atol=1e-12)
    assert (np.diff(c1.ade) <= 1e-15).all()


# -- best_of_n -------------------------------------------------------------------

def test_best_of_n_exact_equals_pcmd_rank(params, samples):
    s = samples[2]
    curve = pcmd(params, s)
    for n in (1, 2, TINY.latent_k):
        got = best_of_n(params, s, n)
        assert got == curve.at(n)


def test_best_of_n_dominance(params, samples):
    s = samples[0]
    values = [best_of_n(params, s, n)[0] for n in range(1, TINY.latent_k + 1)]
    assert all(b <= a + 1e-15 for a, b in zip(values, values[1:]))


def test_best_of_one_sampled_from_one_hot_prior_matches_most_likely(params, samples):
    p = params.copy()
    p.arrays["prior.W"][:] = 0.0
    p.arrays["prior.b"][:] = 0.0
    p.arrays["prior.b"][0, 3] = 30.0
    s = samples[3]
    got = best_of_n(p, s, 1, rng=np.random.default_rng(0), exact=False)
    pred = most_likely_predict(p, s.obs)
    assert abs(got[0] - ade(pred, s.fut)) < 1e-12


# -- pattern purity ----------------------------------------------------------------

def test_purity_perfect_assignment():
    assert pattern_purity([0, 0, 1, 1, 2, 2], [5, 5, 6, 6, 7, 7]) == 1.0


def test_purity_single_cluster_four_balanced_labels():
    assert pattern_purity([3] * 8, [0, 0, 1, 1, 2, 2, 3, 3]) == 0.25


def test_purity_random_labels_near_half_for_two_classes():
    rng = np.random.default_rng(0)
    n = 20_000
    latent = rng.integers(0, 2, size=n)
    labels = rng.integers(0, 2, size=n)
    p = pattern_purity(latent, labels)
    assert abs(p - 0.5) < 0.02  # 0.5 + O(n^-1/2)


def test_purity_requires_labels():
    with pytest.raises(ValueError):
        pattern_purity([0, 1], None)
    with pytest.raises(ValueError):
        pattern_purity([0, 1], [None, 1])
    with pytest.raises(ValueError):
        pattern_purity([0, 1, 2], [0, 1])


# -- report and dumps ----------------------------------------------------------------

def test_metric_report_identities(params, samples):
    report = metric_report(params, samples, n_best=3)
    assert report.n_samples == len(samples)
    assert abs(report.most_likely_ade - report.pcmd.ade[0]) < 1e-15
    assert report.best_of_n_ade <= report.most_likely_ade + 1e-15
    assert report.best_of_n_n == 3


def test_pcmd_csv_format(params, samples, tmp_path):
    curve = pcmd_dataset(params, samples)
    path = tmp_path / "pcmd.csv"
    write_pcmd_csv(curve, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "m,k,ade,fde"
    assert len(lines) == curve.M + 1
    first = lines[1].split(",")
    assert first[0] == "1" and abs(float(first[1]) - 1.0 / curve.M) < 1e-15


def test_metrics_txt_format(params, samples, tmp_path):
    report = metric_report(params, samples)
    path = tmp_path / "metrics.txt"
    write_metric_report(report, path)
    for line in path.read_text().strip().split("\n"):
        name, value = line.split("=")
        assert name and value


def test_dump_latents_rows_and_probs(params, samples, tmp_path):
    path = tmp_path / "latents.csv"
    dump_latents(params, samples, path)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == len(samples) + 1
    header = lines[0].split(",")
    assert header[:3] == ["scene", "ped", "pattern_label"]
    assert len(header) == 3 + TINY.latent_k
    for i, line in enumerate(lines[1:]):
        cells = line.split(",")
        probs = np.array([float(c) for c in cells[3:]])
        assert abs(probs.sum() - 1.0) < 1e-6
        f = embed_history(params, samples[i].obs)
        np.testing.assert_allclose(probs, prior_dist(params, f).probs, atol=1e-9)


def test_dump_latents_byte_deterministic(params, samples, tmp_path):
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    dump_latents(params, samples, p1)
    dump_latents(params, samples, p2)
    assert p1.read_bytes() == p2.read_bytes()
