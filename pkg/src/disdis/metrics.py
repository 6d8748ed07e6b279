"""Displacement metrics, exhaustive-rank PCMD curves, and latent diagnostics.

A PCMD curve reports, at each rank m, the minimum trajectory error among the
m highest-probability latent codes. With a discrete latent the enumeration
over all K codes is exact, so repeated evaluations are bit-identical. The
dataset-level curve is the unweighted mean of per-sample curves at each rank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .model import (
    build_history_embedding, build_prior_logits, enumerate_predictions,
    load_tape_params, sample_categorical,
)


def ade(pred, gt):
    """Mean Euclidean displacement over all predicted steps, in meters."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"trajectory shapes differ: {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def fde(pred, gt):
    """Euclidean distance between predicted and true final positions."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"trajectory shapes differ: {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred[-1] - gt[-1]))


@dataclass
class PCMDCurve:
    m_values: np.ndarray  # 1..M
    ade: np.ndarray       # min ADE among the top-m ranked latents
    fde: np.ndarray
    M: int

    def at(self, m):
        if not 1 <= m <= self.M:
            raise ValueError(f"rank {m} outside 1..{self.M}")
        return float(self.ade[m - 1]), float(self.fde[m - 1])


def rank_order(probs):
    """Latent indices by descending probability; ties go to the lowest index."""
    return np.argsort(-np.asarray(probs), kind="stable")


def pcmd_from_distances(probs, ade_per_z, fde_per_z):
    """Sort-and-cummin core: per-sample PCMD over explicit per-latent errors."""
    order = rank_order(probs)
    return (np.minimum.accumulate(np.asarray(ade_per_z)[order]),
            np.minimum.accumulate(np.asarray(fde_per_z)[order]))


def _per_latent_distances(trajs, fut):
    # trajs (K, 12, 2), fut (12, 2)
    diff = np.linalg.norm(trajs - fut[None], axis=-1)  # (K, 12)
    return diff.mean(axis=1), diff[:, -1]


def pcmd(params, sample, M=None, mode="exact", rng=None):
    """PCMD curve for one normalized sample.

    Exact mode enumerates all K latents (M defaults to K and may not exceed
    it). Sampled mode draws M latents from the prior with replacement, for
    latent spaces too large to enumerate.
    """
    k = params.config.latent_k
    if M is None:
        M = k
    if M < 1:
        raise ValueError("M must be >= 1")
    probs, trajs = enumerate_predictions(params, np.asarray(sample.obs)[None])
    probs, trajs = probs[0], trajs[0]
    if mode == "exact":
        if M > k:
            raise ValueError(f"exact mode enumerates at most K={k} latents")
        idx = np.arange(k)
    elif mode == "sampled":
        if rng is None:
            raise ValueError("sampled mode needs an rng")
        idx = sample_categorical(probs, rng, size=M)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    a, f = _per_latent_distances(trajs[idx], np.asarray(sample.fut))
    a_curve, f_curve = pcmd_from_distances(probs[idx], a, f)
    return PCMDCurve(np.arange(1, M + 1), a_curve[:M], f_curve[:M], M)


def pcmd_dataset(params, samples, M=None, chunk_rows=4096):
    """Mean PCMD curve over samples (exact enumeration)."""
    k = params.config.latent_k
    if M is None:
        M = k
    if not 1 <= M <= k:
        raise ValueError(f"M must be in 1..{k}")
    if not samples:
        raise ValueError("no samples to evaluate")
    obs = np.stack([np.asarray(s.obs) for s in samples])
    probs, trajs = enumerate_predictions(params, obs, chunk_rows=chunk_rows)
    a_sum = np.zeros(M)
    f_sum = np.zeros(M)
    for i, s in enumerate(samples):
        a, f = _per_latent_distances(trajs[i], np.asarray(s.fut))
        a_curve, f_curve = pcmd_from_distances(probs[i], a, f)
        a_sum += a_curve[:M]
        f_sum += f_curve[:M]
    n = len(samples)
    return PCMDCurve(np.arange(1, M + 1), a_sum / n, f_sum / n, M)


def best_of_n(params, sample, n, rng=None, exact=True):
    """Minimum (ADE, FDE) over n latents.

    Exact-rank mode takes the n most probable latents, which equals the PCMD
    value at rank n; otherwise n latents are sampled from the prior.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    k = params.config.latent_k
    if exact:
        curve = pcmd(params, sample, M=min(n, k))
        return curve.at(min(n, k))
    if rng is None:
        raise ValueError("sampled mode needs an rng")
    probs, trajs = enumerate_predictions(params, np.asarray(sample.obs)[None])
    idx = sample_categorical(probs[0], rng, size=n)
    a, f = _per_latent_distances(trajs[0][idx], np.asarray(sample.fut))
    return float(a.min()), float(f.min())


def pattern_purity(latent_argmax, labels):
    """Fraction of samples whose label is the majority label of their latent.

    Each occupied latent index is assigned the most common pattern label among
    its samples; purity is the fraction of samples matching that assignment.
    """
    latent_argmax = np.asarray(latent_argmax)
    if labels is None:
        raise ValueError("pattern_purity needs labels")
    labels = np.asarray(labels)
    if any(l is None for l in labels.tolist()):
        raise ValueError("pattern_purity needs a label for every sample")
    if latent_argmax.shape != labels.shape or latent_argmax.size == 0:
        raise ValueError("latent indices and labels must align and be non-empty")
    matched = 0
    for z in np.unique(latent_argmax):
        member_labels = labels[latent_argmax == z]
        _, counts = np.unique(member_labels, return_counts=True)
        matched += counts.max()
    return matched / labels.size


@dataclass
class MetricReport:
    most_likely_ade: float
    most_likely_fde: float
    best_of_n_ade: float
    best_of_n_fde: float
    best_of_n_n: int
    pcmd: PCMDCurve
    n_samples: int

    def lines(self):
        yield f"n_samples={self.n_samples}"
        yield f"most_likely_ade={self.most_likely_ade!r}"
        yield f"most_likely_fde={self.most_likely_fde!r}"
        yield f"best_of_n_n={self.best_of_n_n}"
        yield f"best_of_n_ade={self.best_of_n_ade!r}"
        yield f"best_of_n_fde={self.best_of_n_fde!r}"
        yield f"pcmd_m1_ade={float(self.pcmd.ade[0])!r}"
        yield f"pcmd_mM_ade={float(self.pcmd.ade[-1])!r}"
        yield f"pcmd_m1_fde={float(self.pcmd.fde[0])!r}"
        yield f"pcmd_mM_fde={float(self.pcmd.fde[-1])!r}"


def metric_report(params, samples, n_best=20, M=None):
    """Dataset metrics: most-likely, exact-rank best-of-n, and the PCMD curve."""
    curve = pcmd_dataset(params, samples, M=M)
    n_rank = min(n_best, curve.M)
    return MetricReport(
        most_likely_ade=float(curve.ade[0]),
        most_likely_fde=float(curve.fde[0]),
        best_of_n_ade=float(curve.ade[n_rank - 1]),
        best_of_n_fde=float(curve.fde[n_rank - 1]),
        best_of_n_n=n_rank,
        pcmd=curve,
        n_samples=len(samples),
    )


def write_pcmd_csv(curve, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("m,k,ade,fde\n")
        for m, a, f in zip(curve.m_values, curve.ade, curve.fde):
            fh.write(f"{int(m)},{int(m) / curve.M!r},{float(a)!r},{float(f)!r}\n")


def write_metric_report(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        for line in report.lines():
            fh.write(line + "\n")


def dump_latents(params, samples, path, chunk_rows=4096):
    """CSV of per-sample prior distributions for external latent analysis."""
    k = params.config.latent_k
    obs = np.stack([np.asarray(s.obs) for s in samples])
    with open(path, "w", encoding="utf-8") as fh:
        header = ["scene", "ped", "pattern_label"] + [f"prior_prob_{i}" for i in range(k)]
        fh.write(",".join(header) + "\n")
        chunk = max(1, chunk_rows)
        for start in range(0, len(samples), chunk):
            stop = min(len(samples), start + chunk)
            t = Tape()
            pv = load_tape_params(t, params)
            f = build_history_embedding(t, pv, params.config, obs[start:stop])
            logits = build_prior_logits(t, pv, f).value
            shifted = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(shifted)
            probs = e / e.sum(axis=1, keepdims=True)
            for i, s in enumerate(samples[start:stop]):
                label = "" if s.pattern_label is None else str(s.pattern_label)
                row = [str(s.scene_id), str(s.ped_id), label]
                row.extend(repr(float(p)) for p in probs[i])
                fh.write(",".join(row) + "\n")
