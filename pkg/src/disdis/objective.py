"""Training objectives for the discrete-latent predictor.

The full objective combines three terms:

  L1  categorical KL between the posterior (sees history and future) and
      the prior (sees history only), computed in log-space from logits;
  L2  expected reconstruction error of the decoded future under the
      posterior, either as the exact enumerated expectation over all K
      latents or as a score-function (policy gradient) estimate through
      latent sampling;
  L3  contrastive distribution discrimination: the projected history code
      of each sample must identify its own posterior-expected latent
      embedding among the other batch members' embeddings (an InfoNCE form
      whose negative lower-bounds the history/latent mutual information).

Baseline variants reuse the same pieces: `cvae` drops L3, `vae` additionally
replaces the learned prior with a fixed uniform one, `infovae` adds a
marginal-posterior KL instead of L3, and `view_contrastive` applies the
InfoNCE term across rotated views of the same history instead of across
latent distributions.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, row_sums
from .model import (
    CategoricalDistribution, build_decode_enumerated, build_decode_indexed,
    build_future_code, build_history_embedding, build_posterior_logits,
    build_prior_logits, load_tape_params, repeat_rows_selector,
    sample_categorical,
)

VARIANTS = ("disdis", "cvae", "vae", "infovae", "view_contrastive")
ESTIMATORS = ("exact", "reinforce")
BASELINES = ("none", "batch_mean")
REWARDS = ("neg_recon", "neg_kl")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0          # weight of the reconstruction term
    mu: float = 0.1           # weight of the discrimination term
    temperature: float = 0.5
    estimator: str = "exact"
    variant: str = "disdis"
    reinforce_samples: int = 1
    baseline: str = "batch_mean"
    reward: str = "neg_recon"

    def __post_init__(self):
        if self.lam < 0 or self.mu < 0:
            raise ValueError("lam and mu must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.baseline not in BASELINES:
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.reward not in REWARDS:
            raise ValueError(f"unknown reward {self.reward!r}")
        if self.reinforce_samples < 1:
            raise ValueError("reinforce_samples must be >= 1")


@dataclass
class LossReport:
    l1_kl: float
    l2_recon: float
    l3_contrastive: float
    total: float

    def as_row(self):
        return (self.l1_kl, self.l2_recon, self.l3_contrastive, self.total)


# -- closed-form single-sample operations --------------------------------------

def kl_categorical(q, p):
    """KL(q || p) for two categorical distributions over the same K codes.

    Evaluated from logits in log-space; entries where q underflows to zero
    contribute exactly zero.
    """
    if q.k != p.k:
        raise ValueError(f"distribution sizes differ: {q.k} vs {p.k}")
    log_q = q.logits - _logsumexp(q.logits)
    log_p = p.logits - _logsumexp(p.logits)
    return float(np.sum(np.where(q.probs > 0, q.probs * (log_q - log_p), 0.0)))


def _logsumexp(v):
    m = v.max()
    return m + math.log(np.exp(v - m).sum())


def recon_nll(params, f, fut, z_index):
    """Negative decoder log-likelihood under a unit-variance position model:
    half the summed squared error over the 12 predicted positions."""
    from .model import decode
    y_hat = decode(params, f, z_index)
    return 0.5 * float(np.sum((np.asarray(fut) - y_hat) ** 2))


def _enumerated_nll(params, f, fut):
    """Reconstruction error of every latent for one sample, one decode pass."""
    t = Tape()
    pv = load_tape_params(t, params)
    k = params.config.latent_k
    f_rep = t.const(np.tile(np.asarray(f).reshape(1, -1), (k, 1)))
    z_codes = t.const(np.eye(k)) @ pv["zembed.E"]
    from .model import build_decoder
    pos = build_decoder(t, pv, params.config, f_rep, z_codes)
    target = np.asarray(fut).reshape(1, 24)
    return 0.5 * ((pos.value - target) ** 2).sum(axis=1)


def l2_exact(params, f, fut, q):
    """Exact expectation of the reconstruction error under the posterior."""
    nll = _enumerated_nll(params, f, fut)
    return float(np.dot(q.probs, nll))


def density_ratio_h(z_code, f, w, temperature=1.0):
    """Energy-based score exp(z . (W^T f) / temperature); always positive."""
    z_code = np.asarray(z_code, dtype=np.float64).reshape(-1)
    f = np.asarray(f, dtype=np.float64).reshape(-1)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (f.shape[0], z_code.shape[0]):
        raise ValueError(f"projection shape {w.shape} does not map "
                         f"embeddings ({f.shape[0]}) to codes ({z_code.shape[0]})")
    return float(np.exp(np.dot(z_code, w.T @ f) / temperature))


def l3_from_similarities(sims):
    """InfoNCE over a precomputed similarity matrix; row i's positive is (i, i)."""
    sims = np.asarray(sims, dtype=np.float64)
    n = sims.shape[0]
    if sims.shape != (n, n) or n < 2:
        raise ValueError(f"need a square similarity matrix with n >= 2, got {sims.shape}")
    shifted = sims - sims.max(axis=1, keepdims=True)
    log_den = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(log_den - np.diagonal(shifted)))


def l3_contrastive(f_batch, q_batch, params, temperature=None):
    """Distribution-discrimination loss for a batch.

    Anchors are the projected history codes W^T f_i; each positive is the
    same sample's posterior-expected latent embedding, and the other batch
    members' positives serve as negatives.
    """
    f_batch = np.asarray(f_batch, dtype=np.float64)
    q_batch = np.asarray(q_batch, dtype=np.float64)
    if f_batch.shape[0] < 2:
        raise ValueError("l3_contrastive needs a batch of at least 2 samples")
    if temperature is None:
        temperature = 1.0
    anchors = f_batch @ params.arrays["contrastive.W"]
    positives = q_batch @ params.arrays["zembed.E"]
    return l3_from_similarities(anchors @ positives.T / temperature)


# -- score-function (policy gradient) estimation --------------------------------

def score_function_gradient(probs, rewards, n_samples, rng, baseline="none",
                            n_chunks=100):
    """Monte Carlo estimate of d/d(logits) E_{z~q}[R(z)].

    Per draw the gradient is R(z) (onehot(z) - q); `batch_mean` centers the
    rewards with the mean over all draws. Returns (estimate, standard_error)
    per logit, with the standard error taken across chunk means.
    """
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    rewards = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if probs.shape != rewards.shape:
        raise ValueError("probs and rewards must have the same length")
    if baseline not in BASELINES:
        raise ValueError(f"unknown baseline {baseline!r}")
    k = probs.shape[0]
    n_chunks = min(n_chunks, n_samples)
    bounds = np.linspace(0, n_samples, n_chunks + 1).astype(int)
    draws = sample_categorical(probs, rng, size=n_samples)
    r = rewards[draws]
    if baseline == "batch_mean":
        r = r - r.mean()
    onehot = np.zeros((n_samples, k))
    onehot[np.arange(n_samples), draws] = 1.0
    per_draw = r[:, None] * (onehot - probs[None, :])
    chunk_means = np.stack([per_draw[a:b].mean(axis=0)
                            for a, b in zip(bounds[:-1], bounds[1:]) if b > a])
    estimate = per_draw.mean(axis=0)
    se = chunk_means.std(axis=0, ddof=1) / math.sqrt(chunk_means.shape[0])
    return estimate, se


def exact_expectation_logit_grad(probs, values):
    """Closed-form d/d(logits) of sum_k q_k values_k: q_k (values_k - E_q[values])."""
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    return probs * (values - np.dot(probs, values))


def l2_reinforce_grad(params, f, fut, q, n_samples, baseline, rng, reward="neg_recon"):
    """Score-function estimate of the posterior-logits gradient of L2.

    The reward of a sampled latent is the negative reconstruction error of
    its decode (`neg_recon`); the literal alternative `neg_kl` uses the
    negative per-sample KL value, which is constant across draws and hence
    carries no gradient signal in expectation. Returns (gradient, stderr).
    """
    if reward not in REWARDS:
        raise ValueError(f"unknown reward {reward!r}")
    nll = _enumerated_nll(params, f, fut)
    if reward == "neg_recon":
        rewards = -nll
    else:
        from .model import prior_dist
        p = CategoricalDistribution.from_logits(
            params.arrays["prior.b"][0] + np.asarray(f) @ params.arrays["prior.W"])
        rewards = np.full_like(nll, -kl_categorical(q, p))
    grad_of_expected_reward, se = score_function_gradient(
        q.probs, rewards, n_samples, rng, baseline=baseline)
    return -grad_of_expected_reward, se


# -- mutual-information lower bound ---------------------------------------------

@dataclass
class MiBoundReport:
    l3_value: float
    mi: float
    bound: float
    bound_holds: bool
    n_prime: int


def mi_bound_check(joint, n_prime=None):
    """Exact check that the discrimination loss lower-bounds -I(z, x) + log N'.

    `joint` is an explicit p(x, z) table. The density ratio
    h(z, x) = p(z|x)/p(z) is computed exactly, the discrimination loss is the
    exact expectation over a positive draw z ~ p(z|x) plus N'-1 iid negatives
    from p(z), and the mutual information is brute-force summation.
    """
    joint = np.asarray(joint, dtype=np.float64)
    if joint.ndim != 2:
        raise ValueError("joint must be a 2-D table over (x, z)")
    if (joint < 0).any() or abs(joint.sum() - 1.0) > 1e-9:
        raise ValueError("joint must be a normalized distribution")
    nx, nz = joint.shape
    if n_prime is None:
        n_prime = nz
    if n_prime < 2:
        raise ValueError("n_prime must be >= 2")
    if nz ** (n_prime - 1) > 2_000_000:
        raise ValueError("negative-tuple enumeration too large")

    px = joint.sum(axis=1)
    pz = joint.sum(axis=0)
    mask = joint > 0
    mi = float(np.sum(joint[mask] * np.log(joint[mask] / np.outer(px, pz)[mask])))

    # h[i, j] = p(z_j | x_i) / p(z_j); rows with px == 0 never occur
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.where(np.outer(px, pz) > 0, joint / np.outer(px, pz), 0.0)

    tuples = np.array(list(itertools.product(range(nz), repeat=n_prime - 1)), dtype=int)
    tuples = tuples.reshape(-1, n_prime - 1)
    tuple_w = pz[tuples].prod(axis=1) if n_prime > 1 else np.ones(1)

    l3 = 0.0
    for i in range(nx):
        if px[i] == 0:
            continue
        hneg = h[i][tuples].sum(axis=1) if tuples.size else np.zeros(1)
        for zp in range(nz):
            w_pos = joint[i, zp]  # = px[i] * p(zp | x_i)
            if w_pos == 0:
                continue
            hpos = h[i, zp]
            terms = -np.log(hpos / (hpos + hneg))
            l3 += w_pos * float(np.dot(tuple_w, terms))

    bound = -mi + math.log(n_prime)
    return MiBoundReport(l3_value=l3, mi=mi, bound=bound,
                         bound_holds=l3 >= bound - 1e-9, n_prime=n_prime)


# -- full objective ---------------------------------------------------------------

def stack_batch(samples):
    obs = np.stack([np.asarray(s.obs, dtype=np.float64) for s in samples])
    fut = np.stack([np.asarray(s.fut, dtype=np.float64) for s in samples])
    return obs, fut


def _rotate_batch(obs, angles):
    cos, sin = np.cos(angles), np.sin(angles)
    rot = np.stack([np.stack([cos, -sin], axis=-1),
                    np.stack([sin, cos], axis=-1)], axis=-2)  # (N, 2, 2)
    return np.einsum("ntj,nkj->ntk", obs, rot)


def build_loss_tape(obs, fut, params, config, z_draws=None, view_angles=None):
    """Construct the full objective for one batch on a fresh tape.

    Returns (tape, root, report). With the reinforce estimator the root
    includes the score-function surrogate (whose gradient, not value, is
    meaningful), while the report always carries the plain term estimates.
    `z_draws` (N, reinforce_samples) and `view_angles` (N,) make stochastic
    variants reproducible; they are required when the variant needs them
    and no generator is supplied upstream.
    """
    n = obs.shape[0]
    if n < 1:
        raise ValueError("empty batch")
    if n < 2 and config.mu > 0.0 and config.variant in ("disdis", "view_contrastive"):
        raise ValueError("contrastive terms need a batch of at least 2 samples")
    k = params.config.latent_k
    mcfg = params.config
    t = Tape()
    pv = load_tape_params(t, params)

    f = build_history_embedding(t, pv, mcfg, obs)
    g = build_future_code(t, pv, mcfg, fut)
    prior_logits = build_prior_logits(t, pv, f)
    post_logits = build_posterior_logits(t, pv, f, g)
    q = t.softmax_rows(post_logits)
    log_q = t.log_softmax_rows(post_logits)

    # L1: posterior-prior consistency (or fixed uniform prior for `vae`)
    if config.variant == "vae":
        kl_rows = row_sums(t.mul(q, log_q)) + t.const([[math.log(k)]])
    else:
        log_p = t.log_softmax_rows(prior_logits)
        kl_rows = row_sums(t.mul(q, t.sub(log_q, log_p)))
    l1 = t.mean(kl_rows)

    # L2: reconstruction under the posterior
    score_surrogate = None
    if config.lam == 0.0:
        l2 = None
    elif config.estimator == "exact":
        pos = build_decode_enumerated(t, pv, mcfg, f)
        fut_rep = t.const(np.repeat(fut.reshape(n, 24), k, axis=0))
        nll = t.scale(row_sums(t.square(t.sub(pos, fut_rep))), 0.5)
        q_flat = t.reshape(q, n * k, 1)
        l2 = t.scale(t.sum(t.mul(q_flat, nll)), 1.0 / n)
    else:
        if z_draws is None:
            raise ValueError("reinforce estimator needs z_draws")
        z_draws = np.asarray(z_draws, dtype=int)
        n_draws = z_draws.shape[1]
        flat_z = z_draws.reshape(-1)
        f_rep = t.const(repeat_rows_selector(n, n_draws)) @ f
        pos = build_decode_indexed(t, pv, mcfg, f_rep, flat_z)
        fut_rep = t.const(np.repeat(fut.reshape(n, 24), n_draws, axis=0))
        nll = t.scale(row_sums(t.square(t.sub(pos, fut_rep))), 0.5)
        l2 = t.scale(t.sum(nll), 1.0 / (n * n_draws))
        nll_values = nll.value[:, 0]
        if config.reward == "neg_recon":
            rewards = -nll_values
        else:
            # constant across draws, so carries no signal in expectation
            rewards = -np.repeat(kl_rows.value[:, 0], n_draws)
        center = rewards.mean() if config.baseline == "batch_mean" else 0.0
        weights = np.zeros((n, k))
        np.add.at(weights, (np.repeat(np.arange(n), n_draws), flat_z),
                  -(rewards - center) / (n * n_draws))
        score_surrogate = t.sum(t.mul(log_q, t.const(weights)))

    # L3 / variant-specific third term
    l3 = None
    if config.mu > 0.0:
        if config.variant == "disdis":
            anchors = f @ pv["contrastive.W"]
            positives = q @ pv["zembed.E"]
            sims = t.scale(anchors @ positives.T, 1.0 / config.temperature)
            picked = t.mul(t.log_softmax_rows(sims), t.const(np.eye(n)))
            l3 = t.scale(t.sum(picked), -1.0 / n)
        elif config.variant == "infovae":
            qbar = t.scale(t.const(np.ones((1, n))) @ q, 1.0 / n)
            safe_log = t.log(qbar + t.const(np.full((1, k), 1e-300)))
            l3 = row_sums(t.mul(qbar, safe_log)) + t.const([[math.log(k)]])
        elif config.variant == "view_contrastive":
            if view_angles is None:
                raise ValueError("view_contrastive variant needs view_angles")
            f_rot = build_history_embedding(t, pv, mcfg, _rotate_batch(obs, view_angles))
            anchors = f @ pv["contrastive.W"]
            positives = f_rot @ pv["contrastive.W"]
            sims = t.scale(anchors @ positives.T, 1.0 / config.temperature)
            picked = t.mul(t.log_softmax_rows(sims), t.const(np.eye(n)))
            l3 = t.scale(t.sum(picked), -1.0 / n)
        # cvae and vae carry no third term

    l1_v = l1.item()
    l2_v = l2.item() if l2 is not None else 0.0
    l3_v = l3.item() if l3 is not None else 0.0
    report = LossReport(l1_kl=l1_v, l2_recon=l2_v, l3_contrastive=l3_v,
                        total=l1_v + config.lam * l2_v + config.mu * l3_v)

    root = l1
    if l2 is not None:
        grad_l2 = l2 if score_surrogate is None else l2 + score_surrogate
        root = root + t.scale(grad_l2, config.lam)
    if l3 is not None:
        root = root + t.scale(l3, config.mu)
    return t, root, report


def total_loss(batch, params, config, rng=None):
    """LossReport and parameter gradients for a batch of normalized samples."""
    obs, fut = stack_batch(batch) if not isinstance(batch, tuple) else batch
    z_draws = None
    view_angles = None
    if config.estimator == "reinforce" and config.lam > 0.0:
        if rng is None:
            raise ValueError("reinforce estimator needs an rng")
        # draw from the current posterior, which requires a first forward pass
        probe = Tape()
        ppv = load_tape_params(probe, params)
        pf = build_history_embedding(probe, ppv, params.config, obs)
        pg = build_future_code(probe, ppv, params.config, fut)
        logits = build_posterior_logits(probe, ppv, pf, pg).value
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        z_draws = np.stack([sample_categorical(row, rng, size=config.reinforce_samples)
                            for row in probs])
    if config.variant == "view_contrastive" and config.mu > 0.0:
        if rng is None:
            raise ValueError("view_contrastive variant needs an rng")
        view_angles = rng.integers(1, 24, size=obs.shape[0]) * (2.0 * math.pi / 24.0)
    tape, root, report = build_loss_tape(obs, fut, params, config,
                                         z_draws=z_draws, view_angles=view_angles)
    return report, tape.gradients(root)
