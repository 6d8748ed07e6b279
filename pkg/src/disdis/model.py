"""Discrete-latent trajectory predictor.

A shared gated recurrent encoder turns the 8 observed displacement steps
into an embedding f. A prior head maps f to logits over K discrete latent
codes; a posterior head sees f plus a recurrent encoding of the 12 future
steps. The decoder is deterministic: a latent code's learned embedding and
f initialize a recurrent cell that emits 12 displacement steps, cumulatively
summed from the origin. All stochasticity lives in the latent choice, which
makes complete enumeration over the K codes cheap and exact.

Everything is built on the autodiff tape so the same forward code serves
training, evaluation, and gradient checking.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, row_sums

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    latent_k: int = 80
    embed_dim: int = 64       # history embedding f
    future_dim: int = 32      # posterior-side future code g
    code_dim: int = 32        # latent embedding / contrastive code size
    encoder_hidden: int = 64
    decoder_hidden: int = 64

    def __post_init__(self):
        for name in ("latent_k", "embed_dim", "future_dim", "code_dim",
                     "encoder_hidden", "decoder_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class CategoricalDistribution:
    """K-way latent distribution; probs are the softmax of the logits."""

    logits: np.ndarray
    probs: np.ndarray

    @classmethod
    def from_logits(cls, logits):
        logits = np.asarray(logits, dtype=np.float64).reshape(-1)
        shifted = logits - logits.max()
        e = np.exp(shifted)
        return cls(logits=logits, probs=e / e.sum())

    @property
    def k(self):
        return self.logits.shape[0]

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64).reshape(-1)
        self.probs = np.asarray(self.probs, dtype=np.float64).reshape(-1)
        if self.logits.shape != self.probs.shape:
            raise ValueError("logits and probs must have the same length")
        if abs(self.probs.sum() - 1.0) > 1e-9 or (self.probs < 0).any():
            raise ValueError("probs must be a distribution (nonnegative, sum 1)")


@dataclass
class ModelParams:
    """Named parameter arrays plus the hyperparameters that shape them."""

    config: ModelConfig
    arrays: dict[str, np.ndarray]

    def n_parameters(self):
        return sum(a.size for a in self.arrays.values())

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


def _gru_shapes(prefix, in_dim, hidden):
    shapes = {}
    for gate in ("z", "r", "h"):
        shapes[f"{prefix}.W{gate}"] = (in_dim, hidden)
        shapes[f"{prefix}.U{gate}"] = (hidden, hidden)
        shapes[f"{prefix}.b{gate}"] = (1, hidden)
    return shapes


def parameter_shapes(config):
    c = config
    shapes = {}
    shapes.update(_gru_shapes("enc", 2, c.encoder_hidden))
    shapes["enc_out.W"] = (c.encoder_hidden, c.embed_dim)
    shapes["enc_out.b"] = (1, c.embed_dim)
    shapes.update(_gru_shapes("futenc", 2, c.encoder_hidden))
    shapes["futenc_out.W"] = (c.encoder_hidden, c.future_dim)
    shapes["futenc_out.b"] = (1, c.future_dim)
    shapes["prior.W"] = (c.embed_dim, c.latent_k)
    shapes["prior.b"] = (1, c.latent_k)
    shapes["post.W"] = (c.embed_dim + c.future_dim, c.latent_k)
    shapes["post.b"] = (1, c.latent_k)
    shapes["zembed.E"] = (c.latent_k, c.code_dim)
    shapes["dec_init.W"] = (c.embed_dim + c.code_dim, c.decoder_hidden)
    shapes["dec_init.b"] = (1, c.decoder_hidden)
    shapes.update(_gru_shapes("dec", 2, c.decoder_hidden))
    shapes["dec_out.W"] = (c.decoder_hidden, 2)
    shapes["dec_out.b"] = (1, 2)
    shapes["contrastive.W"] = (c.embed_dim, c.code_dim)
    return shapes


def init_params(config, seed=0):
    """Fan-in scaled normal init for weights, zeros for biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".b") or name.startswith(("enc.b", "futenc.b", "dec.b")):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    params = ModelParams(config, arrays)
    log.info("initialized model: %d parameters, K=%d", params.n_parameters(), config.latent_k)
    return params


def load_tape_params(tape, params):
    """Register every parameter array as a named tape leaf."""
    return {name: tape.param(name, arr) for name, arr in params.arrays.items()}


# -- tape builders (batched; rows are samples) --------------------------------

def _gru_rollout(t, pv, prefix, steps, n_rows, hidden):
    h = t.const(np.zeros((n_rows, hidden)))
    one = t.const(np.ones((1, hidden)))
    for x in steps:
        z = t.sigmoid(x @ pv[f"{prefix}.Wz"] + h @ pv[f"{prefix}.Uz"] + pv[f"{prefix}.bz"])
        r = t.sigmoid(x @ pv[f"{prefix}.Wr"] + h @ pv[f"{prefix}.Ur"] + pv[f"{prefix}.br"])
        cand = t.tanh(x @ pv[f"{prefix}.Wh"] + (r * h) @ pv[f"{prefix}.Uh"] + pv[f"{prefix}.bh"])
        h = z * h + (one - z) * cand
    return h


def _displacements(positions, lead_from_origin):
    """Per-step displacement inputs for a (N, T, 2) position block."""
    if lead_from_origin:
        first = positions[:, 0, :]
    else:
        first = np.zeros_like(positions[:, 0, :])
    rest = positions[:, 1:, :] - positions[:, :-1, :]
    return [first] + [rest[:, i, :] for i in range(rest.shape[1])]


def build_history_embedding(t, pv, config, obs_batch):
    """Embedding f for a batch of normalized observation windows (N, 8, 2)."""
    steps = [t.const(d) for d in _displacements(obs_batch, lead_from_origin=False)]
    h = _gru_rollout(t, pv, "enc", steps, obs_batch.shape[0], config.encoder_hidden)
    return t.tanh(h @ pv["enc_out.W"] + pv["enc_out.b"])


def build_future_code(t, pv, config, fut_batch):
    """Posterior-side code g for a batch of normalized futures (N, 12, 2).

    The first displacement runs from the origin (the last observed point)
    to the first future point, so all 12 future steps are seen.
    """
    steps = [t.const(d) for d in _displacements(fut_batch, lead_from_origin=True)]
    h = _gru_rollout(t, pv, "futenc", steps, fut_batch.shape[0], config.encoder_hidden)
    return t.tanh(h @ pv["futenc_out.W"] + pv["futenc_out.b"])


def build_prior_logits(t, pv, f):
    return f @ pv["prior.W"] + pv["prior.b"]


def build_posterior_logits(t, pv, f, g):
    return t.concat_cols(f, g) @ pv["post.W"] + pv["post.b"]


def build_decoder(t, pv, config, f, z_codes):
    """Deterministic 12-step rollout; returns positions (rows, 24).

    `f` and `z_codes` must have the same number of rows; each row decodes one
    (history, latent) pair. The cell input is the previously emitted
    displacement, starting from zero, and positions are the running sum of
    displacements from the origin.
    """
    n_rows = f.shape[0]
    h = t.tanh(t.concat_cols(f, z_codes) @ pv["dec_init.W"] + pv["dec_init.b"])
    one = t.const(np.ones((1, config.decoder_hidden)))
    disp = t.const(np.zeros((n_rows, 2)))
    pos = t.const(np.zeros((n_rows, 2)))
    columns = None
    for _ in range(12):
        z = t.sigmoid(disp @ pv["dec.Wz"] + h @ pv["dec.Uz"] + pv["dec.bz"])
        r = t.sigmoid(disp @ pv["dec.Wr"] + h @ pv["dec.Ur"] + pv["dec.br"])
        cand = t.tanh(disp @ pv["dec.Wh"] + (r * h) @ pv["dec.Uh"] + pv["dec.bh"])
        h = z * h + (one - z) * cand
        disp = h @ pv["dec_out.W"] + pv["dec_out.b"]
        pos = pos + disp
        columns = pos if columns is None else t.concat_cols(columns, pos)
    return columns


def repeat_rows_selector(n, k):
    """Constant (n*k, n) matrix: row i*k+j selects source row i."""
    sel = np.zeros((n * k, n))
    sel[np.arange(n * k), np.repeat(np.arange(n), k)] = 1.0
    return sel


def tile_eye_selector(n, k):
    """Constant (n*k, k) matrix: row i*k+j selects latent j."""
    return np.tile(np.eye(k), (n, 1))


def build_decode_enumerated(t, pv, config, f):
    """Decode every latent for every row of f; returns positions (N*K, 24).

    Row ordering is sample-major: sample i occupies rows i*K .. i*K+K-1.
    """
    n = f.shape[0]
    k = config.latent_k
    f_rep = t.const(repeat_rows_selector(n, k)) @ f
    z_codes = t.const(tile_eye_selector(n, k)) @ pv["zembed.E"]
    return build_decoder(t, pv, config, f_rep, z_codes)


def build_decode_indexed(t, pv, config, f, z_indices):
    """Decode one chosen latent per row of f; returns positions (N, 24)."""
    k = config.latent_k
    onehot = np.zeros((len(z_indices), k))
    onehot[np.arange(len(z_indices)), z_indices] = 1.0
    z_codes = t.const(onehot) @ pv["zembed.E"]
    return build_decoder(t, pv, config, f, z_codes)


# -- public single-sample operations ------------------------------------------

def _as_obs(obs):
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (8, 2):
        raise ValueError(f"obs must be (8, 2), got {obs.shape}")
    return obs


def _as_fut(fut):
    fut = np.asarray(fut, dtype=np.float64)
    if fut.shape != (12, 2):
        raise ValueError(f"fut must be (12, 2), got {fut.shape}")
    return fut


def embed_history(params, obs):
    """Deterministic history embedding f for one normalized sample."""
    t = Tape()
    pv = load_tape_params(t, params)
    f = build_history_embedding(t, pv, params.config, _as_obs(obs)[None])
    return f.value[0].copy()


def prior_dist(params, f):
    t = Tape()
    pv = load_tape_params(t, params)
    logits = build_prior_logits(t, pv, t.const(np.asarray(f)))
    return CategoricalDistribution.from_logits(logits.value[0])


def posterior_dist(params, f, fut):
    t = Tape()
    pv = load_tape_params(t, params)
    g = build_future_code(t, pv, params.config, _as_fut(fut)[None])
    logits = build_posterior_logits(t, pv, t.const(np.asarray(f)), g)
    return CategoricalDistribution.from_logits(logits.value[0])


def decode(params, f, z_index):
    """Deterministic 12-step prediction for one latent code."""
    k = params.config.latent_k
    if not 0 <= int(z_index) < k:
        raise ValueError(f"z_index {z_index} out of range [0, {k})")
    t = Tape()
    pv = load_tape_params(t, params)
    pos = build_decode_indexed(t, pv, params.config, t.const(np.asarray(f)), [int(z_index)])
    return pos.value[0].reshape(12, 2).copy()


def most_likely_predict(params, obs):
    """Decode the highest-probability prior latent; ties go to the lowest index."""
    f = embed_history(params, obs)
    dist = prior_dist(params, f)
    return decode(params, f, int(np.argmax(dist.probs)))


def sample_categorical(probs, rng, size=None):
    """Inverse-CDF sampling; deterministic given the generator state."""
    cum = np.cumsum(probs)
    cum[-1] = max(cum[-1], 1.0)
    if size is None:
        return int(np.searchsorted(cum, rng.random(), side="right"))
    return np.searchsorted(cum, rng.random(size), side="right").astype(np.int64)


def sample_z(dist, rng):
    return sample_categorical(dist.probs, rng)


def enumerate_predictions(params, obs_batch, chunk_rows=4096):
    """Prior probs and all-K decoded trajectories for a batch of histories.

    Returns (probs (N, K), trajectories (N, K, 12, 2)). Forward-only; used
    by metrics and evaluation where every latent must be visited.
    """
    obs_batch = np.asarray(obs_batch, dtype=np.float64)
    n = obs_batch.shape[0]
    k = params.config.latent_k
    chunk = max(1, chunk_rows // k)
    probs = np.empty((n, k))
    trajs = np.empty((n, k, 12, 2))
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        t = Tape()
        pv = load_tape_params(t, params)
        f = build_history_embedding(t, pv, params.config, obs_batch[start:stop])
        logits = build_prior_logits(t, pv, f)
        pos = build_decode_enumerated(t, pv, params.config, f)
        shifted = logits.value - logits.value.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs[start:stop] = e / e.sum(axis=1, keepdims=True)
        trajs[start:stop] = pos.value.reshape(stop - start, k, 12, 2)
    return probs, trajs


# -- checkpoint serialization --------------------------------------------------

CHECKPOINT_VERSION = 1


def params_to_doc(params):
    """JSON-ready document with explicit shapes and bit-exact hex payloads."""
    doc = {"config": {
        "latent_k": params.config.latent_k,
        "embed_dim": params.config.embed_dim,
        "future_dim": params.config.future_dim,
        "code_dim": params.config.code_dim,
        "encoder_hidden": params.config.encoder_hidden,
        "decoder_hidden": params.config.decoder_hidden,
    }, "arrays": {}}
    for name, arr in params.arrays.items():
        doc["arrays"][name] = {
            "shape": list(arr.shape),
            "dtype": "float64",
            "hex": np.ascontiguousarray(arr).tobytes().hex(),
        }
    return doc


def params_from_doc(doc):
    config = ModelConfig(**doc["config"])
    expected = parameter_shapes(config)
    arrays = {}
    for name, shape in expected.items():
        if name not in doc["arrays"]:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        entry = doc["arrays"][name]
        if list(entry["shape"]) != list(shape):
            raise ValueError(f"checkpoint parameter {name!r} has shape "
                             f"{entry['shape']}, expected {list(shape)}")
        arr = np.frombuffer(bytes.fromhex(entry["hex"]), dtype=np.float64)
        arrays[name] = arr.reshape(shape).copy()
    return ModelParams(config, arrays)
