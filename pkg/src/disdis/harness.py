"""Experiment orchestration: strict JSON config, deterministic training with
adaptive-moment updates, evaluation dumps, ablation arms, and bit-exact
checkpointing. A (config, seed, data) triple fully determines every output
byte: epoch shuffles come from a counter-keyed generator, all sampling goes
through one saved-state generator, and floats are serialized with repr.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import dataio, metrics, model, objective
from .dataio import DataFormatError, TrajectorySample
from .model import ModelConfig, ModelParams
from .objective import LossConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class PersonaConfig:
    pattern_id: int
    turn_rate: float
    speed: float
    noise_sigma: float = 0.0


@dataclass(frozen=True)
class SynthConfig:
    personas: tuple[PersonaConfig, ...]
    n_per_persona: int
    eval_n_per_persona: int = 50
    seed: int = 7
    shared_prefix_len: int = 5
    shared_speed: float = 0.6


@dataclass(frozen=True)
class DataConfig:
    train_files: tuple[str, ...] = ()
    eval_files: tuple[str, ...] = ()
    labels_file: str | None = None
    eval_labels_file: str | None = None
    synth: SynthConfig | None = None
    rotation_augment: bool = False
    max_train_samples: int | None = None

    def __post_init__(self):
        if self.synth is None and not self.train_files:
            raise ConfigError("data needs either train_files or a synth block")
        if self.synth is not None and self.train_files:
            raise ConfigError("data cannot mix train_files with a synth block")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 0 and batch_size >= 2")


@dataclass(frozen=True)
class EvalConfig:
    m: int | None = None       # PCMD ranks; defaults to K
    best_of_n: int = 20
    out_dir: str = "run_out"
    checkpoint: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig
    model: ModelConfig = ModelConfig()
    loss: LossConfig = LossConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()


# -- strict config (de)serialization --------------------------------------------

_LOSS_KEYMAP = {"lambda": "lam"}  # JSON name -> attribute name
_LOSS_KEYMAP_OUT = {v: k for k, v in _LOSS_KEYMAP.items()}


def _build(cls, data, path, keymap=None):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        attr = (keymap or {}).get(key, key)
        if attr not in fields:
            raise ConfigError(f"{path}: unknown key {key!r}")
        kwargs[attr] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(doc):
    if not isinstance(doc, dict):
        raise ConfigError("config root: expected an object")
    known = {"data", "model", "loss", "train", "eval"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"config root: unknown keys {sorted(unknown)}")
    if "data" not in doc:
        raise ConfigError("config root: missing required key 'data'")
    data_doc = dict(doc["data"])
    synth = None
    if data_doc.get("synth") is not None:
        synth_doc = dict(data_doc["synth"])
        personas_doc = synth_doc.pop("personas", None)
        if not personas_doc:
            raise ConfigError("data.synth: missing personas")
        personas = tuple(_build(PersonaConfig, p, f"data.synth.personas[{i}]")
                         for i, p in enumerate(personas_doc))
        synth = _build(SynthConfig, {**synth_doc, "personas": personas}, "data.synth")
        data_doc["synth"] = synth
    for key in ("train_files", "eval_files"):
        if key in data_doc:
            data_doc[key] = tuple(data_doc[key])
    return ExperimentConfig(
        data=_build(DataConfig, data_doc, "data"),
        model=_build(ModelConfig, doc.get("model", {}), "model"),
        loss=_build(LossConfig, doc.get("loss", {}), "loss", keymap=_LOSS_KEYMAP),
        train=_build(TrainConfig, doc.get("train", {}), "train"),
        eval=_build(EvalConfig, doc.get("eval", {}), "eval"),
    )


def config_to_dict(config):
    def plain(obj):
        if dataclasses.is_dataclass(obj):
            out = {}
            for f in dataclasses.fields(obj):
                key = _LOSS_KEYMAP_OUT.get(f.name, f.name) if isinstance(obj, LossConfig) else f.name
                out[key] = plain(getattr(obj, f.name))
            return out
        if isinstance(obj, tuple):
            return [plain(v) for v in obj]
        return obj
    return plain(config)


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(doc)


# -- data resolution ---------------------------------------------------------------

def _windows_from_files(paths, labels_path):
    labels = dataio.load_labels(labels_path) if labels_path else {}
    samples = []
    for path in paths:
        scene_id = os.path.splitext(os.path.basename(path))[0]
        records = dataio.load_scene(path)
        for s in dataio.window_scene(records, scene_id=scene_id):
            if s.ped_id in labels:
                s.pattern_label = labels[s.ped_id]
            samples.append(s)
    samples.sort(key=TrajectorySample.key)
    return samples


def build_datasets(config):
    """Resolve (train_samples, eval_samples), normalized; train may be augmented."""
    dc = config.data
    if dc.synth is not None:
        personas = [dataio.SyntheticPersona(p.pattern_id, p.turn_rate, p.speed,
                                            p.noise_sigma) for p in dc.synth.personas]
        kw = dict(shared_prefix_len=dc.synth.shared_prefix_len,
                  shared_speed=dc.synth.shared_speed)
        train = dataio.synth_generate(personas, dc.synth.n_per_persona,
                                      seed=dc.synth.seed, **kw)
        eval_ = dataio.synth_generate(personas, dc.synth.eval_n_per_persona,
                                      seed=dc.synth.seed + 1, **kw)
    else:
        train = _windows_from_files(dc.train_files, dc.labels_file)
        eval_ = _windows_from_files(dc.eval_files, dc.eval_labels_file)
    train = [dataio.normalize(s) for s in train]
    eval_ = [dataio.normalize(s) for s in eval_]
    if dc.rotation_augment:
        train = [rot for s in train for rot in dataio.rotate_augment(s)]
    if dc.max_train_samples is not None:
        train = train[: dc.max_train_samples]
    return train, eval_


# -- training ------------------------------------------------------------------------

@dataclass
class TrainState:
    params: ModelParams
    adam_m: dict
    adam_v: dict
    step: int = 0
    epoch: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    history: list = field(default_factory=list)  # rows (epoch, l1, l2, l3, total)


def init_state(config):
    params = model.init_params(config.model, seed=config.train.seed)
    zeros = {name: np.zeros_like(arr) for name, arr in params.arrays.items()}
    rng = np.random.default_rng(np.random.PCG64(config.train.seed + 0x5EED))
    return TrainState(params=params, adam_m=zeros,
                      adam_v={k: v.copy() for k, v in zeros.items()}, rng=rng)


def _adam_step(state, grads, tc):
    state.step += 1
    t = state.step
    lr_t = tc.learning_rate * math.sqrt(1.0 - tc.adam_beta2 ** t) / (1.0 - tc.adam_beta1 ** t)
    for name in state.params.arrays:
        g = grads[name]
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= tc.adam_beta1
        m += (1.0 - tc.adam_beta1) * g
        v *= tc.adam_beta2
        v += (1.0 - tc.adam_beta2) * g * g
        state.params.arrays[name] -= lr_t * m / (np.sqrt(v) + tc.adam_eps)


def _epoch_permutation(seed, epoch, n):
    gen = np.random.Generator(np.random.Philox(key=seed, counter=[epoch, 0, 0, 0]))
    return gen.permutation(n)


def train(config, out_dir=None, state=None, train_samples=None):
    """Mini-batch training; returns the final state.

    Passing `state` resumes a run bit-exactly; passing `train_samples` skips
    data resolution (they must already be normalized).
    """
    if train_samples is None:
        train_samples, _ = build_datasets(config)
    if not train_samples:
        raise DataFormatError("no training samples resolved from config")
    if state is None:
        state = init_state(config)
    tc = config.train
    obs, fut = objective.stack_batch(train_samples)
    n = obs.shape[0]
    while state.epoch < tc.epochs:
        epoch = state.epoch + 1
        perm = _epoch_permutation(tc.seed, epoch, n)
        sums = np.zeros(4)
        n_batches = 0
        for start in range(0, n, tc.batch_size):
            idx = perm[start:start + tc.batch_size]
            if idx.size < 2:
                continue  # a trailing singleton cannot feed the contrastive term
            report, grads = objective.total_loss((obs[idx], fut[idx]),
                                                 state.params, config.loss,
                                                 rng=state.rng)
            if not np.isfinite(report.total):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}: {report}")
            _adam_step(state, grads, tc)
            sums += np.array(report.as_row())
            n_batches += 1
        state.epoch = epoch
        means = sums / max(n_batches, 1)
        state.history.append((epoch, *means.tolist()))
        log.info("epoch %d: l1=%.4f l2=%.4f l3=%.4f total=%.4f",
                 epoch, *means.tolist())
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_loss_history(state.history, os.path.join(out_dir, "loss_history.csv"))
        save_checkpoint(state, config, os.path.join(out_dir, "checkpoint.json"))
    return state


def write_loss_history(history, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,l1,l2,l3,total\n")
        for epoch, l1, l2, l3, total in history:
            fh.write(f"{epoch},{l1!r},{l2!r},{l3!r},{total!r}\n")


# -- checkpointing ----------------------------------------------------------------

def _hex_arrays(arrays):
    return {name: np.ascontiguousarray(a).tobytes().hex() for name, a in arrays.items()}


def _unhex_arrays(doc, like):
    return {name: np.frombuffer(bytes.fromhex(doc[name]), dtype=np.float64)
              .reshape(like[name].shape).copy() for name in like}


def save_checkpoint(state, config, path):
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "config": config_to_dict(config),
        "model": model.params_to_doc(state.params),
        "optimizer": {
            "step": state.step,
            "epoch": state.epoch,
            "m": _hex_arrays(state.adam_m),
            "v": _hex_arrays(state.adam_v),
        },
        "rng_state": state.rng.bit_generator.state,
        "loss_history": [list(row) for row in state.history],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=False)
        fh.write("\n")


def load_checkpoint(path):
    """Restore (TrainState, ExperimentConfig) bit-exactly from disk."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version "
                          f"{doc.get('format_version')!r}")
    config = config_from_dict(doc["config"])
    params = model.params_from_doc(doc["model"])
    rng = np.random.default_rng(0)
    rng.bit_generator.state = doc["rng_state"]
    state = TrainState(
        params=params,
        adam_m=_unhex_arrays(doc["optimizer"]["m"], params.arrays),
        adam_v=_unhex_arrays(doc["optimizer"]["v"], params.arrays),
        step=doc["optimizer"]["step"],
        epoch=doc["optimizer"]["epoch"],
        rng=rng,
        history=[tuple(row) for row in doc["loss_history"]],
    )
    return state, config


# -- evaluation -------------------------------------------------------------------

def evaluate(source, config, out_dir=None, eval_samples=None):
    """Exhaustive-rank evaluation of a checkpoint path, state, or params.

    Writes metrics.txt, pcmd.csv, and latents.csv when out_dir is given.
    """
    if isinstance(source, (str, os.PathLike)):
        state, ckpt_config = load_checkpoint(source)
        params = state.params
        if ckpt_config.model.latent_k != config.model.latent_k:
            raise ConfigError(
                f"checkpoint K={ckpt_config.model.latent_k} does not match "
                f"config K={config.model.latent_k}")
    elif isinstance(source, TrainState):
        params = source.params
    else:
        params = source
    if params.config != config.model:
        raise ConfigError("checkpoint model config does not match experiment config")
    if eval_samples is None:
        _, eval_samples = build_datasets(config)
    if not eval_samples:
        raise DataFormatError("no evaluation samples resolved from config")
    report = metrics.metric_report(params, eval_samples,
                                   n_best=config.eval.best_of_n, M=config.eval.m)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics.write_metric_report(report, os.path.join(out_dir, "metrics.txt"))
        metrics.write_pcmd_csv(report.pcmd, os.path.join(out_dir, "pcmd.csv"))
        metrics.dump_latents(params, eval_samples, os.path.join(out_dir, "latents.csv"))
    return report


def eval_prior_argmax(params, samples):
    """Per-sample argmax of the prior distribution (lowest index on ties)."""
    obs = np.stack([np.asarray(s.obs) for s in samples])
    probs, _ = model.enumerate_predictions(params, obs)
    return np.argmax(probs, axis=1)


# -- ablation ------------------------------------------------------------------------

ABLATION_ARMS = (
    ("disdis", {}),
    ("wo_l3", {"mu": 0.0}),
    ("wo_l2", {"lam": 0.0}),
)


def run_ablation(config, out_dir=None):
    """Train the loss-term removal arms on shared data and seed.

    Returns rows (variant, most_likely_ade, most_likely_fde) and writes
    ablation.csv when out_dir is given.
    """
    train_samples, eval_samples = build_datasets(config)
    rows = []
    for name, overrides in ABLATION_ARMS:
        arm_loss = replace(config.loss, **overrides)
        arm_config = replace(config, loss=arm_loss)
        state = train(arm_config, train_samples=train_samples)
        report = metrics.metric_report(state.params, eval_samples,
                                       n_best=config.eval.best_of_n)
        rows.append((name, report.most_likely_ade, report.most_likely_fde))
        log.info("ablation arm %s: most-likely ADE %.4f FDE %.4f",
                 name, report.most_likely_ade, report.most_likely_fde)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.csv"), "w", encoding="utf-8") as fh:
            fh.write("variant,most_likely_ade,most_likely_fde\n")
            for name, a, f in rows:
                fh.write(f"{name},{a!r},{f!r}\n")
    return rows


# -- gradient checking over the configured objective ---------------------------------

def gradcheck(config, n_samples=8, step=1e-5, tolerance=1e-5):
    """Finite-difference check of the configured objective on a small batch.

    The reconstruction term is forced to the exact enumerated estimator: the
    score-function surrogate deliberately detaches its reward weights, so its
    value is not the function whose gradient it produces.
    """
    from .autodiff import finite_diff_check

    train_samples, _ = build_datasets(config)
    batch = train_samples[:n_samples]
    if len(batch) < 2:
        raise DataFormatError("gradcheck needs at least 2 samples")
    obs, fut = objective.stack_batch(batch)
    params = model.init_params(config.model, seed=config.train.seed)
    loss_cfg = replace(config.loss, estimator="exact")
    view_angles = None
    if loss_cfg.variant == "view_contrastive":
        rng = np.random.default_rng(config.train.seed + 1)
        view_angles = rng.integers(1, 24, size=obs.shape[0]) * (2.0 * math.pi / 24.0)

    def loss_fn(arrays):
        p = ModelParams(config.model, dict(arrays))
        tape, root, _ = objective.build_loss_tape(obs, fut, p, loss_cfg,
                                                  view_angles=view_angles)
        return tape, root

    return finite_diff_check(loss_fn, params.arrays, step=step, tolerance=tolerance)
