"""Command-line entry point.

Subcommands: train, eval, pcmd, synth, ablate, gradcheck. Every command
takes --config (JSON experiment file); --seed overrides the configured
seeds and --out redirects the output directory. Exit codes: 0 success,
2 configuration error, 3 data error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from . import dataio, harness

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _apply_overrides(config, args):
    if args.seed is not None:
        config = dataclasses.replace(
            config, train=dataclasses.replace(config.train, seed=args.seed))
        if config.data.synth is not None:
            synth = dataclasses.replace(config.data.synth, seed=args.seed)
            config = dataclasses.replace(
                config, data=dataclasses.replace(config.data, synth=synth))
    if args.out is not None:
        config = dataclasses.replace(
            config, eval=dataclasses.replace(config.eval, out_dir=args.out))
    return config


def _checkpoint_path(config, out_dir):
    return config.eval.checkpoint or os.path.join(out_dir, "checkpoint.json")


def cmd_train(config, out_dir):
    state = harness.train(config, out_dir=out_dir)
    print(f"trained {state.epoch} epochs, {state.step} steps; "
          f"outputs in {out_dir}")
    return EXIT_OK


def cmd_eval(config, out_dir):
    report = harness.evaluate(_checkpoint_path(config, out_dir), config, out_dir=out_dir)
    print(f"most_likely_ade={report.most_likely_ade!r} "
          f"most_likely_fde={report.most_likely_fde!r} "
          f"best_of_{report.best_of_n_n}_ade={report.best_of_n_ade!r}")
    return EXIT_OK


def cmd_pcmd(config, out_dir):
    from .metrics import metric_report, write_pcmd_csv

    state, ckpt_config = harness.load_checkpoint(_checkpoint_path(config, out_dir))
    if ckpt_config.model.latent_k != config.model.latent_k:
        raise harness.ConfigError("checkpoint/config latent size mismatch")
    _, eval_samples = harness.build_datasets(config)
    if not eval_samples:
        raise dataio.DataFormatError("no evaluation samples resolved from config")
    report = metric_report(state.params, eval_samples, n_best=config.eval.best_of_n,
                           M=config.eval.m)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "pcmd.csv")
    write_pcmd_csv(report.pcmd, path)
    print(f"wrote {path} ({report.pcmd.M} ranks over {report.n_samples} samples)")
    return EXIT_OK


def cmd_synth(config, out_dir):
    if config.data.synth is None:
        raise harness.ConfigError("synth command needs a data.synth block")
    train_samples, eval_samples = harness.build_datasets(config)
    os.makedirs(out_dir, exist_ok=True)
    denorm = [dataio.denormalize(s) for s in train_samples]
    dataio.dump_scene(denorm, os.path.join(out_dir, "synth_scene.txt"),
                      os.path.join(out_dir, "synth_labels.txt"))
    denorm_eval = [dataio.denormalize(s) for s in eval_samples]
    dataio.dump_scene(denorm_eval, os.path.join(out_dir, "synth_scene_eval.txt"),
                      os.path.join(out_dir, "synth_labels_eval.txt"))
    print(f"wrote {len(denorm)} train and {len(denorm_eval)} eval trajectories to {out_dir}")
    return EXIT_OK


def cmd_ablate(config, out_dir):
    rows = harness.run_ablation(config, out_dir=out_dir)
    for name, a, f in rows:
        print(f"{name}: most_likely_ade={a!r} most_likely_fde={f!r}")
    return EXIT_OK


def cmd_gradcheck(config, out_dir):
    report = harness.gradcheck(config)
    print(str(report))
    return EXIT_OK if report.passed else 1


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "pcmd": cmd_pcmd,
    "synth": cmd_synth,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="disdis",
        description="Discrete-latent trajectory prediction with distribution "
                    "discrimination.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--seed", type=int, default=None, help="override seeds")
        p.add_argument("--out", default=None, help="override output directory")
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = harness.load_config(args.config)
    except (harness.ConfigError, FileNotFoundError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        config = _apply_overrides(config, args)
        return COMMANDS[args.command](config, config.eval.out_dir)
    except harness.ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (dataio.DataFormatError, FileNotFoundError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except harness.DivergenceError as exc:
        print(f"error: divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
