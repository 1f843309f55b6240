"""``hemofed`` command-line entry point.

Subcommands::

    gen-data       write the synthetic volumes and a manifest to <out>/data
    partition      write the Dirichlet client split of the training samples
    train-central  single-worker training, reports and final checkpoint in <out>/central
    train-fed      federated training, reports and final checkpoint in <out>/federated
    evaluate       score a checkpoint on the held-out split, print a report line
    gradcheck      finite-difference check of the model gradients

Every subcommand takes ``--config FILE`` (JSON, see :mod:`hemofed.config`),
repeated ``--set dotted.key=value`` overrides and ``--out DIR``. The resolved
config is written to ``<out>/config.json``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 I/O or file
format error, 3 numeric failure (gradient check over threshold, non-finite
loss, unrecoverable secure sum).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path
from typing import Sequence

from .autodiff import gradient_check
from .config import RunConfig, load_config
from .data import VolumeSample, generate_dataset, load_volume, partition_dirichlet, save_volume
from .errors import FormatError, HemofedError, ProtocolError
from .fed import FederatedRun, run_centralized, run_federated
from .metrics import (
    CheckpointMeta,
    RoundReport,
    append_report,
    evaluate,
    load_checkpoint,
    save_checkpoint,
)
from .model import LABELS, batch_loss_builder, build_model, parameter_count

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_THRESHOLD = 1e-4
MANIFEST = "manifest.csv"


class NumericFailure(HemofedError):
    pass


class _StageError(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage, self.cause = stage, cause


class _Stage:
    """Context manager tagging any failure with the pipeline stage name."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, _StageError):
            raise _StageError(self.name, exc) from exc
        return False


# dataset handling

def _split(rc: RunConfig, samples: list[VolumeSample]) -> tuple[list[VolumeSample], list[VolumeSample]]:
    return samples[:rc.n_train], samples[rc.n_train:]


def _load_manifest(data_dir: Path) -> tuple[list[VolumeSample], list[VolumeSample]]:
    path = data_dir / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in data directory {data_dir}")
    train, held = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            sample = load_volume(data_dir / row["file"])
            (held if row["split"] == "eval" else train).append(sample)
    if not held:
        raise FileNotFoundError(f"data directory {data_dir} has no held-out volumes")
    return train, held


def load_splits(rc: RunConfig) -> tuple[list[VolumeSample], list[VolumeSample]]:
    if rc.data_dir is not None:
        return _load_manifest(rc.data_dir)
    return _split(rc, generate_dataset(rc.n, rc.model, rc.data_seed))


# output helpers

def _prepare_out(rc: RunConfig, sub: str | None = None) -> Path:
    rc.output_dir.mkdir(parents=True, exist_ok=True)
    (rc.output_dir / "config.json").write_text(rc.to_json())
    target = rc.output_dir / sub if sub else rc.output_dir
    target.mkdir(parents=True, exist_ok=True)
    return target


def _write_run(run: FederatedRun, rc: RunConfig, target: Path) -> None:
    reports = target / "reports.jsonl"
    reports.write_text("")
    for report in run.reports:
        append_report(report, reports)
    meta = CheckpointMeta(rc.model.config_hash(), len(run.reports), parameter_count(run.params),
                          rc.sim.seed)
    save_checkpoint(run.params, meta, target / "model.fsck")
    bad = [r.round_index for r in run.reports if r.train_loss is not None and not math.isfinite(r.train_loss)]
    if bad:
        raise NumericFailure(f"non-finite training loss in rounds {bad}")


# subcommands

def cmd_gen_data(rc: RunConfig) -> int:
    with _Stage("generate"):
        samples = generate_dataset(rc.n, rc.model, rc.data_seed)
    with _Stage("write"):
        target = _prepare_out(rc, "data")
        with open(target / MANIFEST, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["file", "split", *LABELS])
            for i, sample in enumerate(samples):
                name = f"vol_{i:05d}.fscn"
                save_volume(sample, target / name)
                split = "train" if i < rc.n_train else "eval"
                writer.writerow([name, split, *(int(v) for v in sample.volume_labels)])
    print(f"wrote {rc.n} volumes ({rc.n_train} train, {rc.n_eval} eval) to {target}")
    return EXIT_OK


def _shards(rc: RunConfig, train: list[VolumeSample]) -> list[list[int]]:
    return partition_dirichlet(train, rc.partition)


def cmd_partition(rc: RunConfig) -> int:
    with _Stage("load data"):
        train, _ = load_splits(rc)
    with _Stage("partition"):
        shards = _shards(rc, train)
    with _Stage("write"):
        target = _prepare_out(rc)
        record = {"num_clients": rc.partition.num_clients, "alpha": rc.partition.alpha,
                  "seed": rc.partition.seed, "shards": shards}
        (target / "partition.json").write_text(json.dumps(record) + "\n")
    print("client sizes:", [len(s) for s in shards])
    return EXIT_OK


def cmd_train_central(rc: RunConfig) -> int:
    with _Stage("load data"):
        train, held = load_splits(rc)
    with _Stage("train-central"):
        run = run_centralized(rc.sim, train, range(len(train)), held, build_model(rc.model, rc.sim.seed))
    with _Stage("write"):
        _write_run(run, rc, _prepare_out(rc, "central"))
    last = run.reports[-1]
    print(f"round {last.round_index}: loss {last.train_loss:.6f} accuracy {last.accuracy:.4f}")
    return EXIT_OK


def cmd_train_fed(rc: RunConfig) -> int:
    with _Stage("load data"):
        train, held = load_splits(rc)
    with _Stage("partition"):
        shards = _shards(rc, train)
    with _Stage("train-fed"):
        run = run_federated(rc.sim, train, shards, held, build_model(rc.model, rc.sim.seed))
    with _Stage("write"):
        _write_run(run, rc, _prepare_out(rc, "federated"))
    last = run.reports[-1]
    print(f"round {last.round_index}: clients {last.selected} accuracy {last.accuracy:.4f}")
    return EXIT_OK


def cmd_evaluate(rc: RunConfig, checkpoint: Path) -> int:
    with _Stage("load checkpoint"):
        params, meta = load_checkpoint(checkpoint, rc.model.config_hash())
    with _Stage("load data"):
        _, held = load_splits(rc)
    with _Stage("evaluate"):
        ev = evaluate(params, held, rc.model)
    report = RoundReport(round_index=meta.round_index, selected=[], train_loss=None,
                         accuracy=ev.accuracy, ap=ev.ap, mean_ap=ev.mean_ap,
                         ap_undefined=ev.ap_undefined, uplink_bytes=0, downlink_bytes=0)
    for name, ap in zip(LABELS, ev.ap):
        print(f"{name:>17s} AP {'undefined' if ap is None else f'{ap:.4f}'}", file=sys.stderr)
    print(f"accuracy {ev.accuracy:.4f} mean AP {ev.mean_ap}", file=sys.stderr)
    print(report.to_line())
    return EXIT_OK


def cmd_gradcheck(rc: RunConfig, corrupt: bool = False) -> int:
    with _Stage("gradcheck"):
        params = build_model(rc.model, rc.sim.seed)
        batch = generate_dataset(2, rc.model, rc.data_seed)
        hook = None
        if corrupt:
            def hook(grads):
                return {name: g * 1.01 for name, g in grads.items()}
        err = gradient_check(batch_loss_builder(batch, rc.model), params, 1e-5, seed=rc.sim.seed,
                             grad_hook=hook)
    print(f"max relative error: {err:.3e}")
    if not err < GRADCHECK_THRESHOLD:
        print(f"gradcheck failed: {err:.3e} >= {GRADCHECK_THRESHOLD:g}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hemofed", description=__doc__.split("\n\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config (defaults used when omitted)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key by dotted path, e.g. federation.lr=0.5")
    common.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write synthetic volumes and manifest")
    sub.add_parser("partition", parents=[common], help="write the client partition")
    sub.add_parser("train-central", parents=[common], help="centralized training")
    sub.add_parser("train-fed", parents=[common], help="federated training")
    ev = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--data-dir", type=Path, help="volume directory (overrides data.dir)")
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    gc.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (OSError, FormatError)):
        return EXIT_IO
    if isinstance(exc, (ProtocolError, NumericFailure, FloatingPointError, ArithmeticError)):
        return EXIT_NUMERIC
    return EXIT_CONFIG


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if args.out is not None:
        overrides.append("output_dir=" + json.dumps(str(args.out)))
    if getattr(args, "data_dir", None) is not None:
        overrides.append("data.dir=" + json.dumps(str(args.data_dir)))
    try:
        rc = load_config(args.config, overrides)
    except OSError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return EXIT_IO
    except (HemofedError, ValueError) as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    commands = {
        "gen-data": lambda: cmd_gen_data(rc),
        "partition": lambda: cmd_partition(rc),
        "train-central": lambda: cmd_train_central(rc),
        "train-fed": lambda: cmd_train_fed(rc),
        "evaluate": lambda: cmd_evaluate(rc, args.checkpoint),
        "gradcheck": lambda: cmd_gradcheck(rc, args.corrupt_gradient),
    }
    try:
        return commands[args.command]()
    except _StageError as exc:
        print(f"error [{exc.stage}]: {exc.cause}", file=sys.stderr)
        return _exit_code(exc.cause)


if __name__ == "__main__":
    sys.exit(main())
