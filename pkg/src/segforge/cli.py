"""Command-line front end: synthesize, fingerprint, train, fine-tune, evaluate, compare.

Every command that writes outputs also writes ``run_manifest.json`` with the
resolved configuration, input checksums, seed and tool version.  Exit codes:
0 success, 2 usage/configuration, 3 data/format, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .artifact import load_artifact, save_artifact
from .data import compute_fingerprint, list_bundles, load_bundle, split_dataset
from .errors import ConfigurationError, DataError, DimensionError, NumericError, UsageError
from .lora import LoraConfig
from .metrics import emit_report, evaluate
from .net import MemoryBudget, build_unet, plan_dynunet
from .phantom import PhantomSpec, write_dataset
from .train import FreezePolicy, MetricsRecord, TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MEM_ENV = "FORGE_MEM_BUDGET"
DEFAULT_MEM_BUDGET = 2e8
MANIFEST_NAME = "run_manifest.json"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """What a run did and with which inputs; timestamps are dropped in deterministic mode."""

    command: str
    config: dict
    inputs: dict = field(default_factory=dict)  # path -> sha256
    seed: Optional[int] = None
    version: str = __version__
    started: Optional[str] = None
    finished: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def add_inputs(self, paths: Sequence) -> None:
        for p in paths:
            self.inputs[Path(p).name if Path(p).is_file() else str(p)] = file_sha256(p)

    def to_dict(self) -> dict:
        return {"command": self.command, "config": self.config, "inputs": self.inputs, "seed": self.seed,
                "version": self.version, "started": self.started, "finished": self.finished, **self.extra}

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def _manifest(command: str, config: dict, seed, deterministic: bool) -> RunManifest:
    return RunManifest(command, config, seed=seed, started=None if deterministic else _now())


def _finish(manifest: RunManifest, path, deterministic: bool) -> None:
    manifest.finished = None if deterministic else _now()
    manifest.write(path)


def _read_json(path, what: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read {what} {path}: {exc.strerror}") from exc
    except ValueError as exc:
        raise ConfigurationError(f"{what} {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"{what} {path} must hold a JSON object")
    return data


def _load_dir(directory):
    """All bundles in ``directory`` (sorted by name) and their paths."""
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"data directory {d} does not exist")
    paths = list_bundles(d)
    if not paths:
        raise UsageError(f"no *.bundle files in {d}")
    return [load_bundle(p) for p in paths], paths


def _mem_budget(flag: Optional[float]) -> float:
    env = os.environ.get(MEM_ENV)
    if env:
        try:
            return float(env)
        except ValueError as exc:
            raise ConfigurationError(f"{MEM_ENV}={env!r} is not a number") from exc
    return float(flag) if flag is not None else DEFAULT_MEM_BUDGET


def parse_lora(text: str) -> LoraConfig:
    """``r=<rank>,alpha=<alpha>``; alpha defaults to the rank."""
    fields = {}
    for part in text.split(","):
        if not part.strip():
            continue
        key, sep, value = part.partition("=")
        if not sep:
            raise ConfigurationError(f"bad --lora item {part!r}; expected key=value")
        fields[key.strip().lower()] = value.strip()
    unknown = set(fields) - {"r", "rank", "alpha"}
    if unknown:
        raise ConfigurationError(f"unknown --lora key(s): {', '.join(sorted(unknown))}")
    try:
        rank = int(fields.get("r", fields.get("rank", 8)))
        alpha = float(fields.get("alpha", rank))
        return LoraConfig(rank, alpha)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc


def _status_printer(stream):
    def show(entry: dict) -> None:
        print(f"epoch={entry['epoch']} lr={entry['lr']:.6g} train_loss={entry['train_loss']:.6f} "
              f"val_loss={entry['val_loss']:.6f} mean_dsc={entry['mean_dsc']:.6f} "
              f"best={entry['best_mean_dsc']:.6f}", file=stream, flush=True)
    return show


def _write_metrics(record: MetricsRecord, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(record.to_csv())
    (out / "metrics.json").write_text(record.to_json() + "\n")


def _split_config(raw: dict):
    raw = dict(raw)
    network = raw.pop("network", None) or {}
    if not isinstance(network, dict):
        raise ConfigurationError("config key 'network' must be an object")
    return raw, network


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    spec = PhantomSpec.load(args.spec)
    paths = write_dataset(spec, args.n, args.seed, args.out)
    man = RunManifest("synth", {"spec": spec.to_dict(), "n": args.n}, seed=args.seed, started=None)
    man.add_inputs([args.spec])
    man.extra["outputs"] = [p.name for p in paths]
    man.write(Path(args.out) / MANIFEST_NAME)
    return EXIT_OK


def cmd_fingerprint(args) -> int:
    bundles, paths = _load_dir(args.data)
    fp = compute_fingerprint(bundles)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(fp.to_dict(), indent=2, sort_keys=True) + "\n")
    man = RunManifest("fingerprint", {"data": str(args.data)})
    man.add_inputs(paths)
    man.write(out.with_name(out.stem + "." + MANIFEST_NAME))
    return EXIT_OK


def _plan_for(arch: str, network_cfg: dict, bundles, num_classes: int, mem: float):
    in_channels = bundles[0].channels
    if arch == "dynunet":
        fp = compute_fingerprint(bundles)
        opts = {k: network_cfg[k] for k in ("base_channels", "max_channels", "max_levels", "max_batch")
                if k in network_cfg}
        return plan_dynunet(fp, MemoryBudget(mem), in_channels, num_classes, **opts)
    hyper = network_cfg.get("hyper")
    if not hyper:
        raise ConfigurationError(f"{arch} needs manual hyperparameters: set config key network.hyper "
                                 "(kernels, strides, channels, patch_size)")
    dims = 3 if arch == "unet3d" else 2
    return build_unet(dims, hyper, in_channels, num_classes).plan


def cmd_train(args) -> int:
    raw = _read_json(args.config, "config") if args.config else {}
    train_raw, network_cfg = _split_config(raw)
    if args.seed is not None:
        train_raw["seed"] = args.seed
    cfg = TrainConfig.from_dict(train_raw)
    if cfg.fine_tuning:
        raise ConfigurationError("freezing/LoRA options belong to the finetune command")
    mem = _mem_budget(args.mem_budget)
    bundles, paths = _load_dir(args.data)
    labels = sorted({int(v) for b in bundles for v in np.unique(b.labels)})
    plan = _plan_for(args.arch, network_cfg, bundles, max(labels) + 1, mem)
    man = _manifest("train", {"arch": args.arch, "train": cfg.to_dict(), "network": network_cfg,
                              "mem_budget": mem, "plan": plan.to_dict()}, cfg.seed, args.deterministic)
    man.add_inputs(paths)
    train_set, val_set = split_dataset(bundles, 0.8, cfg.seed)
    artifact, record = train(cfg, train_set, val_set, plan=plan, progress=_status_printer(sys.stdout))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_artifact(artifact, args.out)
    _write_metrics(record, args.metrics)
    man.extra["best_epoch"] = record.best_epoch
    _finish(man, Path(args.metrics) / MANIFEST_NAME, args.deterministic)
    return EXIT_OK


def cmd_finetune(args) -> int:
    model_path = Path(args.model)
    if not model_path.is_file():
        raise UsageError(f"model artifact {model_path} does not exist")
    raw = _read_json(args.config, "config") if args.config else {}
    train_raw, _ = _split_config(raw)
    if args.seed is not None:
        train_raw["seed"] = args.seed
    if args.remap_labels:
        train_raw["remap_labels"] = True
    cfg = TrainConfig.from_dict(train_raw, fine_tune=True)
    if args.strategy is not None:
        cfg.freeze = FreezePolicy.parse(args.strategy)
    if args.lora is not None:
        cfg.lora = parse_lora(args.lora)
    cfg.validate()
    init = load_artifact(model_path)
    bundles, paths = _load_dir(args.data)
    man = _manifest("finetune", {"train": cfg.to_dict(), "plan": init.arch}, cfg.seed, args.deterministic)
    man.add_inputs([model_path] + list(paths))
    train_set, val_set = split_dataset(bundles, 0.8, cfg.seed)
    artifact, record = train(cfg, train_set, val_set, init=init, progress=_status_printer(sys.stdout))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_artifact(artifact, args.out)
    _write_metrics(record, args.metrics)
    man.extra.update({"unfreeze_epochs": record.unfreeze_epochs, "initial": record.initial,
                      "best_epoch": record.best_epoch})
    _finish(man, Path(args.metrics) / MANIFEST_NAME, args.deterministic)
    return EXIT_OK


def cmd_eval(args) -> int:
    model_path = Path(args.model)
    if not model_path.is_file():
        raise UsageError(f"model artifact {model_path} does not exist")
    artifact = load_artifact(model_path)
    bundles, paths = _load_dir(args.data)
    report = evaluate(artifact, bundles, args.overlap)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "dice_report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    names = artifact.label_names
    lines = ["label,name,dsc"] + [f"{lbl},{names.get(lbl, '')},{v!r}" for lbl, v in report.per_label.items()]
    (out / "dice_report.csv").write_text("\n".join(lines) + "\n")
    man = RunManifest("eval", {"overlap": args.overlap})
    man.add_inputs([model_path] + list(paths))
    man.extra["mean_dsc"] = report.mean
    man.write(out / MANIFEST_NAME)
    print(f"mean_dsc={report.mean:.6f} volumes={report.n_volumes}")
    return EXIT_OK


def cmd_compare(args) -> int:
    records = {}
    inputs = []
    for run in args.runs:
        path = Path(run) / "metrics.json"
        if not path.is_file():
            raise UsageError(f"run directory {run} has no metrics.json")
        name = Path(run).resolve().name
        if name in records:
            raise UsageError(f"duplicate run name {name!r}")
        records[name] = MetricsRecord.from_dict(_read_json(path, "metrics"))
        inputs.append(path)
    emit_report(records, args.out, args.baseline)
    man = RunManifest("compare", {"runs": list(records), "baseline": args.baseline})
    man.add_inputs(inputs)
    man.write(Path(args.out) / MANIFEST_NAME)
    print((Path(args.out) / "comparison.txt").read_text(), end="")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segforge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    s.add_argument("--spec", required=True, help="phantom spec JSON")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fingerprint", help="median spacing/shape of a bundle directory")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fingerprint)

    s = sub.add_parser("train", help="train from scratch")
    s.add_argument("--data", required=True)
    s.add_argument("--arch", choices=["unet2d", "unet3d", "dynunet"], default="dynunet")
    s.add_argument("--config", help="JSON training config; key 'network' holds planner/U-Net options")
    s.add_argument("--out", required=True, help="model artifact path")
    s.add_argument("--metrics", required=True, help="metrics output directory")
    s.add_argument("--mem-budget", type=float, default=None,
                   help=f"abstract memory units for the planner (env {MEM_ENV} wins)")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--deterministic", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("finetune", help="adapt a trained model to new data")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--strategy", default=None, help="gu | static:<fraction> | none")
    s.add_argument("--lora", default=None, help="r=<rank>,alpha=<alpha>")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--metrics", required=True)
    s.add_argument("--remap-labels", action="store_true",
                   help="re-initialize the output head when the label space differs")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--deterministic", action="store_true")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="Dice report of a model on a bundle directory")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--overlap", type=float, default=0.5)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", help="comparison table over run metrics directories")
    s.add_argument("--runs", nargs="+", required=True)
    s.add_argument("--baseline", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_compare)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
