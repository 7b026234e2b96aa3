"""Command-line entry point: ``onenet <command> ...``.

Commands
--------
train      train one of the four methods and write a run directory
eval       evaluate a checkpoint as a single net or as the gated ensemble
perturb    random-direction perturbation probe of a checkpoint
variance   prediction variance between branches or between separate nets
export     re-emit a metrics CSV as CSV or JSON
aggregate  mean and sample std of final-epoch metrics over several runs

Exit codes: 0 success, 2 configuration error, 3 data/file error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import shutil
import sys
from pathlib import Path

from . import __version__, analysis, train
from .config import FLAG_NAMES, TrainConfig, preset_names, resolve_config
from .data import DATA_ROOT_ENV, DataBundle, load_bundle
from .errors import ConfigError, DataError, NumericError, OneNetError
from .metrics import read_csv
from .model import MultiBranchModel, load_checkpoint, strip

log = logging.getLogger("onenet")

METHODS = ("one", "vanilla", "kd", "ensemble")
PACKAGE_DIR = Path(__file__).parent


def code_version() -> str:
    """Short sha256 over the package's Python sources."""
    h = hashlib.sha256()
    for path in sorted(PACKAGE_DIR.rglob("*.py")):
        h.update(path.relative_to(PACKAGE_DIR).as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """``manifest.json``: resolved config, seed, artifacts, code version, timings.

    Written once before work starts (``status: running``) and rewritten when
    the command finishes. Timestamps and wall-clock times live only here.
    """

    def __init__(self, path, command: str, config: dict | None = None, seed: int | None = None,
                 inputs: list[str] | None = None):
        self.path = Path(path)
        self.data = {
            "command": command,
            "version": __version__,
            "code_version": code_version(),
            "seed": seed,
            "config": config,
            "inputs": inputs or [],
            "artifacts": [],
            "epoch_seconds": [],
            "started": _now(),
            "finished": None,
            "status": "running",
        }

    def write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=2) + "\n")
        tmp.replace(self.path)

    def finish(self, status: str, artifacts: list[Path], root: Path, **extra) -> None:
        self.data["artifacts"] = sorted(p.relative_to(root).as_posix() for p in artifacts)
        self.data["status"] = status
        self.data["finished"] = _now()
        self.data.update(extra)
        self.write()


def _files_under(root: Path, exclude: Path) -> list[Path]:
    return [p for p in sorted(root.rglob("*")) if p.is_file() and p != exclude]


# -- parser ---------------------------------------------------------------

def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-root", help=f"dataset directory (default: ${DATA_ROOT_ENV} or bundled sample)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="onenet", description="Online multi-branch distillation toolkit.")
    parser.add_argument("--version", action="version", version=f"onenet {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", help="train a model and write a run directory")
    p.add_argument("--method", choices=METHODS, default="one",
                   help="one: multi-branch online distillation; vanilla: plain CE; "
                        "kd: two-phase teacher->student; ensemble: independent nets")
    p.add_argument("--preset", help=f"named preset ({', '.join(preset_names())})")
    p.add_argument("--config", help="key = value config file (applied after the preset)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--epochs", type=int, help="override epoch count")
    p.add_argument("--branches", type=int, dest="aux_branches", metavar="M",
                   help="auxiliary branch count m (m+1 branches in total)")
    p.add_argument("--temperature", type=float, help="distillation temperature")
    p.add_argument("--flags", nargs="*", default=[], choices=FLAG_NAMES, metavar="FLAG",
                   help=f"ablation switches: {', '.join(FLAG_NAMES)}")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--members", type=int,
                   help="ensemble size for --method ensemble (default: branches + 1)")
    p.add_argument("--resume", help="checkpoint to resume from (one / vanilla)")
    p.add_argument("--out", required=True, help="run directory")
    _add_data_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("checkpoint")
    p.add_argument("--mode", choices=("single", "ensemble"), default="single",
                   help="single: stripped branch-0 network; ensemble: gated teacher")
    p.add_argument("--out", help="also write the result JSON here")
    _add_data_flags(p)

    p = sub.add_parser("perturb", help="perturbation robustness probe")
    p.add_argument("checkpoint")
    p.add_argument("--dmax", type=float, default=5.0, help="largest perturbation magnitude")
    p.add_argument("--points", type=int, default=11, help="magnitudes in [0, dmax]")
    p.add_argument("--dirs", type=int, default=5, help="random directions per magnitude")
    p.add_argument("--seed", type=int, default=0, help="direction sampling seed")
    p.add_argument("--out", required=True, help="output CSV")
    _add_data_flags(p)

    p = sub.add_parser("variance", help="mean pairwise distance between head predictions")
    p.add_argument("checkpoints", nargs="+",
                   help="one multi-branch checkpoint, or several single-net checkpoints")
    p.add_argument("--samples", type=int, default=analysis.VARIANCE_SAMPLES,
                   help="size of the fixed training subset")
    p.add_argument("--seed", type=int, default=0, help="subset seed")
    p.add_argument("--out", help="output CSV")
    _add_data_flags(p)

    p = sub.add_parser("export", help="re-emit a metrics CSV")
    p.add_argument("metrics")
    p.add_argument("--format", choices=("csv", "json"), default="json")
    p.add_argument("--out", required=True)

    p = sub.add_parser("aggregate", help="mean and sample std of final-epoch metrics")
    p.add_argument("metrics", nargs="+", help="metrics CSV files (one per run)")
    p.add_argument("--phase", default="test", choices=("train", "test"))
    p.add_argument("--out", help="summary CSV (printed when omitted)")
    return parser


# -- helpers --------------------------------------------------------------

def _parse_sets(items: list[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _config_from_args(args) -> TrainConfig:
    overrides = _parse_sets(args.set)
    for key in ("seed", "epochs", "aux_branches", "temperature"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    for flag in args.flags:
        overrides[flag] = True
    if args.data_root:
        overrides["data_root"] = args.data_root
    return resolve_config(args.preset, args.config, overrides)


def _bundle(config: dict | TrainConfig, data_root=None) -> DataBundle:
    cfg = config if isinstance(config, dict) else config.to_dict()
    return load_bundle(cfg["dataset"], data_root or cfg.get("data_root") or None,
                       cfg.get("train_subset", 0), cfg.get("test_subset", 0), cfg.get("seed", 0))


def _load(path):
    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _checkpoint_config(ck) -> dict:
    config = ck.header.get("extra", {}).get("config")
    if not config:
        raise ConfigError("checkpoint carries no training config; cannot resolve its dataset")
    return config


def _analysis_manifest(out: Path, command: str, inputs, **extra) -> None:
    m = RunManifest(out.with_name(out.name + ".manifest.json"), command,
                    inputs=[str(i) for i in inputs])
    m.data.update(extra)
    m.finish("ok", [out], out.parent)


# -- commands -------------------------------------------------------------

def cmd_train(args) -> int:
    config = _config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out / "manifest.json", f"train --method {args.method}",
                           config.to_dict(), config.seed)
    manifest.data["method"] = args.method
    manifest.write()
    data = _bundle(config)
    try:
        if args.method == "one":
            res = train.train_one(config, data, out, args.resume)
        elif args.method == "vanilla":
            res = train.train_vanilla(config, data, out, args.resume)
        elif args.method == "kd":
            res = train.train_kd_offline(config, config, data, out)
        else:
            members = args.members or config.aux_branches + 1
            res = train.train_indep_ensemble(config, members, data, out)
    except NumericError as exc:
        dump = out / "numeric_failure.json"
        dump.write_text(json.dumps({"error": str(exc), "diagnostics": exc.diagnostics},
                                   indent=2, default=str) + "\n")
        manifest.finish("numeric_failure", _files_under(out, manifest.path), out)
        raise
    heads = sorted({r.head for r in res.metrics if r.phase == "test"})
    final = {h: train.final_test_error(res.metrics, h) for h in heads}
    manifest.finish("ok", _files_under(out, manifest.path), out,
                    epoch_seconds=res.epoch_seconds, train_flops=res.train_flops,
                    final_test_top1=final)
    print(json.dumps({"run": str(out), "final_test_top1": final}))
    return 0


def cmd_eval(args) -> int:
    ck = _load(args.checkpoint)
    net = ck.net
    if args.mode == "ensemble":
        if not isinstance(net, MultiBranchModel):
            raise ConfigError("ensemble mode needs a multi-branch checkpoint")
        head = "teacher"
    else:
        net = strip(net) if isinstance(net, MultiBranchModel) else net
        head = "net"
    data = _bundle(_checkpoint_config(ck), args.data_root)
    r = train.evaluate(net, data.test)[head]
    result = {"checkpoint": str(args.checkpoint), "mode": args.mode,
              "top1_error": r["top1"], "top5_error": r["top5"], "ce": r["ce"]}
    text = json.dumps(result, indent=2) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        _analysis_manifest(out, "eval", [args.checkpoint])
    sys.stdout.write(text)
    return 0


def cmd_perturb(args) -> int:
    ck = _load(args.checkpoint)
    spec = analysis.PerturbationSpec.grid(args.dmax, args.points, args.dirs, args.seed)
    data = _bundle(_checkpoint_config(ck), args.data_root)
    report = analysis.perturb_and_eval(ck.net, spec, data)
    out = report.write_csv(args.out)
    _analysis_manifest(out, "perturb", [args.checkpoint], baseline=report.baseline,
                       spec={"magnitudes": list(spec.magnitudes), "directions": spec.directions,
                             "seed": spec.seed})
    return 0


def cmd_variance(args) -> int:
    cks = [_load(p) for p in args.checkpoints]
    if len(cks) == 1:
        source = cks[0].net
        if not isinstance(source, MultiBranchModel):
            raise ConfigError("variance needs at least 2 prediction heads; "
                              "pass a multi-branch checkpoint or several single-net checkpoints")
        kind = "branches"
    else:
        source = [strip(c.net) if isinstance(c.net, MultiBranchModel) else c.net for c in cks]
        kind = "models"
    data = _bundle(_checkpoint_config(cks[0]), args.data_root)
    sample = analysis.variance_sample(data.train, min(args.samples, len(data.train)), args.seed)
    preds = analysis.head_probabilities(source, sample)
    value = analysis.branch_variance(preds)
    row = {"source": kind, "heads": len(preds), "samples": len(sample), "variance": value}
    if args.out:
        out = analysis.write_table([row], args.out, ("source", "heads", "samples", "variance"))
        _analysis_manifest(out, "variance", args.checkpoints)
    print(json.dumps(row))
    return 0


def cmd_export(args) -> int:
    src = Path(args.metrics)
    if not src.is_file():
        raise DataError(f"metrics file not found: {src}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.format == "csv":
        read_csv(src)  # validates the header
        shutil.copyfile(src, out)
    else:
        out.write_text(json.dumps(read_csv(src), indent=1) + "\n")
    _analysis_manifest(out, "export", [src], format=args.format)
    return 0


def cmd_aggregate(args) -> int:
    for p in args.metrics:
        if not Path(p).is_file():
            raise DataError(f"metrics file not found: {p}")
    rows = analysis.aggregate(args.metrics, args.phase)
    columns = ("head", "metric", "n", "mean", "std")
    if args.out:
        out = analysis.write_table(rows, args.out, columns)
        _analysis_manifest(out, "aggregate", args.metrics)
    else:
        for r in rows:
            print(f"{r['head']:>10} {r['metric']:>10}  n={r['n']}  {r['mean']:.3f} +- {r['std']:.3f}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "perturb": cmd_perturb,
            "variance": cmd_variance, "export": cmd_export, "aggregate": cmd_aggregate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except OneNetError as exc:
        print(f"onenet {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
