"""Command-line entry point: generate | train | eval | sweep.

Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import sys
from dataclasses import fields as dc_fields
from pathlib import Path

from . import __version__
from .datagen import GenerationError, SynthSpec, generate, paper_test_fraction, split_test
from .dataio import DataFormatError, read_dataset_dir, write_dataset_dir
from .metrics import EvalReport
from .scoremodel import CheckpointError, load_checkpoint, save_checkpoint
from .trainer import (METHODS, PRESETS, SWEEP_AXES, SWEEP_FIELDS, TrainConfig, aggregate, evaluate_model,
                      rows_to_csv, sweep, train)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags, bad config values or unusable inputs (exit code 2)."""


# ---------------------------------------------------------------------------
# config plumbing

# flag / config-file key -> TrainConfig field
TRAIN_KEYS = {
    "method": "method", "alpha": "alpha", "mc_samples": "mc_samples", "lr": "lr", "lr_rho": "lr_rho",
    "embed_dim": "embed_dim", "batch": "batch_r", "batch_d": "batch_d", "epochs": "max_epochs",
    "patience": "patience", "seed": "seed", "backbone": "backbone", "r_head": "r_head", "hidden": "hidden",
    "weight_decay": "weight_decay", "steps_r": "steps_r", "steps_d": "steps_d", "clip_floor": "clip_floor",
    "val_fraction": "val_fraction", "warmup_epochs": "warmup_epochs", "warmup_steps": "warmup_steps",
    "warmup_lr": "warmup_lr", "mc_seed": "mc_seed", "floor_eps": "floor_eps",
}
_FIELD_TYPES = {f.name: f.type for f in dc_fields(TrainConfig)}


def read_config_file(path) -> dict:
    """Flat ``key=value`` text; '#' starts a comment; dashes in keys become underscores."""
    out = {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {path}")
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(field: str, value):
    if value is None or not isinstance(value, str):
        return value
    t = str(_FIELD_TYPES.get(field, "str"))
    try:
        if field == "hidden":
            return tuple(int(v) for v in value.split(",") if v.strip())
        if value.lower() == "none" and "None" in t:
            return None
        if t.startswith("int"):
            return int(value)
        if t.startswith("float"):
            return float(value)
    except ValueError:
        raise UsageError(f"bad value for {field}: {value!r}") from None
    return value


def resolve_train_config(flags: dict, config_file: dict | None = None, preset: str | None = None) -> TrainConfig:
    """preset < config file < flags."""
    values: dict = {}
    if preset:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        values.update(PRESETS[preset])
    for source in (config_file or {}, flags):
        for key, value in source.items():
            if value is None or key not in TRAIN_KEYS:
                continue
            field = TRAIN_KEYS[key]
            values[field] = _coerce(field, value)
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def config_from_dict(d: dict) -> TrainConfig:
    """Rebuild a TrainConfig from its ``to_dict`` form (as stored in a manifest)."""
    d = dict(d)
    if "hidden" in d:
        d["hidden"] = tuple(d["hidden"])
    try:
        return TrainConfig(**d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad manifest config: {exc}") from None


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    conf = read_config_file(args.config) if args.config else {}
    pick = lambda name, default=None: getattr(args, name) if getattr(args, name) is not None else conf.get(name, default)
    try:
        beta = pick("beta")
        sparsity = pick("sparsity")
        if beta is not None and sparsity is not None:
            raise UsageError("give either --beta or --sparsity, not both")
        if beta is None and sparsity is None:
            sparsity = 0.05
        ratings = pick("ratings")
        spec = SynthSpec(
            n_users=int(pick("users", 500)), n_items=int(pick("items", 500)), rho=float(pick("rho", 0.0)),
            beta=None if beta is None else float(beta),
            target_sparsity=None if sparsity is None else float(sparsity),
            feature_source="external_ratings" if ratings else "random_mf", ratings_path=ratings,
            feature_dim=int(pick("feature_dim", 8)), mf_epochs=int(pick("mf_epochs", 50)),
            label_mode=pick("mode", "continuous"), seed=int(pick("seed", 0)),
            pref_scale=float(pick("pref_scale", 5.0)), sel_scale=float(pick("sel_scale", 5.0)))
        frac = pick("test_fraction")
        frac = None if frac is None else float(frac)
        if frac is not None and not 0.0 < frac < 1.0:
            raise UsageError("--test-fraction must lie in (0, 1)")
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    data = generate(spec)
    frac = frac if frac is not None else paper_test_fraction(data)
    train_set, test = split_test(data, frac, spec.seed)
    meta = dict(data.metadata(), test_fraction=frac, n_test=len(test), version=__version__)
    write_dataset_dir(args.out, train_set, test, meta)
    print(f"wrote {args.out}: {len(train_set)} observed pairs, {len(test)} test pairs")
    print(f"achieved_sparsity={data.sparsity!r} beta={data.beta!r}")
    return EXIT_OK


def _load_data(path):
    p = Path(path)
    if not (p / "meta.json").exists():
        raise UsageError(f"dataset not found: {path} (expected a directory written by 'generate')")
    try:
        return read_dataset_dir(p)
    except (DataFormatError, KeyError, ValueError) as exc:
        raise UsageError(f"unreadable dataset {path}: {exc}") from None


def _input_digests(data_dir: Path) -> dict:
    return {name: _sha256(data_dir / name) for name in ("meta.json", "train.csv", "test.csv", "features.csv")
            if (data_dir / name).exists()}


def _summary(cfg: TrainConfig, report: EvalReport, rho: float) -> tuple[str, str, str]:
    text = f"method={cfg.method}\n" + report.to_text()
    head, row = report.csv_header().rstrip("\n"), report.csv_row().rstrip("\n")
    head, row = "method," + head, f"{cfg.method}," + row
    if cfg.is_ours:
        text += f"rho={rho!r}\n"
        head += ",rho"
        row += f",{rho!r}"
    return text, head + "\n", row + "\n"


def cmd_train(args) -> int:
    manifest_in = None
    if args.manifest:
        mp = Path(args.manifest)
        if not mp.exists():
            raise UsageError(f"manifest not found: {args.manifest}")
        manifest_in = json.loads(mp.read_text(encoding="utf-8"))
        cfg = config_from_dict(manifest_in["config"])
        data_dir = Path(args.data or manifest_in["data"])
        k = int(manifest_in.get("k", 5))
    else:
        if not args.data:
            raise UsageError("train needs --data (or --manifest)")
        conf = read_config_file(args.config) if args.config else {}
        flags = {key: getattr(args, key, None) for key in TRAIN_KEYS}
        cfg = resolve_train_config(flags, conf, args.preset or conf.get("preset"))
        data_dir = Path(args.data)
        k = args.k if args.k is not None else int(conf.get("k", 5))
    if k < 1:
        raise UsageError("--k must be >= 1")
    train_set, test, meta = _load_data(data_dir)
    digests = _input_digests(data_dir)
    if manifest_in is not None and manifest_in.get("inputs") and manifest_in["inputs"] != digests:
        raise UsageError("dataset files differ from the digests recorded in the manifest")
    mode = args.mode if not manifest_in else None
    if mode and mode != train_set.label_kind:
        raise UsageError(f"--mode {mode} conflicts with the dataset's {train_set.label_kind} labels")
    if cfg.backbone == "feature" and train_set.features is None:
        raise UsageError("the feature backbone needs features.csv in the dataset directory")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"command": "train", "tool": "exodebias", "version": __version__, "data": str(data_dir),
                "config": cfg.to_dict(), "k": k,
                "seeds": {"train": cfg.seed, "mc": cfg.mc.seed, "data": meta.get("seed")},
                "inputs": digests, "started": _now(), "finished": None}
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    res = train(train_set, cfg)
    save_checkpoint(res.model_o, res.model_r, res.corr, out / "best.ckpt")
    _write(out / "trace.csv", res.trace.to_csv())
    report = evaluate_model(res.model_r, test, k)
    text, head, row = _summary(cfg, report, res.rho)
    _write(out / "metrics.txt", text)
    _write(out / "metrics.csv", head + row)
    manifest["finished"] = _now()
    manifest["best_epoch"] = res.trace.best_epoch
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if ckpt.is_dir():
        ckpt = ckpt / "best.ckpt"
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    _, test, _ = _load_data(args.data)
    try:
        _, model_r, _ = load_checkpoint(ckpt, test.n_users, test.n_items)
        if model_r.kind != "mf" and test.features is None:
            raise UsageError("checkpoint holds a feature model but the dataset has no features.csv")
        report = evaluate_model(model_r, test, args.k)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out) if args.out else ckpt.parent
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "report.txt", report.to_text())
    _write(out / "report.csv", report.csv_header() + report.csv_row())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _parse_values(axis: str, text: str) -> list:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad --values {text!r}") from None
    if not vals:
        raise UsageError("--values is empty")
    if axis == "mc_L":
        if any(v != int(v) or v < 1 for v in vals):
            raise UsageError("mc_L values must be positive integers")
        vals = [int(v) for v in vals]
    return vals


def cmd_sweep(args) -> int:
    if args.axis not in SWEEP_AXES:
        raise UsageError(f"unknown axis {args.axis!r}; choose from {', '.join(SWEEP_AXES)}")
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    values = _parse_values(args.axis, args.values)
    conf = read_config_file(args.config) if args.config else {}
    flags = {key: getattr(args, key, None) for key in TRAIN_KEYS}
    cfg = resolve_train_config(flags, conf, args.preset or conf.get("preset"))
    try:
        spec = SynthSpec(n_users=args.users, n_items=args.items, rho=args.rho, target_sparsity=args.sparsity,
                         label_mode=args.mode, seed=args.data_seed, pref_scale=args.pref_scale,
                         sel_scale=args.sel_scale)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = sweep(args.axis, values, spec, cfg, args.repeats, args.k)
    agg = aggregate(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "rows.csv", rows_to_csv(rows, SWEEP_FIELDS))
    _write(out / "aggregate.csv", rows_to_csv(agg, list(agg[0])))
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} runs ({failed} failed), {len(agg)} aggregate rows -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--method", choices=METHODS)
    g.add_argument("--preset", help=f"one of {', '.join(PRESETS)}")
    g.add_argument("--alpha", type=float)
    g.add_argument("--mc-samples", dest="mc_samples", type=int)
    g.add_argument("--mc-seed", dest="mc_seed", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--lr-rho", dest="lr_rho", type=float)
    g.add_argument("--weight-decay", dest="weight_decay", type=float)
    g.add_argument("--embed-dim", dest="embed_dim", type=int)
    g.add_argument("--batch", type=int, help="observed-pair batch size")
    g.add_argument("--batch-d", dest="batch_d", type=int, help="all-pair batch size")
    g.add_argument("--steps-r", dest="steps_r", type=int)
    g.add_argument("--steps-d", dest="steps_d", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--patience", type=int)
    g.add_argument("--backbone", choices=("mf", "feature"))
    g.add_argument("--r-head", dest="r_head", choices=("linear", "mlp"))
    g.add_argument("--hidden", help="comma-separated hidden widths")
    g.add_argument("--clip-floor", dest="clip_floor", type=float)
    g.add_argument("--val-fraction", dest="val_fraction", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--config", help="flat key=value file; flags win on conflict")
    g.add_argument("--k", type=int, help="cutoff for Recall@K / NDCG@K (default 5)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exodebias", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a semi-synthetic dataset directory")
    g.add_argument("--users", type=int)
    g.add_argument("--items", type=int)
    g.add_argument("--rho", type=float)
    g.add_argument("--sparsity", type=float)
    g.add_argument("--beta", type=float)
    g.add_argument("--mode", choices=("continuous", "binary"))
    g.add_argument("--feature-dim", dest="feature_dim", type=int)
    g.add_argument("--mf-epochs", dest="mf_epochs", type=int)
    g.add_argument("--ratings", help="external user,item,rating file for the base features")
    g.add_argument("--pref-scale", dest="pref_scale", type=float)
    g.add_argument("--sel-scale", dest="sel_scale", type=float)
    g.add_argument("--test-fraction", dest="test_fraction", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one method and evaluate it on the unbiased test set")
    t.add_argument("--data", help="dataset directory from 'generate'")
    t.add_argument("--manifest", help="re-run the configuration recorded in a manifest.json")
    t.add_argument("--mode", choices=("continuous", "binary"), help="assert the dataset's label kind")
    t.add_argument("--out", required=True, help="run directory")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test split")
    e.add_argument("--checkpoint", required=True, help="best.ckpt or a run directory")
    e.add_argument("--data", required=True)
    e.add_argument("--k", type=int, default=5)
    e.add_argument("--out", help="output directory (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="grid over rho, alpha or the Monte Carlo sample size")
    s.add_argument("--axis", required=True)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--repeats", type=int, default=1)
    s.add_argument("--users", type=int, default=500)
    s.add_argument("--items", type=int, default=500)
    s.add_argument("--rho", type=float, default=0.0)
    s.add_argument("--sparsity", type=float, default=0.05)
    s.add_argument("--mode", choices=("continuous", "binary"), default="continuous")
    s.add_argument("--pref-scale", dest="pref_scale", type=float, default=5.0)
    s.add_argument("--sel-scale", dest="sel_scale", type=float, default=5.0)
    s.add_argument("--data-seed", dest="data_seed", type=int, default=0)
    s.add_argument("--out", required=True)
    _add_train_flags(s)
    s.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    # let "--values -0.8,0.8" through; argparse would read it as a flag
    for j in range(len(argv) - 1):
        if argv[j] == "--values" and argv[j + 1].startswith("-"):
            argv[j:j + 2] = [f"--values={argv[j + 1]}", ""]
    argv = [a for a in argv if a != ""]
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:          # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    if getattr(args, "k", None) is None and args.command == "sweep":
        args.k = 5
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GenerationError, OSError, RuntimeError, FloatingPointError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
