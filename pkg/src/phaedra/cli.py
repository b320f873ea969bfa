"""Command-line entry point: ``phaedra {gen,train,tokenize,detokenize,eval,report}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import plotting
from .checkpoint import CheckpointError, checkpoint_stats, load_checkpoint
from .datagen import FAMILIES, DataError, Dataset, GeneratorParams, generate_dataset, write_dataset
from .metrics import CSV_COLUMNS, radial_power_spectrum
from .model import ModelConfig
from .pipeline import detokenize, evaluate, tokenize
from .quantizers import TokenFormatError, read_tokens, write_tokens
from .tensor import NonFiniteError
from .trainer import TrainConfig, TrainingDiverged, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
TOKENS_FILE = "tokens.phtk"
SNAPSHOT = "config.json"

MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"seed", "input_resolution"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
GEN_KEYS = {f.name for f in fields(GeneratorParams)} - {"family"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- config handling


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [parse_value(t) for t in text.split(",") if t.strip()]
    return text


def read_config(path: str | Path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    for n, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def resolve_config(args) -> dict:
    cfg = read_config(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg[k.strip()] = parse_value(v)
    return cfg


def _pick(cfg: dict, keys: set[str], allowed_extra: set[str] = frozenset()) -> dict:
    unknown = set(cfg) - keys - allowed_extra
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return {k: v for k, v in cfg.items() if k in keys}


def write_snapshot(out: Path, command: str, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / SNAPSHOT).write_text(json.dumps({"command": command, **resolved}, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_gen(args, cfg: dict) -> int:
    families = [f for f in args.family.split(",") if f]
    for f in families:
        if f not in FAMILIES:
            raise UsageError(f"unknown family {f!r}; choose from {', '.join(FAMILIES)}")
    if args.count < 1:
        raise UsageError("count must be at least 1")
    if args.test_count < 0:
        raise UsageError("test count must be non-negative")
    if args.resolution < 8:
        raise UsageError("resolution must be at least 8")
    if "quadrants" in families and args.resolution % 2:
        raise UsageError("quadrant fields need an even resolution")
    try:
        params = GeneratorParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in _pick(cfg, GEN_KEYS).items()})
        params.validate()
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e
    out = Path(args.out)
    manifest = generate_dataset(out, families, args.count, args.test_count, args.resolution, args.seed, params)
    write_snapshot(
        out,
        "gen",
        {
            "family": families,
            "count": args.count,
            "test_count": args.test_count,
            "resolution": args.resolution,
            "seed": args.seed,
            "generator": cfg,
        },
    )
    print(json.dumps({"samples": manifest.count, "mu": manifest.stats["mu"], "sigma_g": manifest.stats["sigma_g"]}))
    return EXIT_OK


def _open_dataset(path) -> Dataset:
    if path is None:
        raise UsageError("--data is required")
    return Dataset(path)


def cmd_train(args, cfg: dict) -> int:
    for key in ("variant", "steps", "batch_size", "optimizer", "lr"):
        val = getattr(args, key)
        if val is not None:
            cfg[key] = val
    _pick(cfg, MODEL_KEYS | TRAIN_KEYS)
    data = _open_dataset(args.data)
    try:
        mcfg = ModelConfig(**_pick(cfg, MODEL_KEYS, TRAIN_KEYS), input_resolution=data.resolution, seed=args.seed)
        tcfg = TrainConfig(**_pick(cfg, TRAIN_KEYS, MODEL_KEYS), seed=args.seed)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e
    out = Path(args.out)
    write_snapshot(
        out,
        "train",
        {"data": str(args.data), "seed": args.seed, "model": mcfg.to_dict(), "train": asdict(tcfg)},
    )
    try:
        res = train(mcfg, data.split("train"), data.stats, tcfg, out)
    except TrainingDiverged:
        raise
    except ValueError as e:
        raise DataError(str(e)) from e
    last = res.log[-1] if res.log else {}
    print(json.dumps({"steps": tcfg.steps, "final": str(out / "final"), **{k: v for k, v in last.items() if k != "step"}}))
    return EXIT_OK


def _split(data: Dataset, name: str) -> np.ndarray:
    if name == "all":
        return data.read(0, data.manifest.count)
    try:
        return data.split(name)
    except DataError as e:
        raise UsageError(str(e)) from e


def cmd_tokenize(args, cfg: dict) -> int:
    model, man = load_checkpoint(args.checkpoint)
    if model.variant == "continuous":
        raise UsageError("the continuous variant has no tokens")
    data = _open_dataset(args.data)
    stats = checkpoint_stats(man)
    grids = tokenize(model, _split(data, args.split), stats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tokens(out / TOKENS_FILE, grids)
    write_snapshot(out, "tokenize", {"checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split})
    print(json.dumps({"tokens": str(out / TOKENS_FILE), "streams": len(grids), "shape": list(grids[0].indices.shape)}))
    return EXIT_OK


def cmd_detokenize(args, cfg: dict) -> int:
    model, man = load_checkpoint(args.checkpoint)
    grids = read_tokens(args.tokens)
    specs = list(model.config.stream_specs.values())
    if len(grids) != len(specs) or any(g.spec != s for g, s in zip(grids, specs)):
        raise DataError(f"token streams do not match the {model.variant} checkpoint")
    stats = checkpoint_stats(man)
    rec = detokenize(model, grids, stats)
    out = Path(args.out)
    write_dataset(out, rec, rec.shape[0], family="reconstruction", stats=stats)
    write_snapshot(out, "detokenize", {"checkpoint": str(args.checkpoint), "tokens": str(args.tokens)})
    print(json.dumps({"samples": int(rec.shape[0]), "out": str(out)}))
    return EXIT_OK


def _spectrum_rows(truth: np.ndarray, pred: np.ndarray) -> list[tuple[int, float, float]]:
    e = np.mean([radial_power_spectrum(t) for t in truth], axis=0)
    eh = np.mean([radial_power_spectrum(p) for p in pred], axis=0)
    return [(k + 1, float(a), float(b)) for k, (a, b) in enumerate(zip(e, eh))]


def cmd_eval(args, cfg: dict) -> int:
    data = _open_dataset(args.data)
    truth = _split(data, args.split)
    if truth.shape[0] == 0:
        raise DataError(f"split {args.split!r} is empty")
    stats = data.stats
    model = None
    label = args.label
    if args.checkpoint:
        model, man = load_checkpoint(args.checkpoint)
        label = label or man["config"]["variant"]
    if args.pred:
        pred_ds = Dataset(args.pred)
        pred = pred_ds.read(0, pred_ds.manifest.count)
        if pred.shape != truth.shape:
            raise DataError(f"prediction shape {pred.shape} does not match truth {truth.shape}")
        report, rec = evaluate(model, truth, stats, reconstruction=pred)
    else:
        if model is None:
            raise UsageError("eval needs --checkpoint or --pred")
        report, rec = evaluate(model, truth, stats, batch=args.batch_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = report.to_dict() | {"model": label or "prediction", "dataset": args.dataset_label or data.manifest.family}
    (out / "metrics.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    (out / "metrics.csv").write_text(report.to_csv())
    with open(out / "spectrum.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "E_true", "E_recon"])
        for k, a, b in _spectrum_rows(truth, rec):
            w.writerow([k, repr(a), repr(b)])
    write_snapshot(
        out,
        "eval",
        {"checkpoint": args.checkpoint and str(args.checkpoint), "data": str(args.data), "pred": args.pred and str(args.pred), "split": args.split},
    )
    print(json.dumps({"nMAE": report.nMAE, "nRMSE": report.nRMSE, "gamma_min": report.gamma_min}))
    return EXIT_OK


REPORT_COLUMNS = ("model", "dataset") + CSV_COLUMNS


def _load_eval(path: Path) -> tuple[dict, Path]:
    if path.is_dir():
        path = path / "metrics.json"
    if not path.is_file():
        raise DataError(f"no evaluation output at {path}")
    try:
        return json.loads(path.read_text()), path.parent
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: {e}") from e


def cmd_report(args, cfg: dict) -> int:
    if not args.inputs:
        raise UsageError("report needs at least one evaluation output")
    rows, spectra = [], []
    schema = None
    for p in args.inputs:
        d, root = _load_eval(Path(p))
        keys = set(d) - {"streams"}
        if schema is None:
            schema = keys
        elif keys != schema:
            raise DataError(f"{p}: metrics schema differs from the first input")
        missing = set(REPORT_COLUMNS) - keys
        if missing:
            raise DataError(f"{p}: missing metrics {sorted(missing)}")
        rows.append(d)
        spec = root / "spectrum.csv"
        if spec.is_file():
            with open(spec) as fh:
                rd = list(csv.DictReader(fh))
            spectra.append(
                (f"{d['model']} / {d['dataset']}", [int(r["k"]) for r in rd], [float(r["E_true"]) for r in rd], [float(r["E_recon"]) for r in rd])
            )
    order = sorted(range(len(rows)), key=lambda i: (str(rows[i]["model"]), str(rows[i]["dataset"])))
    rows = [rows[i] for i in order]
    spectra = [spectra[i] for i in order] if len(spectra) == len(order) else spectra
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow(["" if r[c] is None else repr(r[c]) if isinstance(r[c], float) else r[c] for c in REPORT_COLUMNS])
    (out / "report.csv").write_text(buf.getvalue())
    figures = [plotting.metric_bars(rows, out / "metrics.png")]
    if spectra:
        with open(out / "spectra.csv", "w", newline="") as fh:
            sw = csv.writer(fh, lineterminator="\n")
            sw.writerow(["label", "k", "E_true", "E_recon"])
            for label, ks, e, eh in spectra:
                for k, a, b in zip(ks, e, eh):
                    sw.writerow([label, k, repr(a), repr(b)])
        figures.append(plotting.spectra(spectra, out / "spectra.png"))
    write_snapshot(out, "report", {"inputs": [str(p) for p in args.inputs]})
    print(json.dumps({"rows": len(rows), "report": str(out / "report.csv"), "figures": [str(f) for f in figures]}))
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for generation, initialization and batch order")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    common.add_argument("--deterministic", action="store_true", help="force single-threaded, bit-reproducible runs")
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    common.add_argument("--out", default=".", help="output directory")

    p = _Parser(prog="phaedra", description="Two-stream FSQ tokenizer for 2D scientific fields.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("family", help=f"family or comma-separated families: {', '.join(FAMILIES)}")
    g.add_argument("count", type=int, help="training samples per family")
    g.add_argument("resolution", type=int)
    g.add_argument("--test-count", type=int, default=0, help="held-out samples per family")

    t = sub.add_parser("train", parents=[common], help="train a tokenizer")
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--variant", choices=["phaedra", "fsq", "continuous", "codebook_ablation", "residual_ablation"])
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--optimizer", choices=["adam", "ademamix"])
    t.add_argument("--lr", type=float)

    k = sub.add_parser("tokenize", parents=[common], help="encode a dataset split into token files")
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--data", required=True)
    k.add_argument("--split", default="test", help="train, test or all")

    d = sub.add_parser("detokenize", parents=[common], help="decode token files into reconstruction shards")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--tokens", required=True)

    e = sub.add_parser("eval", parents=[common], help="evaluate reconstructions")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", help="train, test or all")
    e.add_argument("--pred", help="dataset of predictions to score instead of running the model")
    e.add_argument("--label", help="model label in the report (default: variant)")
    e.add_argument("--dataset-label", help="dataset label in the report (default: manifest family)")
    e.add_argument("--batch-size", type=int, default=32)

    r = sub.add_parser("report", parents=[common], help="merge evaluation outputs into a table and figures")
    r.add_argument("inputs", nargs="*", help="evaluation directories or metrics.json files")
    return p


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "tokenize": cmd_tokenize,
    "detokenize": cmd_detokenize,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        cfg = resolve_config(args)
        threads = 1 if args.deterministic else args.threads
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"phaedra: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteError) as e:
        print(f"phaedra: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, TokenFormatError, FileNotFoundError, IsADirectoryError) as e:
        print(f"phaedra: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
