"""Command-line pipeline: generate/ingest data, train, shrink, emit, verify.

One binary with subcommands; every run is deterministic given its flags
(timing fields aside), all randomness flows from --seed through the
documented derivation scheme, and every artifact written carries the
resolved configuration and input hashes.

Exit codes: 0 success, 2 configuration error, 3 data/model input error,
4 training failure, 5 reference/emitted equivalence failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys

from . import codegen, flowdata, metrics, optimizer, stacker
from .errors import DataError, EmitError, ModelFormatError, TrainingError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4
EXIT_EQUIVALENCE = 5


def hash_file(path) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            sha.update(chunk)
    return sha.hexdigest()


def _parse_hidden(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}") from None


def _parse_sizes(text: str) -> tuple[int, ...]:
    return _parse_hidden(text)


def _parse_candidates(text: str) -> tuple[tuple[int, ...], ...]:
    return tuple(_parse_hidden(part) for part in str(text).split(";") if part)


def load_config_file(path) -> dict[str, str]:
    """KEY=VALUE lines; '#' starts a comment. Keys use the flag spelling."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{line_no}: expected KEY=VALUE")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Fill in options the command line left at their defaults (flags win)."""
    if not getattr(args, "config", None):
        return
    values = load_config_file(args.config)
    for action in parser._actions:
        if action.dest in ("help", "config") or action.dest not in values:
            continue
        if getattr(args, action.dest) != action.default:
            continue  # explicitly set on the command line
        raw = values[action.dest]
        try:
            setattr(args, action.dest, action.type(raw) if action.type else raw)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise DataError(f"config key {action.dest}: {exc}") from exc


def _add_stack_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trees", type=int, default=40, help="random-forest size (default 40)")
    p.add_argument("--mid-hidden", type=_parse_hidden, default=(5, 5),
                   help="intermediate MLP hidden sizes, e.g. 5,5")
    p.add_argument("--meta-hidden", type=_parse_hidden, default=(12, 12),
                   help="meta MLP hidden sizes, e.g. 12,12")
    p.add_argument("--k-base", type=int, default=2, help="stacking folds, base layer (default 2)")
    p.add_argument("--k-int", type=int, default=3,
                   help="stacking folds, intermediate layer (default 3)")
    p.add_argument("--max-depth", type=int, default=0,
                   help="tree depth cap for DT/forest; 0 = unlimited")
    p.add_argument("--mlp-epochs", type=int, default=200)
    p.add_argument("--mlp-lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--logreg-epochs", type=int, default=300)
    p.add_argument("--logreg-lr", type=float, default=0.1)


def build_stack_config(args: argparse.Namespace) -> stacker.StackConfig:
    depth = None if args.max_depth == 0 else args.max_depth
    return stacker.StackConfig(
        forest=stacker.ForestParams(n_trees=args.trees, max_depth=depth),
        logreg=stacker.LogRegParams(learning_rate=args.logreg_lr, epochs=args.logreg_epochs),
        tree=stacker.TreeParams(max_depth=depth),
        intermediate_mlp=stacker.MlpParams(hidden_sizes=args.mid_hidden,
                                           learning_rate=args.mlp_lr, epochs=args.mlp_epochs,
                                           batch_size=args.batch_size),
        meta_mlp=stacker.MlpParams(hidden_sizes=args.meta_hidden,
                                   learning_rate=args.mlp_lr, epochs=args.mlp_epochs,
                                   batch_size=args.batch_size),
        k_base=args.k_base,
        k_intermediate=args.k_int,
        seed=args.seed,
    )


def load_any_dataset(path) -> tuple[flowdata.Dataset, flowdata.Encoder]:
    """CSV loads as already-encoded; anything else parses as a labeled Zeek log."""
    if str(path).endswith(".csv"):
        return flowdata.load_dataset_csv(path), flowdata.Encoder.empty()
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    issues: list[flowdata.ParseError] = []
    records = flowdata.parse_zeek_log(text, errors=issues)
    for issue in issues[:20]:
        print(f"[warn] line {issue.line_no}: {issue.message}", file=sys.stderr)
    if len(issues) > 20:
        print(f"[warn] ... {len(issues) - 20} more rejected lines", file=sys.stderr)
    if not records:
        raise DataError(f"{path}: no parseable flow records")
    encoder = flowdata.fit_encoder(records)
    return flowdata.encode_dataset(records, encoder), encoder


def _split_for_eval(data, args) -> flowdata.Dataset:
    if args.split == "none":
        return data
    seed = stacker.derive_seed(args.seed, "split")
    _, valid = flowdata.stratified_split(data, args.train_fraction, seed)
    return valid


# ---------------------------------------------------------------------------
# Commands

def cmd_gen_data(args) -> int:
    data = flowdata.synth_generate(args.n, args.balance, args.seed)
    flowdata.save_dataset_csv(data, args.out)
    n0, n1 = data.class_counts()
    meta = {
        "command": "gen-data",
        "n": args.n,
        "balance": args.balance,
        "seed": args.seed,
        "benign": n0,
        "malicious": n1,
        "csv_sha256": hash_file(args.out),
    }
    with open(str(args.out) + ".meta.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    print(f"wrote {args.out}: {len(data)} flows ({n1} malicious, {n0} benign)")
    return EXIT_OK


def cmd_train(args) -> int:
    data, encoder = load_any_dataset(args.data)
    data_hash = hash_file(args.data)
    config = build_stack_config(args)
    train, valid = flowdata.stratified_split(data, args.train_fraction,
                                             stacker.derive_seed(args.seed, "split"))
    model = stacker.train_super_learner(train, config, encoder=encoder, data_hash=data_hash)
    stacker.save_model(model, args.out_model)
    report = metrics.evaluate_model(model, valid, input_hash=data_hash)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
    print(f"model -> {args.out_model}")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_optimize(args) -> int:
    data, encoder = load_any_dataset(args.data)
    data_hash = hash_file(args.data)
    if args.model:
        base = stacker.load_model(args.model)
        config = base.config
        seed = config.seed
        encoder = base.encoder
    else:
        config = build_stack_config(args)
        seed = args.seed
    train, valid = flowdata.stratified_split(data, args.train_fraction,
                                             stacker.derive_seed(seed, "split"))
    schedule = optimizer.ReductionSchedule(
        forest_sizes=args.forest_sizes,
        intermediate_hidden=args.mid_candidates,
        meta_hidden=args.meta_candidates,
        gate=args.gate,
    )

    def trainer(train_data, cfg):
        return stacker.train_super_learner(train_data, cfg, encoder=encoder, data_hash=data_hash)

    model, report = optimizer.feature_reduction_loop(train, valid, config, schedule,
                                                     trainer=trainer)
    stacker.save_model(model, args.out_model)
    doc = report.to_dict()
    doc["input_hash"] = data_hash
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    print(report.to_text(), end="")
    print(f"optimized model -> {args.out_model}")
    print(f"reduction report -> {args.report}")
    return EXIT_OK


def cmd_emit(args) -> int:
    model = stacker.load_model(args.model)
    artifact = codegen.emit_super_learner(model, tree_mode=args.tree_mode,
                                          max_emit_depth=args.max_emit_depth,
                                          float_width=args.float_width)
    artifact.manifest["source_model_file"] = str(args.model)
    artifact.manifest["source_model_sha256"] = hash_file(args.model)
    artifact.write(args.out_dir)
    m = artifact.manifest
    print(f"emitted {', '.join(artifact.source_files)} -> {args.out_dir}")
    print(f"entry {artifact.entry_symbol}; {m['parameter_count']} parameters; "
          f"{m['source_bytes']} source bytes")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = stacker.load_model(args.model)
    data, _ = load_any_dataset(args.data)
    args.seed = model.config.seed
    subset = _split_for_eval(data, args)
    report = metrics.evaluate_model(model, subset, repetitions=args.repetitions,
                                    threshold=args.threshold, input_hash=hash_file(args.data))
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_roundtrip(args) -> int:
    model = stacker.load_model(args.model)
    data, _ = load_any_dataset(args.data)
    args.seed = model.config.seed
    subset = _split_for_eval(data, args)
    if not os.path.isfile(args.harness) or not os.access(args.harness, os.X_OK):
        print(f"harness binary not found or not executable: {args.harness}\n"
              f"build it first, e.g.: make -C harness MODEL_DIR=<emit output dir>",
              file=sys.stderr)
        return EXIT_CONFIG

    os.makedirs(args.out_dir, exist_ok=True)
    vectors = os.path.join(args.out_dir, "vectors.csv")
    report_path = os.path.join(args.out_dir, "harness_report.csv")
    codegen.export_test_vectors(model, subset, vectors)
    proc = subprocess.run([args.harness, vectors, report_path, repr(args.tolerance)],
                          capture_output=True, text=True)
    if proc.stdout:
        print(proc.stdout, end="")
    if proc.returncode == 2:
        print(proc.stderr, file=sys.stderr, end="")
        return EXIT_CONFIG

    summary = None
    with open(report_path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("summary,"):
                summary = line.strip().split(",")
    if summary is None:
        print("harness report has no summary line", file=sys.stderr)
        return EXIT_EQUIVALENCE
    rows, mismatches, max_dp = int(summary[1]), int(summary[2]), float(summary[3])
    ok = mismatches == 0 and max_dp <= args.tolerance and proc.returncode == 0
    print(f"roundtrip: {rows} rows, {mismatches} class mismatches, max |dp| = {max_dp:.3e} "
          f"(tolerance {args.tolerance:.1e}) -> {'OK' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_EQUIVALENCE


# ---------------------------------------------------------------------------
# Entry point

def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="flowstack",
                                     description="Stacked flow classifier: train, shrink, emit C.")
    sub = parser.add_subparsers(dest="command", required=True)
    commands: dict[str, argparse.ArgumentParser] = {}

    def new_cmd(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", default=None, help="KEY=VALUE config file; flags override it")
        p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
        commands[name] = p
        return p

    p = new_cmd("gen-data", cmd_gen_data, "write a synthetic encoded dataset CSV")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--balance", type=float, default=0.5, help="fraction labeled malicious")
    p.add_argument("--out", required=True)

    p = new_cmd("train", cmd_train, "train the super learner and evaluate the holdout")
    p.add_argument("--data", required=True, help="encoded CSV or labeled Zeek conn log")
    p.add_argument("--out-model", required=True)
    p.add_argument("--report", default=None, help="write the evaluation report JSON here")
    p.add_argument("--train-fraction", type=float, default=0.8)
    _add_stack_flags(p)

    p = new_cmd("optimize", cmd_optimize, "run the gated reduction loop, then prune")
    p.add_argument("--data", required=True)
    p.add_argument("--model", default=None, help="take config/seed/encoder from this model file")
    p.add_argument("--out-model", required=True)
    p.add_argument("--report", required=True, help="reduction report JSON path")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--forest-sizes", type=_parse_sizes, default=(40, 30, 20, 10))
    p.add_argument("--gate", type=float, default=0.5, help="accuracy gate in points (default 0.5)")
    p.add_argument("--mid-candidates", type=_parse_candidates, default=None,
                   help="explicit hidden-size candidates, e.g. '4,4;3,3'")
    p.add_argument("--meta-candidates", type=_parse_candidates, default=None)
    _add_stack_flags(p)

    p = new_cmd("emit", cmd_emit, "transpile a model file to C source + manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--tree-mode", choices=("nested", "table"), default="nested")
    p.add_argument("--max-emit-depth", type=int, default=48)
    p.add_argument("--float-width", type=int, choices=(64, 32), default=64,
                   help="64 = bit-exact vs the reference; 32 = half-size constants, "
                        "certify with a relaxed tolerance (1e-4, class match)")

    p = new_cmd("eval", cmd_eval, "evaluate a model file on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--split", choices=("valid", "none"), default="valid",
                   help="'valid' recreates the training holdout; 'none' uses all rows")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--threshold", type=float, default=0.5)

    p = new_cmd("roundtrip", cmd_roundtrip, "certify emitted code against the reference engine")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--harness", required=True, help="path to the built harness binary")
    p.add_argument("--out-dir", default="roundtrip-out")
    p.add_argument("--split", choices=("valid", "none"), default="valid")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--tolerance", type=float, default=1e-12)

    return parser, commands


def main(argv=None) -> int:
    parser, commands = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # argparse exits on usage errors and --help
            return int(exc.code or 0)
        apply_config_file(args, commands[args.command])
        return args.func(args)
    except ModelFormatError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except EmitError as exc:
        print(f"emit error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
