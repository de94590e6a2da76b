"""``difflog`` command line: data generation, training, evaluation, inference."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from importlib import resources
from pathlib import Path

from . import __version__
from .core import KINSHIP, LogicError
from .datagen import GenerationError, GenSpec, generate_dataset, parse_counts
from .engine import EngineError, forward, predict
from .learner import (
    Constraints,
    RuleWeightStore,
    TrainConfig,
    TrainingError,
    evaluate,
    export_rules,
    load_checkpoint,
    save_checkpoint,
    top_rules,
    train,
    _weighted_rules,
)
from .parser import ParseError, Sample, parse_dataset, parse_kb, parse_program, parse_rule_priors
from .program import compile_program
from .provenance import WmcError, proof_prob

log = logging.getLogger("difflog")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _read(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from None


def _packaged(name: str) -> str:
    return resources.files("difflog").joinpath(f"data/{name}").read_text()


def _program_text(path) -> tuple[str, str]:
    if path is None:
        text = _packaged("kinship.dsr")
        return text, "builtin:kinship.dsr"
    return _read(path), str(path)


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, inputs: dict[str, str], seeds: dict) -> Path:
    """Config, seeds and input digests; written before any work starts."""
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "seeds": seeds,
        "inputs": inputs,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_rules(path) -> RuleWeightStore:
    """A ``.npz`` checkpoint or any priors/export text file."""
    p = Path(path)
    if not p.exists():
        raise InputError(f"checkpoint {path} does not exist")
    if p.suffix == ".npz":
        try:
            store, _ = load_checkpoint(p)
        except (ValueError, KeyError, OSError) as exc:
            raise InputError(f"bad checkpoint {path}: {exc}") from None
        return store
    return RuleWeightStore.from_priors(parse_rule_priors(_read(p)))


def _default_threads() -> int:
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    train_counts = parse_counts(args.train)
    test_counts = parse_counts(args.test)
    oracle_text = _read(args.oracle) if args.oracle else None
    out = Path(args.out)
    inputs = {"oracle": _digest(oracle_text or _packaged("oracle.priors"))}
    write_manifest(out, "gen-data", {
        "train": train_counts, "test": test_counts, "distractors": args.distractors,
    }, inputs, {"seed": args.seed})
    paths = {}
    for stream, (name, counts) in enumerate((("train", train_counts), ("test", test_counts))):
        spec = GenSpec(counts, seed=args.seed, distractors=args.distractors, stream=stream,
                       oracle_text=oracle_text)
        path = out / f"{name}.jsonl"
        path.write_text(generate_dataset(spec))
        paths[name] = path
    for name, path in paths.items():
        n = sum(1 for line in path.read_text().splitlines() if line.strip())
        print(f"{name}\t{n}\t{path}\tsha256={sha256_file(path)}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        w1=args.w1, w2=args.w2, w_result_ic=args.w_result_ic, w_rule_ic=args.w_rule_ic,
        sample_n=args.sample_rules, top_n=args.top_rules, batch_size=args.batch_size,
        epochs=args.epochs, lr_rules=args.lr_rules, lr_facts=args.lr_facts,
        toggle_every=args.toggle_every, topk=None if args.topk == 0 else args.topk,
        max_iters=args.max_iters, init_high=args.init_high, learn_facts=args.learn_facts,
        seed=args.seed, threads=args.threads,
    )


def cmd_train(args) -> int:
    from .plotting import plot_loss

    program_text, program_src = _program_text(args.program)
    compiled = compile_program(parse_program(program_text))
    train_text = _read(args.train)
    dataset = parse_dataset(train_text)
    priors = parse_rule_priors(_read(args.priors)) if args.priors else {}
    config = _train_config(args)
    constraints = Constraints(
        compiled.result_ics if config.w_result_ic > 0 else (),
        compiled.rule_ics if config.w_rule_ic > 0 else (),
    )
    out = Path(args.out)
    inputs = {"program": _digest(program_text), "train": sha256_file(args.train)}
    if args.priors:
        inputs["priors"] = sha256_file(args.priors)
    cfg = config.to_dict()
    cfg.pop("threads")  # never changes results, so it stays out of the manifest
    write_manifest(out, "train", {**cfg, "program": program_src}, inputs, {"seed": config.seed})

    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w") as fh:
        def on_epoch(record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            print(f"epoch {record['epoch']:3d}  loss {record['loss']:.4f}  acc {record['accuracy']:.4f}",
                  file=sys.stderr)

        t0 = time.perf_counter()
        result = train(dataset, config, constraints, priors, compiled.fixed_rules, on_epoch)
        elapsed = time.perf_counter() - t0
    save_checkpoint(out / "checkpoint.npz", result.store, result.rule_opt)
    (out / "rules.txt").write_text(export_rules(result.store, args.export_top))
    plot_loss(result.batch_losses, out / "loss.png", result.metrics)
    print(f"trained {len(dataset)} samples for {config.epochs} epochs in {elapsed:.1f}s; "
          f"checkpoint {out / 'checkpoint.npz'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .plotting import plot_accuracy_by_k

    store = _load_rules(args.checkpoint)
    program_text, _ = _program_text(args.program)
    compiled = compile_program(parse_program(program_text))
    dataset = parse_dataset(_read(args.test))
    config = TrainConfig(top_n=args.top_rules, topk=None if args.topk == 0 else args.topk,
                         max_iters=args.max_iters, threads=args.threads)
    ev = evaluate(dataset, store, config, compiled.fixed_rules)
    records = [
        {"k": k, "n": ev["count_k"][k], "accuracy": acc} for k, acc in ev["per_k"].items()
    ]
    if dataset:
        records.append({"k": "all", "n": ev["n"], "accuracy": ev["overall"]})
    print(f"{'k':>4}  {'n':>5}  {'accuracy':>8}")
    for r in records:
        print(f"{r['k']:>4}  {r['n']:>5}  {100 * r['accuracy']:7.2f}%")
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text("".join(json.dumps(r) + "\n" for r in records))
    if ev["per_k"]:
        plot_accuracy_by_k(ev["per_k"], report.with_suffix(".png"))
    return EXIT_OK


def cmd_export_rules(args) -> int:
    store = _load_rules(args.checkpoint)
    sys.stdout.write(export_rules(store, args.top))
    if args.match:
        reference = parse_rule_priors(_read(args.match))
        wanted = {t for t in reference if t.kind.value == "composite"}
        hits = sum(t in wanted for t, _ in top_rules(store, args.top))
        print(f"matches: {hits}/{args.top} (reference has {len(wanted)} rules)")
    return EXIT_OK


def _describe_vars(trace, rules) -> dict[int, str]:
    names = {}
    for (rel, s, o), v in trace.fact_vars.items():
        names[v] = f"{KINSHIP.name(rel)}({s},{o})"
    for (rule, _), v in zip(rules, trace.rule_vars):
        if v is not None:
            names[v] = f"[{rule.render()}]"
    return names


def cmd_infer(args) -> int:
    facts = parse_kb(_read(args.kb))
    if args.checkpoint:
        store = _load_rules(args.checkpoint)
    else:
        store = RuleWeightStore.from_priors(parse_rule_priors(_packaged("oracle.priors")))
    program_text, _ = _program_text(args.program)
    compiled = compile_program(parse_program(program_text))
    chosen = [t for t, w in top_rules(store, args.top_rules) if w > 0]
    rules = _weighted_rules(chosen, store, compiled.fixed_rules)
    k = None if args.topk == 0 else args.topk
    sample = Sample(facts, tuple(args.query), 0, len(facts))
    y, _, trace = forward(sample, rules, k=k, max_iters=args.max_iters)
    print(f"query ({args.query[0]}, {args.query[1]})  K={'inf' if k is None else k}")
    nonzero = [(r, p) for r, p in enumerate(y) if p > 0]
    if not nonzero:
        print("no answer")
        return EXIT_OK
    for r, p in sorted(nonzero, key=lambda x: (-x[1], x[0])):
        print(f"  {KINSHIP.name(r):<16} {p:.6g}")
    best = predict(y)
    print(f"prediction: {KINSHIP.name(best)} {y[best]:.6g}")
    tag = trace.store.tags[(best, *args.query)]
    names = _describe_vars(trace, rules)
    probs = trace.store.probs
    print(f"proofs: {len(tag)}")
    for i, proof in enumerate(tag, 1):
        lits = " ∧ ".join(f"{names[v]}@{probs[v]:.6g}" for v in sorted(proof))
        print(f"  {i}. {proof_prob(proof, probs):.6g}  {lits}")
    return EXIT_OK


def cmd_check_wmc(args) -> int:
    from .selfcheck import run_wmc_suite

    r = run_wmc_suite(args.formulas, args.gradients, args.seed, args.max_vars, args.depth)
    ok_wmc = r.max_abs_err <= 1e-9
    ok_grad = r.max_rel_err <= 1e-4
    print(f"wmc       {r.n_wmc:6d} formulas  max |err| {r.max_abs_err:.3g}  "
          f"{r.wmc_seconds:.1f}s  {'PASS' if ok_wmc else 'FAIL'}")
    print(f"gradient  {r.n_grad:6d} formulas  max rel err {r.max_rel_err:.3g}  "
          f"{r.grad_seconds:.1f}s  {'PASS' if ok_grad else 'FAIL'}")
    return EXIT_OK if ok_wmc and ok_grad else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# argument parsing


def _engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--program", help="program file (default: the packaged kinship program)")
    p.add_argument("--topk", type=int, default=3, help="proofs kept per fact; 0 keeps all")
    p.add_argument("--max-iters", type=int, default=16)
    p.add_argument("--top-rules", type=int, default=150, help="rules used at test time")
    p.add_argument("--threads", type=int, default=_default_threads())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="difflog", description=__doc__)
    parser.add_argument("--version", action="version", version=f"difflog {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate train/test chain datasets")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", default="1000x2,1000x3", help="counts, e.g. 1000x2,1000x3")
    p.add_argument("--test", default="50x2..10", help="counts, e.g. 50x2..10")
    p.add_argument("--distractors", type=int, default=0)
    p.add_argument("--oracle", help="composition table (default: packaged)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="learn rule weights")
    _engine_flags(p)
    p.add_argument("--train", required=True, help="training dataset (.jsonl)")
    p.add_argument("--priors", help="initial rule weights")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr-rules", type=float, default=1e-2)
    p.add_argument("--lr-facts", type=float, default=1e-5)
    p.add_argument("--toggle-every", type=int, default=10)
    p.add_argument("--sample-rules", type=int, default=150)
    p.add_argument("--w1", type=float, default=1.0)
    p.add_argument("--w2", type=float, default=1.0)
    p.add_argument("--w-result-ic", type=float, default=0.1)
    p.add_argument("--w-rule-ic", type=float, default=0.01)
    p.add_argument("--init-high", type=float, default=0.1)
    p.add_argument("--learn-facts", action="store_true")
    p.add_argument("--export-top", type=int, default=92)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-k accuracy of a checkpoint")
    _engine_flags(p)
    p.add_argument("--checkpoint", required=True, help=".npz checkpoint or rule file")
    p.add_argument("--test", required=True)
    p.add_argument("--report", default="report.jsonl")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-rules", help="list the highest-weight rules")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--match", help="reference rule file to count matches against")
    p.set_defaults(func=cmd_export_rules)

    p = sub.add_parser("infer", help="answer one query with proofs")
    _engine_flags(p)
    p.add_argument("--kb", required=True, help="facts, one [prob::]rel(s, o) per line")
    p.add_argument("--query", nargs=2, required=True, metavar=("SUBJECT", "OBJECT"))
    p.add_argument("--checkpoint", help="rule weights (default: packaged oracle table)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("check-wmc", help="compare compiled WMC with enumeration")
    p.add_argument("--formulas", type=int, default=10_000)
    p.add_argument("--gradients", type=int, default=1_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-vars", type=int, default=12)
    p.add_argument("--depth", type=int, default=6)
    p.set_defaults(func=cmd_check_wmc)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ParseError, LogicError, GenerationError) as exc:
        print(f"difflog: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingError, WmcError, EngineError, FloatingPointError) as exc:
        print(f"difflog: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
