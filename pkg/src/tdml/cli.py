"""Command-line runner: ``run``, ``verify`` and ``compare``.

Exit codes: ``run`` returns 0 on an honest completion, 3 when a detection
attributed at least one trainer and 2 on a configuration error.  ``verify``
returns 0 when every section passes, 1 otherwise and 2 when artifacts are
missing.  ``compare`` returns 2 on a schema mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path

from .audit import dumps_json, settle_rewards, verify_directory, verify_training
from .errors import ConfigError, NoPayout, SchemaMismatch
from .ledger import dump_chain
from .simulation import RunResult, Scenario, Simulation, load_scenario
from .store import BlobStore

METRIC_FIELDS = ("pipeline", "epoch", "train_loss", "test_acc", "global_acc", "batches", "local_model_digest")
OUTPUTS = ("public_chain.jsonl", "private_chain.jsonl", "metrics.csv", "detections.jsonl",
           "settlement.json", "scenario.json", "verification.json")


def write_metrics(rows, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def run_to_directory(scenario: Scenario, out: str | Path) -> tuple[RunResult, int]:
    """Execute ``scenario`` and write every artifact under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for name in OUTPUTS:
        (out / name).unlink(missing_ok=True)
    shutil.rmtree(out / "blobs", ignore_errors=True)
    store = BlobStore(out / "blobs")
    result = Simulation(scenario, store).run()

    (out / "scenario.json").write_text(dumps_json(scenario.to_dict()), encoding="utf-8")
    dump_chain(result.public, out / "public_chain.jsonl")
    dump_chain(result.private, out / "private_chain.jsonl")
    write_metrics(result.metrics, out / "metrics.csv")
    with open(out / "detections.jsonl", "w", encoding="utf-8") as fh:
        for report in result.detections:
            fh.write(json.dumps(report.to_json(), sort_keys=True) + "\n")

    report = verify_training(result.public, result.private, store, scenario)
    (out / "verification.json").write_text(dumps_json(report.to_json()), encoding="utf-8")
    try:
        ledger = settle_rewards(result.public, result.private, scenario, report=report)
        settlement = ledger.to_json()
    except NoPayout as exc:
        settlement = {"budget": scenario.budget, "total": 0, "error": str(exc), "entries": []}
    (out / "settlement.json").write_text(dumps_json(settlement), encoding="utf-8")
    return result, result.exit_code


def compare_metrics(a: list[dict], b: list[dict]) -> dict:
    """Per-epoch global accuracy deltas (a - b) and the final-accuracy gap."""
    for rows in (a, b):
        if not rows or not {"epoch", "global_acc"} <= set(rows[0]):
            raise SchemaMismatch("metrics need 'epoch' and 'global_acc' columns")

    def per_epoch(rows):
        out = {}
        for r in rows:
            out.setdefault(int(r["epoch"]), float(r["global_acc"]))
        return out

    ea, eb = per_epoch(a), per_epoch(b)
    common = sorted(set(ea) & set(eb))
    if not common:
        raise SchemaMismatch("the two runs share no epochs")
    table = [{"epoch": e, "a": ea[e], "b": eb[e], "delta": ea[e] - eb[e]} for e in common]
    final_a, final_b = ea[max(ea)], eb[max(eb)]
    return {"rows": table, "final_a": final_a, "final_b": final_b, "final_gap": final_a - final_b}


def _cmd_run(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
        if args.seed is not None:
            scenario = scenario.with_changes(seed=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else Path("runs") / scenario.name
    result, code = run_to_directory(scenario, out)
    final = result.metrics[-1]["global_acc"] if result.metrics else float("nan")
    print(f"{scenario.name}: {scenario.training.epochs} epochs, final global accuracy {final:.4f}, "
          f"{len(result.detections)} detection report(s), artifacts in {out}")
    return code


def _cmd_verify(args) -> int:
    try:
        report = verify_directory(args.directory)
    except (FileNotFoundError, ConfigError) as exc:
        print(f"cannot verify: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(report.to_json(), indent=2, sort_keys=True))
    return 0 if report.ok else 1


def _cmd_compare(args) -> int:
    try:
        summary = compare_metrics(read_metrics(args.a), read_metrics(args.b))
    except (SchemaMismatch, OSError, ValueError, KeyError) as exc:
        print(f"schema mismatch: {exc}", file=sys.stderr)
        return 2
    print("epoch\ta\tb\tdelta")
    for r in summary["rows"]:
        print(f"{r['epoch']}\t{r['a']:.4f}\t{r['b']:.4f}\t{r['delta']:+.4f}")
    print(f"final\t{summary['final_a']:.4f}\t{summary['final_b']:.4f}\t{summary['final_gap']:+.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdml", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log protocol progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute a scenario and write its artifacts")
    p.add_argument("scenario", help="YAML or JSON scenario file")
    p.add_argument("--seed", type=int, default=None, help="override the scenario's master seed")
    p.add_argument("--out", default=None, help="output directory (default runs/<name>)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("verify", help="verify chains, replay training and re-check validations")
    p.add_argument("directory")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("compare", help="per-epoch global accuracy of two metrics.csv files")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
