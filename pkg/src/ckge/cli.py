"""Command line entry point: ``ckge dataset|train|eval|bench``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .adapters import AdapterStore
from .bench import ExperimentPlan, run_plan
from .dataset import (DatasetSpec, build_growing_dataset, load_snapshots, read_named_triples,
                      synthetic_growing_kg, write_dataset)
from .evaluation import CUMULATIVE, SNAPSHOT, evaluate
from .training import MODES, TrainingConfig, run_continual


def _cmd_dataset_build(args) -> int:
    triples, ents, rels = read_named_triples(args.input)
    increment = args.increment
    if increment is None:
        increment = (1.0 - args.initial) / (args.snapshots - 1) if args.snapshots > 1 else 0.0
    spec = DatasetSpec(args.snapshots, args.initial, increment, tuple(args.split), args.seed)
    kg = build_growing_dataset(triples, spec, entity_names=ents, relation_names=rels)
    write_dataset(kg, args.out)
    for i, s in enumerate(kg.stats()):
        print(f"snapshot {i}: N_E={s['num_entities']} N_R={s['num_relations']} N_T={s['num_triples']}")
    return 0


def _cmd_dataset_synth(args) -> int:
    fractions = [float(x) for x in args.entity_fractions.split(",")]
    kg = synthetic_growing_kg(args.entities, args.relations, args.triples, fractions, seed=args.seed)
    write_dataset(kg, args.out)
    for i, s in enumerate(kg.stats()):
        print(f"snapshot {i}: N_E={s['num_entities']} N_R={s['num_relations']} N_T={s['num_triples']}")
    return 0


def _cmd_train(args) -> int:
    kg = load_snapshots(args.data)
    cfg = TrainingConfig(
        margin=args.margin, learning_rate=args.lr, batch_size=args.batch, dim=args.dim,
        r_base=args.r_base, relation_rank=args.relation_rank, num_layers=args.layers,
        negatives_per_positive=args.negatives, patience=args.patience,
        max_epochs=args.epochs, mode=args.mode, scorer=args.scorer, seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(
        {"data": str(Path(args.data).resolve()), "config": cfg.to_dict()}, indent=2))
    report = run_continual(kg, cfg, out_dir=out, setting=args.setting)
    for s, e in zip(report.train_stats, report.eval_reports):
        print(f"snapshot {s.snapshot}: epochs={s.epochs} params={s.trainable_params} "
              f"time={s.train_seconds:.3f}s avg_mrr={e.average['mrr']:.4f}")
    print(f"total training time {report.total_train_seconds:.3f}s")
    return 0


def _cmd_eval(args) -> int:
    run = Path(args.run)
    run_cfg = json.loads((run / "run_config.json").read_text())
    kg = load_snapshots(args.data or run_cfg["data"])
    ckpt = run / "checkpoints" / f"after_{args.snapshot}"
    if not ckpt.is_dir():
        print(f"no checkpoint for snapshot {args.snapshot} under {run}", file=sys.stderr)
        return 2
    view = AdapterStore.load(ckpt).compose()
    report = evaluate(view, kg, args.snapshot, run_cfg["config"]["scorer"], args.setting,
                      keep_ranks=bool(args.ranks_csv), candidates=args.candidates)
    (run / f"eval_{args.snapshot}.json").write_text(json.dumps(report.to_dict(), indent=2))
    if args.ranks_csv:
        with open(args.ranks_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["snapshot", "query", "side", "rank"])
            for j, ranks in report.ranks.items():
                n = len(ranks) // 2
                for q, rank in enumerate(ranks.tolist()):
                    w.writerow([j, q % n, "tail" if q < n else "head", rank])
    for j, m in report.per_snapshot.items():
        print(f"test {j}: " + " ".join(f"{k}={v:.4f}" for k, v in m.items()))
    print("average: " + " ".join(f"{k}={v:.4f}" for k, v in report.average.items()))
    return 0


def _cmd_bench(args) -> int:
    plan = ExperimentPlan.from_json(args.plan)
    table = run_plan(plan, args.out)
    for row in table.rows:
        print(f"{row['dataset']} {row['mode']} {row['config']}: mrr={row['mrr']:.4f} "
              f"time={row['total_train_seconds']:.3f}s")
    for c in table.comparisons:
        print(f"{c['dataset']} vs {c['baseline']}: time saving {100 * c['time_saving']:.1f}%, "
              f"mrr delta {c['mrr_delta']:+.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ckge", description="Continual KG embedding with incremental low-rank adapters")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="build snapshot datasets").add_subparsers(dest="action", required=True)
    b = ds.add_parser("build", help="split a static triple file into snapshots")
    b.add_argument("--input", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--snapshots", type=int, default=5)
    b.add_argument("--initial", type=float, default=0.6)
    b.add_argument("--increment", type=float, default=None,
                   help="fraction per later snapshot (default: the rest split evenly)")
    b.add_argument("--split", type=int, nargs=3, default=[3, 1, 1], metavar=("TRAIN", "VALID", "TEST"))
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=_cmd_dataset_build)

    s = ds.add_parser("synth", help="generate a synthetic growing KG")
    s.add_argument("--out", required=True)
    s.add_argument("--entities", type=int, default=300)
    s.add_argument("--relations", type=int, default=10)
    s.add_argument("--triples", type=int, default=1500)
    s.add_argument("--entity-fractions", default="0.6,0.2,0.2")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_dataset_synth)

    t = sub.add_parser("train", help="train all snapshots in order")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--scorer", default="transe_l1", choices=["transe_l1", "transe_l2", "complex", "rotate"])
    t.add_argument("--mode", default="fastkge", choices=list(MODES))
    t.add_argument("--r-base", type=int, default=100)
    t.add_argument("--relation-rank", type=int, default=20)
    t.add_argument("--layers", type=int, default=5)
    t.add_argument("--dim", type=int, default=200)
    t.add_argument("--margin", type=float, default=1.0)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--batch", type=int, default=512)
    t.add_argument("--negatives", type=int, default=1)
    t.add_argument("--patience", type=int, default=3)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--setting", default="raw", choices=["raw", "filtered"])
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained run at one snapshot")
    e.add_argument("--run", required=True)
    e.add_argument("--snapshot", type=int, required=True)
    e.add_argument("--setting", default="raw", choices=["raw", "filtered"])
    e.add_argument("--candidates", default=CUMULATIVE, choices=[CUMULATIVE, SNAPSHOT])
    e.add_argument("--data", default=None, help="dataset directory (default: the one used for training)")
    e.add_argument("--ranks-csv", default=None)
    e.set_defaults(func=_cmd_eval)

    bp = sub.add_parser("bench", help="run an experiment plan")
    bp.add_argument("--plan", required=True)
    bp.add_argument("--out", required=True)
    bp.set_defaults(func=_cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
