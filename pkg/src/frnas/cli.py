"""Command-line front end: ``frnas <subcommand> --out DIR``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import _accel
from .data import SyntheticSpaceConfig, default_synthetic_config, gen_synthetic, load_jsonl, write_jsonl
from .evaluation import irg_diff_matrix, kendall_tau, run_experiment, write_matrix_csv
from .gin import GraphBatch
from .graph import OpVocabulary
from .predictor import Variant, embed, load_checkpoint, predict, save_checkpoint
from .training import TrainConfig, train_predictor

log = logging.getLogger("frnas")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key=value training config file")
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=type(f.default),
                       default=None)


def _train_config(args) -> TrainConfig:
    base = TrainConfig.from_file(args.config).to_dict() if args.config else TrainConfig().to_dict()
    for f in dataclasses.fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            base[f.name] = value
    return TrainConfig(**base)


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path, help="JSONL dataset (default: synthetic space)")
    p.add_argument("--vocab", type=Path, help="op vocabulary file for --data")
    p.add_argument("--synth-config", type=Path, help="synthetic space config (JSON)")
    p.add_argument("--n-records", type=int, default=2000,
                   help="graphs to generate when no --data is given")


def _load_data(args):
    if args.data is not None:
        if args.vocab is None:
            raise SystemExit("--data requires --vocab")
        vocab = OpVocabulary.from_file(args.vocab)
        return load_jsonl(args.data, vocab), vocab
    cfg = (SyntheticSpaceConfig.from_file(args.synth_config) if args.synth_config
           else default_synthetic_config())
    return gen_synthetic(args.n_records, cfg), cfg.vocab


def cmd_gen_synth(args) -> None:
    cfg = (SyntheticSpaceConfig.from_file(args.config) if args.config
           else default_synthetic_config())
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(SyntheticSpaceConfig)
                 if getattr(args, f.name, None) is not None}
    cfg = dataclasses.replace(cfg, **overrides)
    records = gen_synthetic(args.n, cfg)
    write_jsonl(records, args.out / "dataset.jsonl", cfg.vocab)
    cfg.vocab.to_file(args.out / "vocab.txt")
    cfg.to_file(args.out / "synthetic_config.json")
    print(f"wrote {len(records)} records to {args.out / 'dataset.jsonl'}")


def cmd_train(args) -> None:
    records, vocab = _load_data(args)
    cfg = dataclasses.replace(_train_config(args), seed=args.seed)
    params, history = train_predictor(records, cfg, args.variant, vocab)
    save_checkpoint(params, args.out / "model.json")
    history.to_csv(args.out / "history.csv")
    vocab.to_file(args.out / "vocab.txt")
    print(f"final l1={history.l1[-1]:.4f} l2={history.l2[-1]:.4f}; model at {args.out / 'model.json'}")


def cmd_eval(args) -> None:
    records, vocab = _load_data(args)
    params = load_checkpoint(args.model)
    batch = GraphBatch.from_graphs([r.graph for r in records], vocab)
    pred = predict(params, batch)
    truth = np.array([r.error_pct for r in records])
    tau = kendall_tau(pred, truth)
    with open(args.out / "predictions.csv", "w", encoding="utf-8") as fh:
        fh.write("id,error_pct,predicted\n")
        for r, p in zip(records, pred):
            fh.write(f"{r.id},{r.error_pct:.6f},{p:.6f}\n")
    print(f"kendall tau = {tau:.4f} over {len(records)} architectures")


def cmd_experiment(args) -> None:
    records, vocab = _load_data(args)
    cfg = _train_config(args)
    summary = run_experiment(records, vocab, args.variants, args.train_sizes, args.trials,
                             args.test_size, cfg, base_seed=args.seed)
    summary.write_summary_csv(args.out / "summary.csv")
    summary.write_trials_csv(args.out / "trials.csv")
    for r in summary.rows:
        print(f"{r.variant:>20s} n={r.train_size:<4d} tau={r.mean_tau:.4f} "
              f"+/- {r.sem_tau:.4f} ({r.n_trials} trials)")


def cmd_analyze_irg(args) -> None:
    records, vocab = _load_data(args)
    params = load_checkpoint(args.model)
    if not params.variant.two_branch:
        raise SystemExit(f"variant {params.variant.value} has a single encoder")
    rng = np.random.default_rng(args.seed)
    idx = np.sort(rng.choice(len(records), size=min(args.n_graphs, len(records)), replace=False))
    batch = GraphBatch.from_graphs([records[i].graph for i in idx], vocab)
    h_f, h_r = embed(params, batch)
    diff = irg_diff_matrix(h_f, h_r)
    write_matrix_csv(diff, args.out / "irg_diff.csv")
    with open(args.out / "irg_ids.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(records[i].id for i in idx) + "\n")
    print(f"mean diff entry = {diff.mean():.6f} over {len(idx)} graphs")


def cmd_grad_check(args) -> None:
    from .checks import predictor_grad_check

    worst = 0.0
    for s in range(args.seed, args.seed + args.n_seeds):
        err = predictor_grad_check(s, variant=args.variant)
        worst = max(worst, err)
        print(f"seed {s}: max relative error {err:.3e}")
    ok = worst < args.tol
    print(f"{'PASS' if ok else 'FAIL'}: worst {worst:.3e} (tolerance {args.tol:g})")
    if not ok:
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="frnas", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, default=Path("."))
        p.set_defaults(fn=fn)
        return p

    p = add("gen-synth", cmd_gen_synth, "generate a synthetic dataset")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--config", type=Path)
    for f in dataclasses.fields(SyntheticSpaceConfig):
        if f.name in ("seed",) or isinstance(f.default, tuple):
            continue
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=type(f.default),
                       default=None)

    p = add("train", cmd_train, "train one predictor")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--variant", default="fr", type=Variant.parse)

    p = add("eval", cmd_eval, "kendall tau of a saved predictor")
    _add_data_flags(p)
    p.add_argument("--model", type=Path, required=True)

    p = add("experiment", cmd_experiment, "paired multi-trial comparison")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--variants", nargs="+", type=Variant.parse,
                   default=[Variant.FR, Variant.FORWARD_ONLY])
    p.add_argument("--train-sizes", nargs="+", type=int, default=[50, 400])
    p.add_argument("--trials", type=int, default=30)
    p.add_argument("--test-size", type=int, default=1000)

    p = add("analyze-irg", cmd_analyze_irg, "embedding distance difference matrix")
    _add_data_flags(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--n-graphs", type=int, default=32)

    p = add("grad-check", cmd_grad_check, "finite-difference check of predictor gradients")
    p.add_argument("--n-seeds", type=int, default=20)
    p.add_argument("--variant", default="fr", type=Variant.parse)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log.info("kernel backend: %s", _accel.backend())
    args.out.mkdir(parents=True, exist_ok=True)
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
