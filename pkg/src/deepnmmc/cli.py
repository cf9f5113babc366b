"""Command-line entry point: ``deepnmmc <subcommand> --config run.yaml``."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import harness
from .dbn import Dbn, encode_batch, load_dbn, save_dbn
from .finetune import finetune, label_log_posterior, load_class_rbm, save_class_rbm, top_layer_inputs


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.from_file(args.config) if args.config else harness.ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out_dir is not None:
        cfg = replace(cfg, out_dir=args.out_dir)
    return cfg


def _codes(cfg, dbn, data):
    inputs = top_layer_inputs(dbn, data.instances)
    return inputs, encode_batch(Dbn([dbn.top]), inputs)


def cmd_pretrain(cfg, args):
    train, _ = harness.load_data(cfg)
    dbn, log = harness.pretrain(cfg, replace(train, labels=None))
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    save_dbn(dbn, cfg.run_dir / "dbn.bin")
    harness.write_metrics_csv(log, cfg.run_dir / "pretrain_log.csv", ["layer", "epoch", "reconstruction_error"])
    print(f"wrote {cfg.run_dir / 'dbn.bin'} (layers {dbn.layer_sizes})")


def cmd_cluster(cfg, args):
    train, _ = harness.load_data(cfg)
    dbn = load_dbn(cfg.run_dir / "dbn.bin")
    _, codes = _codes(cfg, dbn, train)
    transform, result, log = harness.cluster(cfg, codes, train.labels)
    (cfg.run_dir / "clustering.bin").write_bytes(harness.clustering_to_bytes(transform, result.state))
    harness.write_metrics_csv(log, cfg.run_dir / "nmmc_log.csv", ["iteration", "K", "alpha", "objective", "train_ari"])
    print(f"K={result.state.K} alpha={result.state.alpha:.3f}")


def cmd_finetune(cfg, args):
    train, _ = harness.load_data(cfg)
    dbn = load_dbn(cfg.run_dir / "dbn.bin")
    transform, state = harness.clustering_from_bytes((cfg.run_dir / "clustering.bin").read_bytes())
    inputs, _ = _codes(cfg, dbn, train)
    model = finetune(dbn, transform.code_weights(state.thetas), inputs, state.assignments,
                     cfg.cd_config(cfg.finetune_epochs, "finetune"))
    save_class_rbm(model, cfg.run_dir / "class_rbm.bin")
    print(f"wrote {cfg.run_dir / 'class_rbm.bin'}")


def cmd_evaluate(cfg, args):
    train, test = harness.load_data(cfg)
    dbn = load_dbn(cfg.run_dir / "dbn.bin")
    transform, state = harness.clustering_from_bytes((cfg.run_dir / "clustering.bin").read_bytes())
    _, codes_test = _codes(cfg, dbn, test)
    report = harness.ExperimentReport(cfg.seed, cfg.to_dict(), final_K=state.K)
    report.metrics["pretrain"] = {
        "train": harness.score(state.assignments, train.labels),
        "test": harness.score(state.predict(transform.apply(codes_test)), test.labels),
    }
    ckpt = cfg.run_dir / "class_rbm.bin"
    if ckpt.exists():
        model = load_class_rbm(ckpt)
        report.metrics["finetune"] = {
            split: harness.score(np.argmax(label_log_posterior(model, _codes(cfg, dbn, d)[0]), axis=1), d.labels)
            for split, d in (("train", train), ("test", test))
        }
    harness.write_metrics_csv(harness.metric_rows(report), cfg.run_dir / "metrics.csv", harness.METRIC_COLUMNS)
    _print_metrics(report)


def _print_metrics(report):
    for row in harness.metric_rows(report):
        print(f"seed {row['seed']} {row['stage']:>9} {row['split']:>5}  ARI {row['ari']:.3f}  "
              f"F {row['f']:.3f}  clusters {row['clusters']}")


def cmd_run_all(cfg, args):
    seeds = args.seeds if args.seeds else [cfg.seed]
    reports = harness.run_seeds(cfg, seeds)
    for report in reports:
        _print_metrics(report)
    for row in harness.summarize(reports):
        if row["metric"] == "ari":
            print(f"{row['stage']:>9} {row['split']:>5}  ARI {row['mean']:.3f} +- {row['std']:.3f} (n={row['n']})")


def cmd_compare_dpm(cfg, args):
    train, _ = harness.load_data(cfg)
    path = cfg.run_dir / "dbn.bin"
    if path.exists():
        dbn = load_dbn(path)
    else:
        dbn, _ = harness.pretrain(cfg, replace(train, labels=None))
    inputs, codes = _codes(cfg, dbn, train)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = args.seeds if args.seeds else [cfg.seed]
    rows, summary = harness.compare_nmmc_dpm(cfg, codes, train.labels, seeds, args.iterations)
    harness.write_metrics_csv(rows, out / "compare_log.csv", harness.COMPARE_COLUMNS)
    harness.write_metrics_csv(summary, out / "compare_summary.csv",
                              ["method", "seed", "final_ari", "final_K", "mean_sweep_ms"])
    for row in summary:
        print(f"{row['method']:>5} seed {row['seed']}  ARI {row['final_ari']:.3f}  K {row['final_K']}  "
              f"{row['mean_sweep_ms']:.0f} ms/sweep")
    if args.dims or args.sizes:
        by_dim = harness.timing_codes(cfg, dbn, inputs, args.dims or [dbn.top.n_hidden])
        timing = harness.timing_study(cfg, by_dim, args.sizes, args.timing_sweeps)
        harness.write_metrics_csv(timing, out / "timing.csv", harness.TIMING_COLUMNS)
        for row in timing:
            print(f"{row['axis']}={row['value']}: nmmc {row['nmmc_ms']:.0f} ms, dpm {row['dpm_ms']:.0f} ms")


def cmd_export_weights(cfg, args):
    dbn = load_dbn(args.checkpoint or cfg.run_dir / "dbn.bin")
    tile = tuple(int(v) for v in args.tile.split("x")) if args.tile else None
    out = args.out or str(cfg.run_dir / f"weights_layer{args.layer}.pgm")
    h, w = harness.export_weight_images(dbn.layers[args.layer], out, tile)
    print(f"wrote {out} ({w}x{h})")


COMMANDS = {
    "pretrain": cmd_pretrain,
    "cluster": cmd_cluster,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "run-all": cmd_run_all,
    "compare-dpm": cmd_compare_dpm,
    "export-weights": cmd_export_weights,
}


def _ints(text):
    return [int(v) for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepnmmc", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file of ExperimentConfig fields")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir")
    common.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads (1 for reproducible runs)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("run-all", "compare-dpm"):
            p.add_argument("--seeds", type=_ints, help="comma-separated seeds")
        if name == "compare-dpm":
            p.add_argument("--iterations", type=int)
            p.add_argument("--dims", type=_ints, default=[])
            p.add_argument("--sizes", type=_ints, default=[])
            p.add_argument("--timing-sweeps", type=int, default=3)
        if name == "export-weights":
            p.add_argument("--checkpoint")
            p.add_argument("--layer", type=int, default=0)
            p.add_argument("--tile", help="HxW of each unit's image")
            p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        if args.threads:
            with threadpool_limits(args.threads):
                COMMANDS[args.command](cfg, args)
        else:
            COMMANDS[args.command](cfg, args)
    except (harness.StageError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
