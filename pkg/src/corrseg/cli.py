"""Command-line interface: gen-data, train, eval, suite."""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace

from . import data, model, trainer


def _cmd_gen_data(args):
    kv = data.read_config(args.config)
    cfg = data.DataConfig(
        count=int(kv.get("count", 512)),
        height=int(kv.get("height", 48)),
        width=int(kv.get("width", 48)),
        num_classes=int(kv.get("num_classes", 4)),
        noise_sigma=float(kv.get("noise_sigma", 0.08)),
        color_jitter=float(kv.get("color_jitter", 0.22)),
        min_shapes=int(kv.get("min_shapes", 2)),
        max_shapes=int(kv.get("max_shapes", 5)))
    seed = int(kv.get("seed", 0))
    dataset = data.generate_dataset(cfg, seed)
    data.write_dataset(dataset, args.out)
    print(f"wrote {cfg.count} images to {args.out}")


def _cmd_train(args):
    cfg = trainer.config_from_file(args.config)
    record = trainer.run_experiment(cfg)
    if record.error:
        raise RuntimeError(record.error)
    os.makedirs(args.out, exist_ok=True)
    model.save_checkpoint(os.path.join(args.out, "student.ckpt"), record.student)
    _write_single_run_csv(record, os.path.join(args.out, "metrics.csv"))
    print(f"final mIoU {record.final_miou:.4f} "
          f"({record.wall_time:.1f}s, {cfg.total_steps} steps)")


def _write_single_run_csv(record, path):
    cfg = record.config
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(trainer.CSV_HEADER)
        ml = record.mean_losses()
        base = [cfg.variant, cfg.labeled_ratio, cfg.seed, cfg.noise_rate]
        for step, m in record.evals:
            writer.writerow([trainer._fmt(x) for x in
                             base + ["eval", step, m, "", "", "", ""]])
        writer.writerow([trainer._fmt(x) for x in
                         base + ["final", "", "", record.final_miou,
                                 ml[0], ml[1], ml[2]]])


def _cmd_eval(args):
    net = model.load_checkpoint(args.checkpoint)
    dataset = data.read_dataset(args.data)
    score = trainer.evaluate(net, dataset)
    print(f"mIoU {score:.4f}")


def _cmd_suite(args):
    base = trainer.config_from_file(args.config)
    kv = data.read_config(args.config)
    variants = [v.strip() for v in kv.get("variants", base.variant).split(",")]
    noise_rates = [trainer._parse_float(v)
                   for v in kv.get("noise_rates", "0").split(",")]
    configs = [replace(base, variant=variant, noise_rate=eta, seed=seed)
               for variant in variants
               for eta in noise_rates
               for seed in range(args.seeds)]
    trainer.run_suite(configs, args.out)
    print(f"wrote {args.out} ({len(configs)} runs)")


def main(argv=None):
    parser = argparse.ArgumentParser(prog="corrseg")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="run one training experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("suite", help="run a suite of experiments to CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_suite)

    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except Exception as exc:  # CLI contract: nonzero exit with message
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
