"""Command-line entry point.

Subcommands: gen-data, train, eval, export-similarity, ablate. Every
subcommand accepts ``--config FILE`` (key = value lines) and repeated
``--set key=value`` overrides. Exit codes: 0 success, 2 configuration
error, 3 data error, 4 contract violation, 1 unexpected failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .checkpoint import load_arrays
from .config import Config, load_config_file
from .errors import ConfigError, ContractError, DataParseError, DimensionError
from .synth import DatasetManifest, PreferenceModel, generate_dataset
from .training import (diagonal_offdiagonal_means, evaluate_alignment,
                       evaluate_cvr, export_similarity, load_dataset, log_kv,
                       model_config_from, run_ablation, run_training,
                       select_holdout)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CONTRACT = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="camenn",
        description="Cross-modal multi-task trainer over a gated expert mixture")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug-level logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
            ("gen-data", "generate a synthetic dataset"),
            ("train", "train a model and write checkpoints + report"),
            ("eval", "evaluate a checkpoint on the held-out test split"),
            ("export-similarity", "write a text/image cosine-similarity grid"),
            ("ablate", "train every expert kind over multiple seeds")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="path to a key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, help="shorthand for train.seed")
        if name == "train":
            p.add_argument("--resume", action="store_true",
                           help="continue from out.dir/last.ckpt")
        if name in ("eval", "export-similarity"):
            p.add_argument("--checkpoint", required=True,
                           help="model checkpoint to load")
        if name == "export-similarity":
            p.add_argument("--output", required=True, help="CSV output path")
    return parser


def resolve_config(args) -> Config:
    cfg = load_config_file(args.config) if args.config else Config()
    cfg = cfg.set_from_strings(args.overrides)
    if args.seed is not None:
        cfg = cfg.with_overrides({"train.seed": args.seed})
    return cfg


def _load_model(cfg: Config, checkpoint_path: str):
    from .model import CameNNModel
    bundle = load_dataset(cfg)
    model = CameNNModel(model_config_from(cfg, bundle.num_users,
                                          cfg["train.seed"]), bundle.vocab)
    model.load_arrays(load_arrays(checkpoint_path))
    return model, bundle


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    manifest = DatasetManifest(
        seed=cfg["data.seed"],
        num_concepts=cfg["data.num_concepts"],
        signature_groups=cfg["data.signature_groups"],
        template_groups=cfg["data.template_groups"],
        num_items=cfg["data.num_items"],
        num_users=cfg["data.num_users"],
        num_interactions=cfg["data.num_interactions"],
        text_corruption_rate=cfg["data.text_corruption_rate"],
        image_corruption_rate=cfg["data.image_corruption_rate"],
        split_fraction=cfg["data.split_fraction"],
        preference=PreferenceModel(gain=cfg["data.preference_gain"],
                                   pos_fraction=cfg["data.pos_fraction"],
                                   noise_std=cfg["data.preference_noise"],
                                   popularity_spread=cfg["data.popularity_spread"]))
    generate_dataset(manifest, cfg["data.dir"])
    log_kv(event="gen_data", dir=cfg["data.dir"], items=manifest.num_items,
           interactions=manifest.num_interactions)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    result = run_training(cfg, resume=getattr(args, "resume", False))
    print(f"best_checkpoint={result.best_checkpoint}")
    print(f"cvr_auc={result.report.cvr_auc:.6f}")
    print(f"ita_accuracy={result.report.ita_accuracy:.6f}")
    print(f"tia_accuracy={result.report.tia_accuracy:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .tasks import build_cvr_batch
    from .synth import split_dataset
    cfg = resolve_config(args)
    model, bundle = _load_model(cfg, args.checkpoint)
    _, test = split_dataset(bundle.interactions, cfg["data.split_fraction"],
                            cfg["data.seed"])
    max_eval = cfg["eval.max_examples"]
    if test:
        rows = build_cvr_batch(test, rng_seed=cfg["train.seed"],
                               max_history=cfg["model.max_behavior"]).rows
        auc_value, n = evaluate_cvr(model, rows, bundle.by_id, max_eval,
                                    rng_seed=cfg["train.seed"])
        print(f"cvr_auc={auc_value:.6f} examples={n}")
    ita = evaluate_alignment(model, "ita", bundle.catalog[:32],
                             cfg["eval.negative_ratio"], rng_seed=31,
                             max_examples=max_eval)
    tia = evaluate_alignment(model, "tia", bundle.catalog[:32],
                             cfg["eval.negative_ratio"], rng_seed=32,
                             max_examples=max_eval)
    print(f"ita_accuracy={ita:.6f}")
    print(f"tia_accuracy={tia:.6f}")
    return EXIT_OK


def cmd_export_similarity(args) -> int:
    cfg = resolve_config(args)
    model, bundle = _load_model(cfg, args.checkpoint)
    holdout = cfg["data.holdout_items"]
    items = (select_holdout(bundle.catalog, holdout) if holdout > 0
             else bundle.catalog)
    matrix = export_similarity(items, model, args.output)
    diag, off = diagonal_offdiagonal_means(matrix)
    print(f"items={len(items)} diagonal_mean={diag:.6f} "
          f"offdiagonal_mean={off:.6f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    rows = run_ablation(cfg)
    print(f"{'expert_kind':<14} {'mean_auc':>10} {'std':>8}  per-seed")
    for row in rows:
        cells = " ".join(f"{a:.4f}" for a in row.aucs)
        print(f"{row.expert_kind:<14} {row.mean:>10.4f} {row.std:>8.4f}  {cells}")
    print(f"table={os.path.join(cfg['out.dir'], 'ablation.csv')}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-similarity": cmd_export_similarity,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataParseError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ContractError, DimensionError) as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except Exception as exc:  # pragma: no cover - safety net
        print(f"unexpected error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
