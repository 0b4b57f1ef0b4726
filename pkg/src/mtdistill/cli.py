"""Command-line surface: gen-data, train, eval, grad-check, ablate, report."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .dataio import (GenerateConfig, RunConfig, World, config_hash,
                     generate_synthetic_world, load_table_oracle, load_world,
                     parse_run_config, run_dir_name, write_checkpoint,
                     write_world)
from .diffcore import ParamStore, gradient_check
from .errors import ConfigError, MtdistillError
from .harness import build_step_loss, evaluate_retrieval, train
from .integration import init_integration
from .losses import LossConfig
from .reporting import read_epoch_log, render_ablation_table, render_epoch_table
from .student import Student
from .teachers import prepare_batch

# The full ablation grid exercised by grad-check.
GRAD_CHECK_GRID = (
    ("gt", "none"), ("clip", "none"), ("albef", "none"),
    ("albef_plus_gt", "none"), ("clip_plus_gt", "none"), ("mt", "none"),
    ("none", "clip_fa"), ("none", "mt_fa"), ("mt", "mt_fa"),
    ("clip", "clip_fa"), ("clip", "mt_fa"), ("mt", "clip_fa"),
)

_EXIT_CODES = {"config": 2, "format": 3, "contract": 4, "numeric": 5,
               "ingestion": 6, "coverage": 7, "generation": 8}


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def _load_config(args) -> RunConfig:
    return parse_run_config(args.config)


def _pick_oracle(cfg: RunConfig, world: World):
    if cfg.data.oracle == "table":
        return load_table_oracle((cfg.base_dir / cfg.data.pair_scores).resolve())
    return world.oracle


def _run_dir(cfg: RunConfig, seed: int, args) -> Path:
    root = Path(args.out_dir) if args.out_dir else cfg.base_dir / "runs"
    out = root / run_dir_name(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_epoch_log(path: Path, records: list[dict]) -> None:
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def _train_once(cfg: RunConfig, seed: int, loss: LossConfig, world: World):
    oracle = _pick_oracle(cfg, world)
    train_cfg = cfg.train_config(seed=seed, loss=loss)
    student_cfg = cfg.student_config(world.train.image_dim, world.train.text_dim)
    return train(train_cfg, world.train, world.val, world.bundle,
                 oracle=oracle if loss.needs_oracle else None,
                 student_cfg=student_cfg,
                 integration_hidden=cfg.integration.hidden,
                 alpha_init=cfg.integration.alpha_init)


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    gen = cfg.generate
    if args.seed is not None:
        gen = dataclasses.replace(gen, seed=args.seed)
    world = generate_synthetic_world(gen)
    out = Path(args.out_dir) if args.out_dir else cfg.world_dir()
    write_world(world, out)
    probe = world.manifest["probe"]
    _say(args, f"world written to {out}")
    _say(args, f"dual teacher test mean R@1: "
               f"{0.5 * (world.manifest['dual_teacher_test']['ir_r1'] + world.manifest['dual_teacher_test']['tr_r1']):.4f}")
    _say(args, f"probe spearman: oracle {probe['oracle_spearman']:.4f} "
               f"vs dual {probe['dual_spearman']:.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.train.seed
    world = load_world(cfg.world_dir())
    loss = cfg.loss_config()
    result = _train_once(cfg, seed, loss, world)
    out = _run_dir(cfg, seed, args)
    _write_epoch_log(out / "epoch_log.ndjson", result.epoch_records)
    meta = {
        "config_hash": config_hash(cfg),
        "seed": seed,
        "loss": loss.label(),
        "student": dataclasses.asdict(result.student.config),
        "best_epoch": result.best_epoch,
        "best_val_mean_r1": result.best_val_mean_r1,
    }
    write_checkpoint(out / "checkpoint_final.mckp", meta, result.params.snapshot())
    result.restore_best()
    write_checkpoint(out / "checkpoint_best.mckp", meta, result.params.snapshot())
    summary = {
        "config_hash": config_hash(cfg), "seed": seed, "loss": loss.label(),
        "epochs": cfg.train.epochs, "best_epoch": result.best_epoch,
        "best_val_mean_r1": result.best_val_mean_r1,
        "final_val": result.final_val.as_dict(),
        "parameter_count": result.params.count(),
    }
    (out / "train_summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    _say(args, f"run directory: {out}")
    _say(args, render_epoch_table(result.epoch_records))
    _say(args, f"best val mean R@1 {result.best_val_mean_r1:.4f} at epoch {result.best_epoch}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.train.seed
    world = load_world(cfg.world_dir())
    out = _run_dir(cfg, seed, args)
    checkpoint = Path(args.checkpoint) if args.checkpoint else out / "checkpoint_best.mckp"
    if not checkpoint.exists():
        raise ConfigError(f"no checkpoint at {checkpoint}; run `train` first")
    meta, state = dataio.read_checkpoint(checkpoint)
    student = Student(cfg.student_config(world.test.image_dim, world.test.text_dim),
                      np.random.default_rng(0))
    store = student.parameter_store()
    store.load({k: v for k, v in state.items() if k in store})
    report = evaluate_retrieval(student, world.test)
    payload = {"checkpoint": checkpoint.name, "split": "test",
               "metrics": report.as_dict(), "meta": meta}
    (out / "eval_report.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    _say(args, json.dumps(report.as_dict(), sort_keys=True))
    return 0


def cmd_grad_check(args) -> int:
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.train.seed
    results = run_grad_check_grid(seed=seed)
    failures = 0
    for label, report in results:
        status = "pass" if report.passed else "FAIL"
        _say(args, f"{label:<18} max_rel_err={report.max_rel_err:.3e} "
                   f"worst={report.worst_param} {status}")
        failures += 0 if report.passed else 1
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        payload = [{"loss": label, "max_rel_err": r.max_rel_err,
                    "worst_param": r.worst_param, "passed": r.passed}
                   for label, r in results]
        (out / "grad_check.json").write_text(json.dumps(payload, indent=2) + "\n")
    return 1 if failures else 0


def run_grad_check_grid(seed: int = 0, batch_size: int = 8, k: int = 3,
                        tolerance: float = 1e-4):
    """Finite-difference verification of every loss branch on a small
    synthetic batch, against every learnable parameter."""
    from .student import StudentConfig

    gen = GenerateConfig(n_train=batch_size, n_val=10, n_test=10,
                         latent_dim=6, dual_visible_dims=4, n_clusters=4,
                         d_image_raw=5, d_text_raw=5, d_dual=6,
                         d_pair_feature=4, seed=seed)
    world = generate_synthetic_world(gen)
    split = world.train
    student_cfg = StudentConfig(image_input_dim=split.image_dim,
                                text_input_dim=split.text_dim,
                                embed_dim=6, depth=2, hidden_multiple=1)
    results = []
    for tdd, tfd in GRAD_CHECK_GRID:
        loss_cfg = LossConfig(tdd=tdd, tfd=tfd, k=k)
        student = Student(student_cfg, np.random.default_rng([seed, 1]))
        integration = init_integration(
            np.random.default_rng([seed, 2]),
            pair_feature_dim=world.oracle.feature_dim, dual_dim=world.bundle.dim,
            embed_dim=student_cfg.embed_dim,
            temperature_init=world.bundle.temperature)
        params = student.parameter_store()
        integration.register(params)
        batch = prepare_batch(world.bundle, split.ids, split.ids, k=k,
                              oracle=world.oracle)

        def objective():
            total, _ = build_step_loss(loss_cfg, student, integration, batch,
                                       split.image_raw, split.text_raw,
                                       normalize_by_batch=True)
            return total

        results.append((loss_cfg.label(), gradient_check(objective, params,
                                                         tolerance=tolerance)))
    return results


def run_ablation(cfg: RunConfig, world: World) -> dict:
    """Train every grid entry across the configured seeds and evaluate each
    best checkpoint on the test split."""
    rows = []
    for entry in cfg.ablate.grid:
        loss = LossConfig(**{"k": cfg.loss.k, **entry})
        per_seed = []
        metric_sums: dict[str, float] = {}
        for seed in cfg.ablate.seeds:
            result = _train_once(cfg, seed, loss, world)
            result.restore_best()
            report = evaluate_retrieval(result.student, world.test)
            per_seed.append(report.mean_r1())
            for key, value in report.as_dict().items():
                if isinstance(value, float):
                    metric_sums[key] = metric_sums.get(key, 0.0) + value
        n = len(cfg.ablate.seeds)
        rows.append({
            "label": loss.label(), "tdd": loss.tdd, "tfd": loss.tfd, "k": loss.k,
            "seeds": list(cfg.ablate.seeds),
            "per_seed_mean_r1": per_seed,
            "mean_r1": sum(per_seed) / n,
            "metrics_mean": {key: s / n for key, s in sorted(metric_sums.items())},
        })
    return {"config_hash": config_hash(cfg), "rows": rows}


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    world = load_world(cfg.world_dir())
    result = run_ablation(cfg, world)
    root = Path(args.out_dir) if args.out_dir else cfg.base_dir / "runs"
    out = root / f"ablate-{config_hash(cfg)}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(result, sort_keys=True, indent=2) + "\n")
    table = render_ablation_table(result)
    (out / "ablation.txt").write_text(table + "\n")
    _say(args, table)
    _say(args, f"ablation written to {out}")
    return 0


def cmd_report(args) -> int:
    if args.run:
        records = read_epoch_log(Path(args.run) / "epoch_log.ndjson")
        print(render_epoch_table(records))
        return 0
    if args.ablation:
        result = json.loads(Path(args.ablation).read_text())
        print(render_ablation_table(result))
        return 0
    raise ConfigError("report needs --run or --ablation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtdistill")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--seed", type=int, default=None, help="override configured seed")
        p.add_argument("--out-dir", default=None, help="output root directory")
        p.add_argument("--quiet", action="store_true")

    common(sub.add_parser("gen-data", help="generate a synthetic world"))
    common(sub.add_parser("train", help="train a student"))
    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p_eval)
    p_eval.add_argument("--checkpoint", default=None)
    common(sub.add_parser("grad-check", help="finite-difference check of every loss branch"))
    common(sub.add_parser("ablate", help="train the configured loss grid and compare"))
    p_report = sub.add_parser("report", help="render epoch logs or ablation grids")
    p_report.add_argument("--run", default=None, help="run directory with epoch_log.ndjson")
    p_report.add_argument("--ablation", default=None, help="ablation.json path")
    p_report.add_argument("--quiet", action="store_true")
    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except MtdistillError as e:
        print(json.dumps({"error": e.label, "message": str(e)}), file=sys.stderr)
        return _EXIT_CODES.get(e.label, 1)


if __name__ == "__main__":
    sys.exit(main())
