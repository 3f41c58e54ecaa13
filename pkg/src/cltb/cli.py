"""Command-line front-end: train, attack-transfer, analysis and reporting.

Exit codes: 0 on success, 2 on usage/config errors, 1 on runtime errors.
Diagnostics go to stderr; results land in files under the output directory,
each command writing a manifest with the digest of every artifact it emitted.
"""

from __future__ import annotations

import argparse
import os
import re
import sys
import time

import numpy as np

from . import benchmarks, defenses, metrics, models, reports, strategies
from .attacks import AttackSpec, AttackSpecError, craft
from .config import ConfigError, ExperimentConfig, config_digest, load_config
from .data import cumulative_test


class RuntimeFailure(RuntimeError):
    pass


def _log(msg: str):
    print(msg, file=sys.stderr)


def _ensure_dir(path: str):
    os.makedirs(path, exist_ok=True)


def _load_stream(cfg: ExperimentConfig):
    root = benchmarks.resolve_data_root(cfg.data_root or None)
    return benchmarks.load_stream(cfg.benchmark, root, cfg.class_order,
                                  cfg.class_order_seed)


def _checkpoint_path(out_dir: str, stage: int) -> str:
    return os.path.join(out_dir, f"ckpt_stage{stage}.clt")


def load_checkpoint_dir(path: str) -> list[models.Checkpoint]:
    if not os.path.isdir(path):
        raise RuntimeFailure(f"checkpoint directory {path!r} does not exist")
    stages = {}
    for name in os.listdir(path):
        m = re.fullmatch(r"ckpt_stage(\d+)\.clt", name)
        if m:
            stages[int(m.group(1))] = os.path.join(path, name)
    if not stages:
        raise RuntimeFailure(f"no ckpt_stage<t>.clt files in {path!r}")
    t_final = max(stages)
    missing = [t for t in range(1, t_final + 1) if t not in stages]
    if missing:
        raise RuntimeFailure(
            "checkpoint gap: missing stage file(s) " +
            ", ".join(f"ckpt_stage{t}.clt" for t in missing))
    return [models.load_checkpoint(stages[t]) for t in range(1, t_final + 1)]


def _write_config_echo(cfg_path: str, out_dir: str) -> str:
    with open(cfg_path, "r", encoding="utf-8") as f:
        text = f.read()
    echo = os.path.join(out_dir, "config_echo.ini")
    with open(echo, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    return echo


def _run_training(cfg: ExperimentConfig, cfg_path: str, out_dir: str,
                  defended: bool) -> list[str]:
    stream = _load_stream(cfg)
    builder = benchmarks.model_builder(cfg.benchmark)
    defense = defenses.runtime_for(cfg.defense, cfg.master_seed) if defended else None
    label = f"{cfg.strategy.strategy}" + (f" + {cfg.defense.mode}" if defended else "")
    _log(f"training {label} on {cfg.benchmark} "
         f"({stream.num_stages} stages, seed {cfg.master_seed})")
    result = strategies.run_scenario(stream, cfg.strategy, builder, defense)
    artifacts = []
    for ckpt in result.checkpoints:
        path = _checkpoint_path(out_dir, ckpt.stage)
        models.save_checkpoint(ckpt, path)
        artifacts.append(path)
    acc_csv = os.path.join(out_dir, "clean_accuracy.csv")
    reports.write_accuracy_csv(acc_csv, result.clean_accuracy)
    artifacts.append(acc_csv)
    artifacts.append(_write_config_echo(cfg_path, out_dir))
    _log("clean accuracy per stage: " +
         ", ".join(f"{a:.4f}" for a in result.clean_accuracy))
    return artifacts


def _run_transfer(cfg: ExperimentConfig, checkpoints, stream, out_dir: str,
                  workers: int, use_nme: bool) -> list[str]:
    specs = cfg.attack_specs()
    _log("transfer matrix: methods " + ", ".join(s.method for s in specs))
    matrix = metrics.transfer_matrix(checkpoints, stream, specs,
                                     use_nme=use_nme, workers=workers)
    csv_path = os.path.join(out_dir, "transfer_matrix.csv")
    json_path = os.path.join(out_dir, "transfer_matrix.json")
    reports.write_transfer_csv(csv_path, matrix)
    settings = {
        "epsilon": cfg.epsilon,
        "iterations": cfg.iterations,
        "step_size": cfg.step_size if cfg.step_size is not None else cfg.epsilon / cfg.iterations,
        "random_start": cfg.random_start,
        "square_queries": cfg.square_queries,
        "classifier": "nme" if use_nme else "masked-argmax",
        "apgd_schedule": {
            "p1": 0.22, "min_fraction": 0.06, "decrement": 0.03,
            "rho": 0.75, "momentum": 0.75, "initial_step_factor": 2.0,
        },
    }
    reports.write_json(json_path, reports.transfer_payload(matrix, settings))
    for method in matrix.methods:
        row = ", ".join("undef" if v is None else f"{v:.4f}" for v in matrix.row(method))
        _log(f"  {method}: {row}")
    return [csv_path, json_path]


def cmd_train(args) -> int:
    t0 = time.time()
    cfg = load_config(args.config)
    out_dir = args.output or cfg.output_dir
    _ensure_dir(out_dir)
    artifacts = _run_training(cfg, args.config, out_dir, defended=False)
    reports.write_manifest(out_dir, "train", config_digest(args.config),
                           artifacts, time.time() - t0)
    return 0


def cmd_transfer(args) -> int:
    t0 = time.time()
    cfg = load_config(args.config)
    out_dir = args.output or cfg.output_dir
    _ensure_dir(out_dir)
    checkpoints = load_checkpoint_dir(args.checkpoints)
    stream = _load_stream(cfg)
    workers = 1 if args.deterministic else max(1, args.workers)
    artifacts = _run_transfer(cfg, checkpoints, stream, out_dir, workers, args.nme)
    reports.write_manifest(out_dir, "transfer", config_digest(args.config),
                           artifacts, time.time() - t0)
    return 0


def cmd_similarity(args) -> int:
    t0 = time.time()
    checkpoints = load_checkpoint_dir(args.checkpoints)
    out_dir = args.output or args.checkpoints
    _ensure_dir(out_dir)
    root = benchmarks.resolve_data_root(args.data_root)
    stream = benchmarks.load_stream(args.data, root)
    transfer_path = args.transfer or os.path.join(args.checkpoints,
                                                  "transfer_matrix.json")
    if not os.path.isfile(transfer_path):
        raise RuntimeFailure(
            f"transfer matrix {transfer_path!r} not found; run the transfer "
            "command first or pass --transfer")
    import json
    with open(transfer_path, "r", encoding="utf-8") as f:
        matrix = reports.matrix_from_payload(json.load(f))
    method = args.attack_method
    if method is None:
        method = "pgd" if "pgd" in matrix.methods else matrix.methods[0]
    if method not in matrix.methods:
        raise RuntimeFailure(f"attack method {method!r} not present in the matrix")
    report = metrics.similarity_report(checkpoints, stream, matrix, method)
    for row in report.rows:
        if row.asr_ratio is None:
            _log(f"warning: undefined ASR ratio at stage {row.stage} "
                 "(rendered as a blank cell)")
    csv_path = os.path.join(out_dir, "similarity.csv")
    svg_path = os.path.join(out_dir, "similarity.svg")
    reports.write_similarity_csv(csv_path, report)
    reports.write_similarity_svg(svg_path, report)
    def show(v):
        return "undefined" if v is None else f"{v:.4f}"
    _log(f"pearson r (cosine vs ASR ratio): {show(report.pearson_cosine)}")
    _log(f"pearson r (CKA vs ASR ratio):    {show(report.pearson_cka)}")
    reports.write_manifest(out_dir, "similarity", "", [csv_path, svg_path],
                           time.time() - t0)
    return 0


def cmd_complexity(args) -> int:
    t0 = time.time()
    checkpoints = load_checkpoint_dir(args.checkpoints)
    out_dir = args.output or args.checkpoints
    _ensure_dir(out_dir)
    root = benchmarks.resolve_data_root(args.data_root)
    stream = benchmarks.load_stream(args.data, root)
    n = args.samples if args.samples > 0 else None
    rows = metrics.complexity_report(checkpoints, stream, n,
                                     args.iterations, args.tolerance)
    csv_path = os.path.join(out_dir, "complexity.csv")
    svg_path = os.path.join(out_dir, "complexity.svg")
    reports.write_complexity_csv(csv_path, rows)
    reports.write_complexity_svg(svg_path, rows)
    for r in rows:
        flag = "" if r.hessian_converged else " (approximate)"
        _log(f"  stage {r.stage}: L={r.lipschitz:.6f} lambda={r.hessian_lmax:.6f}{flag}")
    reports.write_manifest(out_dir, "complexity", "", [csv_path, svg_path],
                           time.time() - t0)
    return 0


_ATTACK_KEYS = {"eps": "epsilon", "k": "iterations", "alpha": "step_size",
                "seed": "seed", "queries": "query_budget",
                "random-start": "random_start"}


def parse_attack_string(text: str) -> AttackSpec:
    """Parse "method" or "method:eps=0.3,k=40,alpha=auto" into an AttackSpec."""
    method, _, rest = text.partition(":")
    kw: dict = {"method": method.strip()}
    if rest:
        for item in rest.split(","):
            key, _, value = item.partition("=")
            key = key.strip()
            if key not in _ATTACK_KEYS:
                raise AttackSpecError(f"unknown attack option {key!r}")
            field = _ATTACK_KEYS[key]
            value = value.strip()
            if field == "random_start":
                kw[field] = value.lower() in ("true", "1", "yes", "on")
            elif field == "step_size":
                kw[field] = None if value == "auto" else float(value)
            elif field in ("iterations", "seed", "query_budget"):
                kw[field] = int(value)
            else:
                kw[field] = float(value)
    return AttackSpec(**kw)


def cmd_visualize(args) -> int:
    t0 = time.time()
    ckpt = models.load_checkpoint(args.checkpoint)
    model = ckpt.model()
    benchmark = benchmarks.benchmark_for_arch(ckpt.arch_id)
    root = benchmarks.resolve_data_root(args.data_root)
    stream = benchmarks.load_stream(benchmark, root)
    test = cumulative_test(stream, stream.num_stages)
    if not 0 <= args.image_index < len(test):
        raise RuntimeFailure(
            f"image index {args.image_index} out of range 0..{len(test) - 1}")
    spec = parse_attack_string(args.attack)
    if spec.epsilon == AttackSpec().epsilon and benchmark == "split-cifar100":
        spec = spec.replace(epsilon=benchmarks.info(benchmark).default_epsilon)
    x = test.images[args.image_index:args.image_index + 1]
    y = test.labels[args.image_index:args.image_index + 1]
    batch = craft(model, x, y, spec, crafting_stage=ckpt.stage)
    out_dir = args.output or os.path.dirname(os.path.abspath(args.checkpoint))
    _ensure_dir(out_dir)
    original = np.clip(np.rint(x[0] * 255.0), 0, 255).astype(np.uint8)
    delta = batch.perturbed[0] - x[0]
    artifacts = reports.write_image_pair(out_dir, f"original_{args.image_index}",
                                         original)
    artifacts += reports.write_image_pair(out_dir, f"perturbation_{args.image_index}",
                                          reports.rescale_to_bytes(delta))
    _log(f"attack success on crafting model: {bool(batch.success[0])}")
    reports.write_manifest(out_dir, "visualize", "", artifacts, time.time() - t0)
    return 0


def cmd_defend(args) -> int:
    t0 = time.time()
    cfg = load_config(args.config)
    if cfg.defense.mode == "none":
        raise ConfigError("defend requires [defense] mode other than 'none'")
    out_dir = args.output or cfg.output_dir
    _ensure_dir(out_dir)
    artifacts = _run_training(cfg, args.config, out_dir, defended=True)
    checkpoints = load_checkpoint_dir(out_dir)
    stream = _load_stream(cfg)
    workers = 1 if args.deterministic else max(1, args.workers)
    artifacts += _run_transfer(cfg, checkpoints, stream, out_dir, workers, False)
    reports.write_manifest(out_dir, "defend", config_digest(args.config),
                           artifacts, time.time() - t0)
    return 0


def cmd_report(args) -> int:
    t0 = time.time()
    report_path = os.path.join(args.dir, "report.md")
    included = reports.write_report(args.dir, report_path)
    _log("collated: " + ", ".join(included))
    reports.write_manifest(args.dir, "report", "", [report_path], time.time() - t0)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cltb",
        description="Class-incremental training, cross-stage adversarial "
                    "transfer and its analysis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one strategy through all stages")
    p.add_argument("--config", required=True)
    p.add_argument("--output", help="override the config's output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="attack earlier stages, evaluate on the final model")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--output", help="override the config's output directory")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--deterministic", action="store_true",
                   help="force single-threaded cell evaluation")
    p.add_argument("--nme", action="store_true",
                   help="classify with nearest exemplar means (iCaRL checkpoints)")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("similarity", help="cosine/CKA similarity vs ASR ratio")
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--data", required=True, choices=list(benchmarks.BENCHMARKS))
    p.add_argument("--transfer", help="transfer_matrix.json path")
    p.add_argument("--attack-method")
    p.add_argument("--output")
    p.add_argument("--data-root")
    p.set_defaults(func=cmd_similarity)

    p = sub.add_parser("complexity", help="per-stage Lipschitz and Hessian metrics")
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--data", required=True, choices=list(benchmarks.BENCHMARKS))
    p.add_argument("--samples", type=int, default=0,
                   help="0 means the full first-stage test set")
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--output")
    p.add_argument("--data-root")
    p.set_defaults(func=cmd_complexity)

    p = sub.add_parser("visualize-perturbation",
                       help="emit one original image and its rescaled perturbation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-index", type=int, required=True)
    p.add_argument("--attack", required=True,
                   help='e.g. "pgd:eps=0.3,k=40" or "fgsm:eps=0.3"')
    p.add_argument("--output")
    p.add_argument("--data-root")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("defend", help="defended training plus its transfer matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--output", help="override the config's output directory")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("report", help="collate CSV artifacts into one markdown bundle")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, AttackSpecError, strategies.StrategyConfigError,
            defenses.DefenseConfigError, benchmarks.BenchmarkNameError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (RuntimeFailure, benchmarks.DatasetMissingError, models.CheckpointError,
            FileNotFoundError, metrics.MetricInputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
