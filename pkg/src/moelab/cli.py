"""Command-line front end.

Subcommands: gen, pretrain, adapt, select, eval, analyze, repro. Every
command echoes its resolved configuration, validates before computing,
and uses exit codes 0 (success), 1 (runtime failure), 2 (configuration
failure). MOELAB_OUT_ROOT overrides relative output paths; MOELAB_THREADS
caps BLAS threads (must be set before numpy loads, which this module
guarantees by importing heavy modules lazily).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

if os.environ.get("MOELAB_THREADS"):
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, os.environ["MOELAB_THREADS"])


def _out_path(path: str) -> Path:
    root = os.environ.get("MOELAB_OUT_ROOT")
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _echo_config(name: str, payload: dict) -> None:
    print(f"[moelab {name}] resolved config:")
    print(json.dumps(payload, sort_keys=True, indent=1, default=str))


def cmd_gen(args) -> int:
    from .corpus import CorpusConfig, build_manifest, default_corpus_config, emit_corpus

    if args.config:
        cfg = CorpusConfig.from_dict(_load_json(args.config))
    else:
        cfg = default_corpus_config(seed=args.seed if args.seed is not None else 0)
    if args.seed is not None:
        cfg.seed = args.seed
    out = _out_path(args.out)
    _echo_config("gen", cfg.to_dict())
    report = emit_corpus(build_manifest(cfg), out)
    print(f"wrote corpus for {len(report['languages'])} languages to {out}")
    print("pair overlaps (target -> achieved):")
    for key in sorted(report["achieved_overlap"]):
        target = report["target_overlap"][key]
        shown = "-" if target is None else f"{target:.3f}"
        print(f"  {key}: {shown} -> {report['achieved_overlap'][key]:.4f}")
    return 0


def cmd_pretrain(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .model import ModelConfig
    from .telemetry import write_bundle
    from .trainer import RunConfig, pretrain, write_loss_log

    spec = _load_json(args.config)
    mcfg = ModelConfig(**spec.get("model", {}))
    run_spec = dict(spec.get("run", {}))
    if args.seed is not None:
        run_spec["seed"] = args.seed
    if args.lr is not None:
        run_spec["lr"] = args.lr
    run_spec["languages"] = tuple(run_spec.get("languages", ()))
    run = RunConfig(**run_spec)
    corpus_dir = Path(spec["corpus_dir"])
    out = _out_path(args.out)
    _echo_config("pretrain", {"model": mcfg.to_dict(), "run": run.to_dict(),
                              "corpus_dir": str(corpus_dir)})
    init = None
    if spec.get("init_checkpoint"):
        init = load_checkpoint(spec["init_checkpoint"])
    result = pretrain(mcfg, corpus_dir, run, init_checkpoint=init,
                      snapshot_languages=spec.get("snapshot_languages"),
                      out_dir=out)
    save_checkpoint(result.checkpoint, out / "pretrained.ckpt")
    write_loss_log(result.loss_log, out / "loss.csv")
    for bundle in result.snapshots:
        write_bundle(bundle, out / "telemetry" / f"step_{bundle.step}")
    print(f"final checkpoint at step {result.checkpoint.step} -> {out / 'pretrained.ckpt'}")
    return 0


def cmd_select(args) -> int:
    from .checkpoint import load_checkpoint
    from .model import MoeLM
    from .selection import assemble_plan, compute_gaps, default_layer_set, save_plan
    from .telemetry import snapshot

    spec = _load_json(args.config)
    ckpt = load_checkpoint(spec["checkpoint"])
    model = MoeLM.from_checkpoint(ckpt)
    languages = spec["languages"]
    layers = tuple(args.layers if args.layers else
                   spec.get("layers") or default_layer_set(ckpt.config))
    alpha = args.alpha if args.alpha is not None else spec.get("alpha", 0.01)
    k_shared = args.k_shared if args.k_shared is not None else spec.get("k_shared", 5)
    strategies = [args.strategy] if args.strategy else spec.get("strategies", ["SSFT"])
    targets = spec["targets"]  # target -> anchor
    out = _out_path(args.out)
    _echo_config("select", {"checkpoint": spec["checkpoint"], "languages": languages,
                            "layers": list(layers), "alpha": alpha,
                            "k_shared": k_shared, "strategies": strategies,
                            "targets": targets})
    bundle = snapshot(model, spec["corpus_dir"], languages, step=ckpt.step,
                      layers=list(layers))
    tables = [bundle.activation[layer] for layer in layers]
    gaps = compute_gaps(tables)
    for target, anchor in targets.items():
        base = assemble_plan("SEFT", target, anchor, layers, gaps=gaps, tables=tables,
                             alpha=alpha, k_shared=k_shared, model_config=ckpt.config)
        for strategy in strategies:
            if strategy == "RANDOM_SEFT":
                plan = assemble_plan(strategy, target, anchor, layers, base_seft=base,
                                     seed=args.seed if args.seed is not None else 0,
                                     model_config=ckpt.config)
            elif strategy == "SEFT":
                plan = base
            else:
                plan = assemble_plan(strategy, target, anchor, layers, gaps=gaps,
                                     tables=tables, alpha=alpha, k_shared=k_shared,
                                     model_config=ckpt.config)
            path = out / f"{strategy}_{target}.json"
            save_plan(plan, path)
            sizes = {layer: len(plan.experts.get(layer, {})) for layer in layers}
            flag = " (EMPTY)" if plan.empty else ""
            print(f"{strategy} {target}: experts/layer {sizes}, "
                  f"~{plan.trainable_param_estimate} trainable params{flag} -> {path}")
    return 0


def cmd_adapt(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .selection import load_plan
    from .trainer import RunConfig, adapt, build_mask, sweep, write_loss_log, write_sweep_table

    spec = _load_json(args.config)
    ckpt = load_checkpoint(spec["checkpoint"])
    plan = load_plan(spec["plan"])
    run_spec = dict(spec.get("run", {}))
    if args.seed is not None:
        run_spec["seed"] = args.seed
    if args.lr is not None:
        run_spec["lr"] = args.lr
    run_spec.setdefault("languages", (plan.target,))
    run_spec["languages"] = tuple(run_spec["languages"])
    run = RunConfig(**run_spec)
    mask = build_mask(plan, ckpt.config, freeze_routers=spec.get("freeze_routers", False))
    out = _out_path(args.out)
    _echo_config("adapt", {"checkpoint": spec["checkpoint"], "plan": spec["plan"],
                           "strategy": plan.strategy, "run": run.to_dict()})
    grid = spec.get("sweep_grid")
    if grid:
        res = sweep(ckpt, mask, spec["corpus_dir"], run, grid, plan.target)
        write_sweep_table(res.table, out / "sweep.csv")
        save_checkpoint(res.best_checkpoint, out / "adapted.ckpt")
        print(f"best lr {res.best_lr} -> {out / 'adapted.ckpt'}")
    else:
        result = adapt(ckpt, mask, spec["corpus_dir"], run, out_dir=out)
        save_checkpoint(result.checkpoint, out / "adapted.ckpt")
        write_loss_log(result.loss_log, out / "loss.csv")
        print(f"adapted checkpoint -> {out / 'adapted.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .trainer import eval_perplexity, forgetting_report, write_eval_report

    spec = _load_json(args.config)
    out = _out_path(args.out)
    _echo_config("eval", spec)
    if "before" in spec:
        before = load_checkpoint(spec["before"])
        after = load_checkpoint(spec["after"])
        report = forgetting_report(before, after, spec["corpus_dir"],
                                   spec["anchors"], split=spec.get("split", "test"),
                                   n_resamples=spec.get("n_resamples", 50),
                                   seed=args.seed if args.seed is not None else 0)
        write_eval_report(report, out / "forgetting.csv")
        for row in report.rows:
            mark = " FLAGGED" if row.flagged else ""
            print(f"{row.language}: {row.ref_perplexity:.4f} -> {row.perplexity:.4f} "
                  f"(delta {row.delta:+.4f}, std {row.std:.4f}){mark}")
    else:
        ckpt = load_checkpoint(spec["checkpoint"])
        report = eval_perplexity(ckpt, spec["corpus_dir"], spec["languages"],
                                 split=spec.get("split", "valid"))
        write_eval_report(report, out / "eval.csv")
        for row in report.rows:
            print(f"{row.language}: perplexity {row.perplexity:.4f} "
                  f"({row.token_count} tokens)")
    return 0


def cmd_analyze(args) -> int:
    from .model import ModelConfig
    from .pipeline import analyze_run

    spec = _load_json(args.config)
    mcfg = ModelConfig(**spec.get("model", {}))
    _echo_config("analyze", spec)
    summary = analyze_run(spec["run_root"], spec["languages"], mcfg,
                          phase=spec.get("phase", "phase2"))
    print(json.dumps(summary, sort_keys=True, indent=1))
    return 0


def cmd_repro(args) -> int:
    from .pipeline import Pipeline, PipelineConfig, preset

    if args.config:
        cfg = PipelineConfig.from_dict(_load_json(args.config))
    else:
        cfg = preset(args.preset, seed=args.seed if args.seed is not None else 0)
    if args.seed is not None and cfg.seed != args.seed:
        cfg.seed = args.seed
        cfg.corpus["seed"] = args.seed
    out = _out_path(args.out)
    _echo_config("repro", cfg.to_dict())
    Pipeline(cfg, out).run(resume=args.resume)
    print(f"experiment complete: {out / 'summary.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moelab",
        description="Desk-scale MoE language-model laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    common(p)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("pretrain", help="(continual) pre-training")
    common(p)
    p.add_argument("--lr", type=float)
    p.set_defaults(fn=cmd_pretrain, config_required=True)

    p = sub.add_parser("adapt", help="selective finetuning from a plan")
    common(p)
    p.add_argument("--lr", type=float)
    p.set_defaults(fn=cmd_adapt, config_required=True)

    p = sub.add_parser("select", help="build expert-selection plans")
    common(p)
    p.add_argument("--strategy", choices=["SEFT", "SSFT", "RANDOM_SEFT",
                                          "SEFT_TOP20", "AEFT", "FULL_FT"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--k-shared", dest="k_shared", type=int)
    p.add_argument("--layers", type=int, nargs="+")
    p.set_defaults(fn=cmd_select, config_required=True)

    p = sub.add_parser("eval", help="perplexity / forgetting evaluation")
    common(p)
    p.set_defaults(fn=cmd_eval, config_required=True)

    p = sub.add_parser("analyze", help="entropy/JSD curves and JSD-vs-overlap")
    common(p, out_required=False)
    p.set_defaults(fn=cmd_analyze, config_required=True)

    p = sub.add_parser("repro", help="full experiment pipeline")
    common(p)
    p.add_argument("--preset", default="paper-desk", choices=["paper-desk", "micro"])
    p.add_argument("--resume", action="store_true",
                   help="continue an interrupted experiment")
    p.set_defaults(fn=cmd_repro)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config_required", False) and not args.config:
        parser.error(f"{args.command} requires --config")  # exits 2
    from .errors import ConfigurationError, InputError, MoelabError

    try:
        return args.fn(args)
    except (ConfigurationError, InputError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except MoelabError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
