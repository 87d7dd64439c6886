"""End-to-end experiment pipeline: gen -> pretrain -> analyze -> select ->
adapt -> forgetting -> summary.

One experiment owns one directory tree; every stage writes its artifacts
and a ``stages/<name>.done`` marker, so an interrupted run resumed with
the same seeds reproduces the uninterrupted artifacts byte-for-byte.
A lock file rejects concurrent invocations on the same directory.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import rng
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .corpus import (CorpusConfig, build_manifest, default_corpus_config, emit_corpus,
                     load_corpus_report, pair_key)
from .errors import ConfigurationError, MoelabError
from .model import ModelConfig, MoeLM, param_shapes
from .selection import (assemble_plan, compute_gaps, default_layer_set, load_plan,
                        save_plan)
from .telemetry import load_bundle, snapshot, spearman_rho, write_bundle
from .trainer import (RunConfig, adapt, build_mask, eval_perplexity,
                      forgetting_report, pretrain, sweep, write_eval_report,
                      write_loss_log, write_sweep_table)

STAGES = ("gen", "phase1", "phase2", "analyze", "select", "adapt",
          "forgetting", "summary")


@dataclass
class PipelineConfig:
    name: str = "paper-desk"
    seed: int = 0
    model: dict = field(default_factory=dict)
    corpus: dict = field(default_factory=dict)
    batch_size: int = 16
    phase1_tokens: int = 1_250_000
    phase2_tokens: int = 3_750_000
    adapt_tokens: int = 250_000
    extended_adapt_factor: float = 3.0
    pretrain_lr: float = 3e-3
    adapt_lr: float = 1e-3
    sweep_grid: list | None = None
    strategies: list = field(default_factory=lambda: [
        "SEFT", "SSFT", "RANDOM_SEFT", "SEFT_TOP20", "AEFT", "FULL_FT"])
    adapt_seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    alpha: float = 0.01
    k_shared: int = 5
    selection_layers: list | None = None
    snapshot_fraction: float = 0.1
    dominant_language: str = "hr0"
    forgetting_strategies: list = field(default_factory=lambda: ["FULL_FT", "SEFT"])
    forgetting_seeds: list = field(default_factory=lambda: [0, 1, 2])
    weight_decay: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(**d)

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.model) if self.model else ModelConfig()

    def corpus_config(self) -> CorpusConfig:
        if self.corpus:
            cfg = CorpusConfig.from_dict(self.corpus)
        else:
            cfg = default_corpus_config(seed=self.seed)
        return cfg

    def layer_set(self, mcfg: ModelConfig) -> tuple:
        if self.selection_layers:
            return tuple(self.selection_layers)
        return default_layer_set(mcfg)


def preset(name: str, seed: int = 0) -> PipelineConfig:
    """Built-in pipeline presets; ``paper-desk`` is the default experiment."""
    if name == "paper-desk":
        cfg = PipelineConfig(name="paper-desk", seed=seed)
        cfg.corpus = default_corpus_config(seed=seed).to_dict()
        return cfg
    if name == "micro":
        model = ModelConfig(n_layers=2, d_model=16, n_heads=2, vocab_size=64,
                            seq_len=32, n_experts=4, top_k=2, expert_hidden=8)
        corpus = default_corpus_config(n_high=2, n_targets=1, seed=seed, vocab_size=64,
                                       lang_vocab_size=24, global_common_size=2,
                                       train_docs=60, valid_docs=10, test_docs=10)
        corpus.doc_len_min, corpus.doc_len_max = 12, 30
        return PipelineConfig(
            name="micro", seed=seed, model=model.to_dict(), corpus=corpus.to_dict(),
            batch_size=4, phase1_tokens=4 * 32 * 20, phase2_tokens=4 * 32 * 30,
            adapt_tokens=4 * 32 * 10, pretrain_lr=2e-3, adapt_lr=1e-3,
            strategies=["SEFT", "SSFT", "RANDOM_SEFT", "FULL_FT"],
            adapt_seeds=[0, 1], forgetting_seeds=[0], snapshot_fraction=0.5,
            alpha=0.005, k_shared=2)
    raise ConfigurationError(f"unknown preset '{name}'")


class RunLock:
    def __init__(self, root: Path):
        self.path = root / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise MoelabError(
                f"run directory {self.path.parent} is locked by another invocation "
                f"(remove {self.path} if stale)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass


class Pipeline:
    def __init__(self, config: PipelineConfig, out_root):
        self.cfg = config
        self.root = Path(out_root)
        self.mcfg = config.model_config()
        self.ccfg = config.corpus_config()
        self.corpus_dir = self.root / "corpus"
        self.stages_dir = self.root / "stages"

    # -- bookkeeping --

    def _marker(self, stage: str) -> Path:
        return self.stages_dir / f"{stage}.done"

    def stage_done(self, stage: str) -> bool:
        return self._marker(stage).exists()

    def _finish(self, stage: str) -> None:
        self.stages_dir.mkdir(parents=True, exist_ok=True)
        self._marker(stage).write_text("done\n")

    def _run_cfg(self, languages, tokens=None, steps=None, lr=None, seed=0) -> RunConfig:
        return RunConfig(batch_size=self.cfg.batch_size, seq_len=self.mcfg.seq_len,
                         token_budget=tokens, steps=steps,
                         lr=self.cfg.pretrain_lr if lr is None else lr,
                         seed=seed, languages=tuple(languages),
                         snapshot_fraction=self.cfg.snapshot_fraction,
                         weight_decay=self.cfg.weight_decay)

    # -- stages --

    def run(self, resume: bool = False, echo=print) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        cfg_path = self.root / "pipeline_config.json"
        resolved = json.dumps(self.cfg.to_dict(), sort_keys=True, indent=1)
        if cfg_path.exists() and not resume:
            raise ConfigurationError(
                f"output root {self.root} already holds an experiment; pass resume "
                f"to continue it")
        if cfg_path.exists() and cfg_path.read_text().strip() != resolved.strip():
            raise ConfigurationError("resume config differs from the stored experiment")
        cfg_path.write_text(resolved + "\n")
        with RunLock(self.root):
            for stage in STAGES:
                if self.stage_done(stage):
                    echo(f"[{stage}] done, skipping")
                    continue
                echo(f"[{stage}] running")
                try:
                    getattr(self, f"stage_{stage}")()
                except MoelabError as exc:
                    raise MoelabError(f"stage '{stage}' failed: {exc}") from exc
                self._finish(stage)

    def stage_gen(self) -> None:
        emit_corpus(build_manifest(self.ccfg), self.corpus_dir)

    def _snapshot_langs(self) -> list:
        return list(self.ccfg.pretrain_languages)

    def stage_phase1(self) -> None:
        run = self._run_cfg([self.cfg.dominant_language], tokens=self.cfg.phase1_tokens,
                            seed=rng_seed(self.cfg.seed, "phase1"))
        result = pretrain(self.mcfg, self.corpus_dir, run,
                          snapshot_languages=self._snapshot_langs(),
                          out_dir=self.root / "checkpoints")
        save_checkpoint(result.checkpoint, self.root / "checkpoints" / "phase1.ckpt")
        write_loss_log(result.loss_log, self.root / "logs" / "phase1_loss.csv")
        for bundle in result.snapshots:
            write_bundle(bundle, self.root / "telemetry" / "phase1" / f"step_{bundle.step}")

    def stage_phase2(self) -> None:
        init = load_checkpoint(self.root / "checkpoints" / "phase1.ckpt")
        run = self._run_cfg(self.ccfg.pretrain_languages, tokens=self.cfg.phase2_tokens,
                            seed=rng_seed(self.cfg.seed, "phase2"))
        result = pretrain(self.mcfg, self.corpus_dir, run, init_checkpoint=init,
                          snapshot_languages=self._snapshot_langs(),
                          out_dir=self.root / "checkpoints")
        save_checkpoint(result.checkpoint, self.root / "checkpoints" / "pretrained.ckpt")
        write_loss_log(result.loss_log, self.root / "logs" / "phase2_loss.csv")
        for bundle in result.snapshots:
            write_bundle(bundle, self.root / "telemetry" / "phase2" / f"step_{bundle.step}")

    def stage_analyze(self) -> None:
        analyze_run(self.root, self.ccfg.pretrain_languages, self.mcfg)

    def stage_select(self) -> None:
        ckpt = load_checkpoint(self.root / "checkpoints" / "pretrained.ckpt")
        model = MoeLM.from_checkpoint(ckpt)
        layers = self.cfg.layer_set(self.mcfg)
        bundle = snapshot(model, self.corpus_dir, self.ccfg.pretrain_languages,
                          step=ckpt.step, layers=list(layers))
        tables = [bundle.activation[layer] for layer in layers]
        gaps = compute_gaps(tables)
        for target in self.ccfg.target_languages:
            anchor = self.ccfg.anchors[target]
            base_seft = assemble_plan("SEFT", target, anchor, layers, gaps=gaps,
                                      tables=tables, alpha=self.cfg.alpha,
                                      k_shared=self.cfg.k_shared, model_config=self.mcfg)
            for strategy in self.cfg.strategies:
                if strategy == "RANDOM_SEFT":
                    for seed in self.cfg.adapt_seeds:
                        plan = assemble_plan("RANDOM_SEFT", target, anchor, layers,
                                             base_seft=base_seft,
                                             seed=rng_seed(self.cfg.seed, "random-seft", seed),
                                             model_config=self.mcfg)
                        save_plan(plan, self._plan_path(strategy, target, seed))
                    continue
                plan = (base_seft if strategy == "SEFT" else
                        assemble_plan(strategy, target, anchor, layers, gaps=gaps,
                                      tables=tables, alpha=self.cfg.alpha,
                                      k_shared=self.cfg.k_shared, model_config=self.mcfg))
                save_plan(plan, self._plan_path(strategy, target))

    def _plan_path(self, strategy: str, target: str, seed=None) -> Path:
        tag = f"{strategy}_{target}" + ("" if seed is None else f"_seed{seed}")
        return self.root / "plans" / f"{tag}.json"

    def _adapt_ckpt_path(self, strategy, target, seed, extended=False) -> Path:
        sub = "adapted_extended" if extended else "adapted"
        return self.root / "checkpoints" / sub / strategy / target / f"seed{seed}.ckpt"

    def _adapt_one(self, base: Checkpoint, strategy: str, target: str, seed: int,
                   tokens: int, extended: bool = False):
        plan_seed = seed if strategy == "RANDOM_SEFT" else None
        plan = load_plan(self._plan_path(strategy, target, plan_seed))
        mask = build_mask(plan, self.mcfg)
        run = self._run_cfg([target], tokens=tokens, lr=self.cfg.adapt_lr,
                            seed=rng_seed(self.cfg.seed, "adapt", strategy, target, seed))
        lr_used = self.cfg.adapt_lr
        if self.cfg.sweep_grid:
            res = sweep(base, mask, self.corpus_dir, run, self.cfg.sweep_grid, target)
            write_sweep_table(res.table,
                              self.root / "sweeps" / f"{strategy}_{target}_seed{seed}.csv")
            ckpt, lr_used = res.best_checkpoint, res.best_lr
        else:
            ckpt = adapt(base, mask, self.corpus_dir, run).checkpoint
        save_checkpoint(ckpt, self._adapt_ckpt_path(strategy, target, seed, extended))
        return ckpt, mask, lr_used

    def stage_adapt(self) -> None:
        base = load_checkpoint(self.root / "checkpoints" / "pretrained.ckpt")
        shapes = param_shapes(self.mcfg)
        rows = []
        base_eval = {}
        for target in self.ccfg.target_languages:
            rep_v = eval_perplexity(base, self.corpus_dir, [target], "valid")
            rep_t = eval_perplexity(base, self.corpus_dir, [target], "test")
            base_eval[target] = (rep_v.rows[0].perplexity, rep_t.rows[0].perplexity)
        for strategy in self.cfg.strategies:
            for target in self.ccfg.target_languages:
                for seed in self.cfg.adapt_seeds:
                    ckpt, mask, lr_used = self._adapt_one(
                        base, strategy, target, seed, self.cfg.adapt_tokens)
                    rep_v = eval_perplexity(ckpt, self.corpus_dir, [target], "valid")
                    rep_t = eval_perplexity(ckpt, self.corpus_dir, [target], "test")
                    counts = mask.counts(shapes)
                    rows.append({
                        "strategy": strategy, "target": target,
                        "anchor": self.ccfg.anchors[target], "seed": seed,
                        "lr": lr_used,
                        "valid_ppl": rep_v.rows[0].perplexity,
                        "test_ppl": rep_t.rows[0].perplexity,
                        "base_valid_ppl": base_eval[target][0],
                        "base_test_ppl": base_eval[target][1],
                        "trainable_params": counts["trainable_params"],
                        "trainable_fraction": counts["trainable_fraction"],
                    })
        write_runs_table(rows, self.root / "eval" / "runs.csv")

    def stage_forgetting(self) -> None:
        base = load_checkpoint(self.root / "checkpoints" / "pretrained.ckpt")
        target = self.ccfg.target_languages[0]
        tokens = int(self.cfg.adapt_tokens * self.cfg.extended_adapt_factor)
        anchors = list(self.ccfg.pretrain_languages)
        rows = []
        for strategy in self.cfg.forgetting_strategies:
            for seed in self.cfg.forgetting_seeds:
                ckpt, _, _ = self._adapt_one(base, strategy, target, seed, tokens,
                                             extended=True)
                report = forgetting_report(base, ckpt, self.corpus_dir, anchors,
                                           seed=rng_seed(self.cfg.seed, "forget", seed))
                write_eval_report(report, self.root / "eval" /
                                  f"forgetting_{strategy}_{target}_seed{seed}.csv")
                for row in report.rows:
                    rows.append({"strategy": strategy, "target": target, "seed": seed,
                                 "anchor_language": row.language,
                                 "delta_ppl": row.delta, "std": row.std,
                                 "flagged": int(bool(row.flagged))})
        path = self.root / "eval" / "forgetting_summary.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("strategy,target,seed,anchor_language,delta_ppl,std,flagged\n")
            for r in rows:
                fh.write(f"{r['strategy']},{r['target']},{r['seed']},"
                         f"{r['anchor_language']},{r['delta_ppl']!r},{r['std']!r},"
                         f"{r['flagged']}\n")

    def stage_summary(self) -> None:
        runs = read_runs_table(self.root / "eval" / "runs.csv")
        summary_rows = []
        for strategy in self.cfg.strategies:
            for target in self.ccfg.target_languages:
                sel = [r for r in runs
                       if r["strategy"] == strategy and r["target"] == target]
                if not sel:
                    continue
                summary_rows.append({
                    "strategy": strategy, "target": target,
                    "anchor": sel[0]["anchor"], "n_seeds": len(sel),
                    "median_valid_ppl": float(np.median([r["valid_ppl"] for r in sel])),
                    "median_test_ppl": float(np.median([r["test_ppl"] for r in sel])),
                    "base_valid_ppl": sel[0]["base_valid_ppl"],
                    "base_test_ppl": sel[0]["base_test_ppl"],
                    "trainable_params": int(sel[0]["trainable_params"]),
                    "trainable_fraction": sel[0]["trainable_fraction"],
                })
        path = self.root / "summary.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("strategy,target,anchor,n_seeds,median_valid_ppl,median_test_ppl,"
                     "base_valid_ppl,base_test_ppl,trainable_params,trainable_fraction\n")
            for r in summary_rows:
                fh.write(f"{r['strategy']},{r['target']},{r['anchor']},{r['n_seeds']},"
                         f"{r['median_valid_ppl']!r},{r['median_test_ppl']!r},"
                         f"{r['base_valid_ppl']!r},{r['base_test_ppl']!r},"
                         f"{r['trainable_params']},{r['trainable_fraction']!r}\n")
        with open(self.root / "summary.json", "w", encoding="utf-8") as fh:
            json.dump({"rows": summary_rows}, fh, sort_keys=True, indent=1)
            fh.write("\n")


def rng_seed(base: int, *path) -> int:
    """A derived 63-bit seed for child runs (stable across platforms)."""
    return int(rng.stream(base, "seed-derivation", *path).integers(0, 2**63 - 1))


def write_runs_table(rows: list, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["strategy", "target", "anchor", "seed", "lr", "valid_ppl", "test_ppl",
            "base_valid_ppl", "base_test_ppl", "trainable_params", "trainable_fraction"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(
                repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols) + "\n")


def read_runs_table(path) -> list:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            vals = line.strip().split(",")
            row = dict(zip(header, vals))
            for key in ("lr", "valid_ppl", "test_ppl", "base_valid_ppl",
                        "base_test_ppl", "trainable_fraction"):
                row[key] = float(row[key])
            for key in ("seed", "trainable_params"):
                row[key] = int(row[key])
            rows.append(row)
    return rows


def analyze_run(root, languages, mcfg: ModelConfig, phase: str = "phase2") -> dict:
    """Entropy/JSD curves across snapshots plus the JSD-overlap scatter."""
    root = Path(root)
    tele = root / "telemetry" / phase
    if not tele.exists():
        raise ConfigurationError(f"no telemetry found under {tele}")
    steps = sorted(int(p.name.split("_", 1)[1]) for p in tele.iterdir()
                   if p.name.startswith("step_"))
    if not steps:
        raise ConfigurationError(f"no snapshots found under {tele}")
    out = root / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    bundles = {s: load_bundle(tele / f"step_{s}") for s in steps}
    layers = bundles[steps[0]]["layers"]

    with open(out / "entropy_curves.csv", "w", encoding="utf-8") as fh:
        fh.write("step,layer,language,entropy\n")
        for s in steps:
            for layer in layers:
                for lang in languages:
                    fh.write(f"{s},{layer},{lang},"
                             f"{bundles[s]['entropy'][f'{layer}/{lang}']!r}\n")
    with open(out / "jsd_curves.csv", "w", encoding="utf-8") as fh:
        fh.write("step,layer,lang_a,lang_b,jsd\n")
        for s in steps:
            for layer in layers:
                for i, a in enumerate(languages):
                    for b in languages[i + 1:]:
                        fh.write(f"{s},{layer},{a},{b},"
                                 f"{bundles[s]['jsd'][f'{layer}/{pair_key(a, b)}']!r}\n")
    with open(out / "mean_jsd_curves.csv", "w", encoding="utf-8") as fh:
        fh.write("step,layer,mean_jsd\n")
        mean_jsd = {}
        for s in steps:
            for layer in layers:
                vals = [bundles[s]["jsd"][f"{layer}/{pair_key(a, b)}"]
                        for i, a in enumerate(languages) for b in languages[i + 1:]]
                mean_jsd[(s, layer)] = float(np.mean(vals))
                fh.write(f"{s},{layer},{mean_jsd[(s, layer)]!r}\n")

    report = load_corpus_report(root / "corpus")
    final_step = steps[-1]
    final_layer = layers[-1]
    overlaps, jsds, pairs = [], [], []
    for i, a in enumerate(languages):
        for b in languages[i + 1:]:
            pairs.append(pair_key(a, b))
            overlaps.append(report["achieved_overlap"][pair_key(a, b)])
            jsds.append(bundles[final_step]["jsd"][f"{final_layer}/{pair_key(a, b)}"])
    if len(pairs) >= 2:
        rho = spearman_rho(overlaps, jsds)
    else:
        from .telemetry import SpearmanResult
        rho = SpearmanResult(rho=float("nan"), defined=False, note="fewer than two pairs")
    with open(out / "jsd_vs_overlap.csv", "w", encoding="utf-8") as fh:
        fh.write("lang_a,lang_b,overlap,jsd\n")
        for key, ov, js in zip(pairs, overlaps, jsds):
            a, b = key.split("|")
            fh.write(f"{a},{b},{ov!r},{js!r}\n")
    summary = {
        "spearman_rho_jsd_vs_overlap": rho.rho if rho.defined else None,
        "spearman_defined": rho.defined,
        "final_step": final_step,
        "final_layer": final_layer,
        "first_layer": layers[0],
        "mean_jsd_final_layer": mean_jsd[(final_step, final_layer)],
        "mean_jsd_first_layer": mean_jsd[(final_step, layers[0])],
        "log_base": "e",
    }
    with open(out / "analysis_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return summary
