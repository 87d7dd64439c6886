"""Training and evaluation: continual pre-training, plan-based adaptation,
perplexity, learning-rate sweeps, and catastrophic-forgetting reports.

Training samples fixed-length windows from per-language token streams
(concatenated shuffled documents, BOS-separated) and interleaves languages
round-robin across batch rows, so the language mixture is exactly uniform.
Under a selective plan only the chosen experts and the routers of their
layers receive optimizer updates; everything else is frozen and stays
bit-identical. Evaluation reports exp(mean token NLL) per language and is
side-effect-free.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path

import numpy as np

from . import rng
from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .corpus import load_split
from .errors import ConfigurationError, DivergenceError, InputError, SweepError
from .model import ModelConfig, MoeLM, param_shapes
from .optim import OptimizerState, adamw_step
from .selection import ExpertSelectionPlan
from .telemetry import snapshot


@dataclass
class RunConfig:
    batch_size: int = 16
    seq_len: int = 128
    steps: int | None = None
    token_budget: int | None = None
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    seed: int = 0
    languages: tuple = ()
    snapshot_fraction: float = 0.1
    freeze_routers: bool = False

    def resolve_steps(self) -> int:
        if self.steps is not None:
            return int(self.steps)
        if self.token_budget is None:
            raise ConfigurationError("RunConfig needs steps or token_budget")
        per_step = self.batch_size * self.seq_len
        if self.token_budget < per_step:
            raise ConfigurationError(
                f"token budget {self.token_budget} below one batch ({per_step} tokens)")
        return int(self.token_budget // per_step)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainableMask:
    """Exact trainable/frozen predicate over every parameter tensor."""

    flags: dict  # name -> bool

    def trainable_names(self) -> list[str]:
        return [n for n, f in self.flags.items() if f]

    def frozen_names(self) -> list[str]:
        return [n for n, f in self.flags.items() if not f]

    def counts(self, shapes: dict) -> dict:
        trainable = sum(int(np.prod(shapes[n])) for n in self.trainable_names())
        total = sum(int(np.prod(s)) for s in shapes.values())
        return {"trainable_params": trainable, "frozen_params": total - trainable,
                "total_params": total,
                "trainable_fraction": trainable / total if total else 0.0}


def build_mask(plan: ExpertSelectionPlan, config: ModelConfig,
               freeze_routers: bool = False) -> TrainableMask:
    """Trainable set: selected experts' tensors plus their layers' routers.

    A layer's router trains only when at least one of its experts does
    (``freeze_routers`` disables router training for ablation). FULL_FT
    marks everything trainable.
    """
    shapes = param_shapes(config)
    if plan.full_model:
        return TrainableMask({name: True for name in shapes})
    flags = {name: False for name in shapes}
    for layer in plan.layers:
        if not 0 <= layer < config.n_layers:
            raise ConfigurationError(f"plan layer {layer} outside the model's "
                                     f"{config.n_layers} layers")
        chosen = plan.experts.get(layer, {})
        for e in chosen:
            if not 0 <= e < config.n_experts:
                raise ConfigurationError(
                    f"plan selects expert {e} at layer {layer}, model has "
                    f"{config.n_experts} experts")
            for w in ("w_gate", "w_up", "w_down"):
                flags[f"layers.{layer}.experts.{e}.{w}"] = True
        if chosen and not freeze_routers:
            flags[f"layers.{layer}.router.w"] = True
    return TrainableMask(flags)


class WindowBatcher:
    """Fixed-length training windows, languages interleaved round-robin."""

    def __init__(self, corpus_dir, languages, run_cfg: RunConfig, label: str = "train"):
        if not languages:
            raise ConfigurationError("no training languages configured")
        self.languages = list(languages)
        self.window = run_cfg.seq_len + 1
        self.batch_size = run_cfg.batch_size
        self.streams = {}
        for lang in self.languages:
            docs = load_split(corpus_dir, lang, "train")
            order = rng.stream(run_cfg.seed, label, "doc-order", lang).permutation(len(docs))
            stream = np.concatenate([docs[i] for i in order])
            if len(stream) < self.window + 1:
                raise ConfigurationError(
                    f"training stream for '{lang}' ({len(stream)} tokens) shorter "
                    f"than one window ({self.window})")
            self.streams[lang] = stream
        self._gen = rng.stream(run_cfg.seed, label, "windows")
        self._row = 0

    def next_batch(self) -> np.ndarray:
        rows = np.empty((self.batch_size, self.window), dtype=np.int64)
        for b in range(self.batch_size):
            lang = self.languages[self._row % len(self.languages)]
            self._row += 1
            stream = self.streams[lang]
            start = int(self._gen.integers(0, len(stream) - self.window + 1))
            rows[b] = stream[start:start + self.window]
        return rows


def _snapshot_steps(total: int, fraction: float) -> list[int]:
    if total <= 0:
        return [0]
    stride = max(1, int(round(total * fraction)))
    steps = sorted(set(list(range(0, total, stride)) + [total]))
    return steps


def _model_checkpoint(model: MoeLM, step: int) -> Checkpoint:
    return Checkpoint(model.config, {k: p.data.copy() for k, p in model.params.items()},
                      step=step)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_log: list
    snapshots: list  # MetricBundle


def _train_loop(model: MoeLM, batcher: WindowBatcher, run_cfg: RunConfig,
                trainable: list[str], start_step: int = 0,
                snapshot_args: dict | None = None,
                out_dir=None) -> TrainResult:
    steps = run_cfg.resolve_steps()
    params = {name: model.params[name] for name in trainable}
    state = OptimizerState.for_params(params, lr=run_cfg.lr, beta1=run_cfg.beta1,
                                      beta2=run_cfg.beta2, eps=run_cfg.eps,
                                      weight_decay=run_cfg.weight_decay)
    snap_at = set(_snapshot_steps(steps, run_cfg.snapshot_fraction)) if snapshot_args else set()
    loss_log: list = []
    snapshots: list = []

    def maybe_snapshot(step_now: int):
        if step_now in snap_at:
            bundle = snapshot(model, step=start_step + step_now, **snapshot_args)
            snapshots.append(bundle)

    maybe_snapshot(0)
    for step in range(steps):
        batch = batcher.next_batch()
        for p in params.values():
            p.zero_grad()
        total, parts, _ = model.lm_loss(batch)
        loss_val = float(total.data)
        if not math.isfinite(loss_val):
            last_good = None
            if out_dir is not None:
                last_good = Path(out_dir) / "last_good.ckpt"
                save_checkpoint(_model_checkpoint(model, start_step + step), last_good)
            raise DivergenceError(
                f"non-finite loss at step {start_step + step} "
                f"(ce={parts['ce']}, aux={parts['aux']}, z={parts['z']})",
                last_good_path=last_good)
        total.backward()
        grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for name, p in params.items()}
        adamw_step(params, grads, state)
        loss_log.append({"step": start_step + step + 1, "total": loss_val, **parts})
        maybe_snapshot(step + 1)
    return TrainResult(checkpoint=_model_checkpoint(model, start_step + steps),
                       loss_log=loss_log, snapshots=snapshots)


def pretrain(model_config: ModelConfig, corpus_dir, run_cfg: RunConfig,
             init_checkpoint: Checkpoint | None = None,
             snapshot_languages=None, out_dir=None) -> TrainResult:
    """Train every parameter on the configured language mixture.

    Starts from ``init_checkpoint`` when given (continual pre-training),
    otherwise from a fresh seed-derived initialization. Zero steps returns
    the start state bit-exactly.
    """
    if init_checkpoint is not None:
        model = MoeLM.from_checkpoint(init_checkpoint)
        start_step = init_checkpoint.step
    else:
        model = MoeLM(model_config, seed=run_cfg.seed)
        start_step = 0
    snapshot_args = None
    if snapshot_languages:
        snapshot_args = {"corpus_dir": corpus_dir, "languages": list(snapshot_languages)}
    batcher = WindowBatcher(corpus_dir, run_cfg.languages, run_cfg)
    return _train_loop(model, batcher, run_cfg, trainable=list(model.params),
                       start_step=start_step, snapshot_args=snapshot_args,
                       out_dir=out_dir)


def adapt(checkpoint: Checkpoint, mask: TrainableMask, corpus_dir,
          run_cfg: RunConfig, out_dir=None) -> TrainResult:
    """Optimizer updates touch only mask-trainable parameters.

    Frozen parameters stay bit-identical; routing still flows through
    frozen experts in the forward pass. An all-frozen mask is a no-op.
    """
    expected = set(param_shapes(checkpoint.config))
    if set(mask.flags) != expected:
        raise ConfigurationError("mask does not cover the checkpoint's parameters")
    trainable = mask.trainable_names()
    if not trainable:
        return TrainResult(checkpoint=checkpoint.copy(), loss_log=[], snapshots=[])
    model = MoeLM.from_checkpoint(checkpoint)
    for name in mask.frozen_names():
        model.params[name].requires_grad = False
    batcher = WindowBatcher(corpus_dir, run_cfg.languages, run_cfg, label="adapt")
    return _train_loop(model, batcher, run_cfg, trainable=trainable,
                       start_step=checkpoint.step, out_dir=out_dir)


# --- evaluation ---


@dataclass
class EvalRow:
    language: str
    perplexity: float
    token_count: int
    doc_count: int
    doc_nlls: np.ndarray = field(repr=False, default=None)
    doc_tokens: np.ndarray = field(repr=False, default=None)
    ref_perplexity: float | None = None
    delta: float | None = None
    std: float | None = None
    flagged: bool | None = None


@dataclass
class EvalReport:
    rows: list
    note: str = ""

    def by_language(self) -> dict:
        return {row.language: row for row in self.rows}

    def to_table(self) -> list[dict]:
        out = []
        for row in self.rows:
            d = {"language": row.language, "perplexity": row.perplexity,
                 "token_count": row.token_count, "doc_count": row.doc_count}
            if row.ref_perplexity is not None:
                d.update({"ref_perplexity": row.ref_perplexity, "delta": row.delta,
                          "std": row.std, "flagged": row.flagged})
            out.append(d)
        return out


def _doc_nlls(model: MoeLM, docs: list[np.ndarray], batch_docs: int = 32):
    """Per-document (summed NLL, predicted-token count), deterministic order."""
    nlls = np.zeros(len(docs))
    counts = np.array([len(d) - 1 for d in docs])
    groups: dict[int, list[int]] = {}
    for i, d in enumerate(docs):
        groups.setdefault(len(d), []).append(i)
    for length in sorted(groups):
        idxs = groups[length]
        for lo in range(0, len(idxs), batch_docs):
            chunk = idxs[lo:lo + batch_docs]
            batch = np.stack([docs[i] for i in chunk])
            vals = model.sequence_nlls(batch)
            for row, i in enumerate(chunk):
                nlls[i] = vals[row]
    return nlls, counts


def eval_perplexity(source, corpus_dir, languages, split: str = "valid") -> EvalReport:
    """exp(mean token NLL) per language; auxiliary losses excluded."""
    model = source if isinstance(source, MoeLM) else MoeLM.from_checkpoint(source)
    rows = []
    for lang in languages:
        docs = load_split(corpus_dir, lang, split)
        if not docs:
            raise InputError(f"empty {split} split for '{lang}'")
        for doc in docs:
            if doc.max() >= model.config.vocab_size:
                raise ConfigurationError(
                    f"token id {int(doc.max())} in '{lang}' exceeds model vocabulary")
        nlls, counts = _doc_nlls(model, docs)
        ppl = float(np.exp(nlls.sum() / counts.sum()))
        rows.append(EvalRow(language=lang, perplexity=ppl,
                            token_count=int(counts.sum()), doc_count=len(docs),
                            doc_nlls=nlls, doc_tokens=counts))
    return EvalReport(rows=rows)


def _bootstrap_std(nlls: np.ndarray, counts: np.ndarray, n_resamples: int,
                   gen: np.random.Generator) -> float:
    n = len(nlls)
    ppls = np.empty(n_resamples)
    for r in range(n_resamples):
        pick = gen.integers(0, n, size=n)
        ppls[r] = math.exp(nlls[pick].sum() / counts[pick].sum())
    return float(ppls.std(ddof=1))


def forgetting_report(before: Checkpoint, after: Checkpoint, corpus_dir,
                      anchor_languages, split: str = "test",
                      n_resamples: int = 50, seed: int = 0) -> EvalReport:
    """Per-anchor perplexity degradation with a bootstrap one-std flag.

    The std is estimated by resampling the evaluation documents of the
    ``before`` model (``n_resamples`` draws); a language is flagged when
    its degradation exceeds one std. With fewer than two resamples the
    report carries no flags and a warning note.
    """
    if before.config != after.config:
        raise ConfigurationError("before/after checkpoints disagree on the model config")
    rep_before = eval_perplexity(before, corpus_dir, anchor_languages, split)
    rep_after = eval_perplexity(after, corpus_dir, anchor_languages, split)
    note = ""
    flags_available = n_resamples >= 2
    if not flags_available:
        note = f"insufficient resamples ({n_resamples}); flags unavailable"
    rows = []
    for row_b, row_a in zip(rep_before.rows, rep_after.rows):
        std = None
        flagged = None
        if flags_available:
            gen = rng.stream(seed, "forgetting-bootstrap", row_b.language)
            std = _bootstrap_std(row_b.doc_nlls, row_b.doc_tokens, n_resamples, gen)
            flagged = bool(row_a.perplexity - row_b.perplexity > std)
        rows.append(EvalRow(
            language=row_b.language, perplexity=row_a.perplexity,
            token_count=row_a.token_count, doc_count=row_a.doc_count,
            doc_nlls=row_a.doc_nlls, doc_tokens=row_a.doc_tokens,
            ref_perplexity=row_b.perplexity,
            delta=row_a.perplexity - row_b.perplexity, std=std, flagged=flagged))
    return EvalReport(rows=rows, note=note)


# --- learning-rate sweep ---


@dataclass
class SweepResult:
    best_lr: float
    best_checkpoint: Checkpoint
    table: list  # dicts: lr, perplexity, diverged


def sweep(checkpoint: Checkpoint, mask: TrainableMask, corpus_dir,
          run_cfg: RunConfig, lr_grid, target_language: str,
          eval_split: str = "valid") -> SweepResult:
    """Adapt once per learning rate (same seed) and keep the best by
    target-language validation perplexity; ties go to the lowest rate."""
    if not lr_grid:
        raise ConfigurationError("empty learning-rate grid")
    table = []
    best = None
    for lr in sorted(lr_grid):
        cfg = replace(run_cfg, lr=lr)
        try:
            result = adapt(checkpoint, mask, corpus_dir, cfg)
            report = eval_perplexity(result.checkpoint, corpus_dir,
                                     [target_language], eval_split)
            ppl = report.rows[0].perplexity
            table.append({"lr": lr, "perplexity": ppl, "diverged": False})
            if best is None or ppl < best[1]:
                best = (lr, ppl, result.checkpoint)
        except DivergenceError:
            table.append({"lr": lr, "perplexity": float("inf"), "diverged": True})
    if best is None:
        raise SweepError("every sweep run diverged", table=table)
    return SweepResult(best_lr=best[0], best_checkpoint=best[2], table=table)


def write_eval_report(report: EvalReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    has_ref = any(r.ref_perplexity is not None for r in report.rows)
    with open(path, "w", encoding="utf-8") as fh:
        if has_ref:
            fh.write("language,perplexity,ref_perplexity,delta,std,flagged,token_count,doc_count\n")
            for r in report.rows:
                fh.write(f"{r.language},{r.perplexity!r},{r.ref_perplexity!r},"
                         f"{r.delta!r},{'' if r.std is None else repr(r.std)},"
                         f"{'' if r.flagged is None else int(r.flagged)},"
                         f"{r.token_count},{r.doc_count}\n")
        else:
            fh.write("language,perplexity,token_count,doc_count\n")
            for r in report.rows:
                fh.write(f"{r.language},{r.perplexity!r},{r.token_count},{r.doc_count}\n")
    with open(path.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump({"rows": report.to_table(), "note": report.note}, fh,
                  sort_keys=True, indent=1)
        fh.write("\n")


def write_loss_log(loss_log: list, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,total,ce,aux,z\n")
        for row in loss_log:
            fh.write(f"{row['step']},{row['total']!r},{row['ce']!r},"
                     f"{row['aux']!r},{row['z']!r}\n")


def write_sweep_table(table: list, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("lr,perplexity,diverged\n")
        for row in table:
            fh.write(f"{row['lr']!r},{row['perplexity']!r},{int(row['diverged'])}\n")
