"""Expert selection for adaptation: activation gaps, SEFT/SSFT and baselines.

The activation-gap procedure scores each expert by the difference between
its two most-activating languages' frequencies. SEFT keeps, within a layer
set (default: the final two layers), the experts whose dominant language
is the target's anchor and whose gap clears the threshold alpha. SSFT adds
the k_shared experts with the highest mean activation across pre-training
languages. Baselines: RANDOM_SEFT (count-matched random experts),
SEFT_TOP20 (about 30% of experts by gap ranking), AEFT (all experts in the
layer set), FULL_FT (whole model).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng
from .errors import ConfigurationError, InputError
from .model import ModelConfig, param_shapes
from .telemetry import ActivationFrequencyTable

STRATEGIES = ("SEFT", "SSFT", "RANDOM_SEFT", "SEFT_TOP20", "AEFT", "FULL_FT")
PROVENANCE = ("language_specific", "shared", "random", "all")


@dataclass
class ActivationGapEntry:
    layer: int
    expert: int
    dominant: str
    runner_up: str
    gap: float


@dataclass
class ExpertSelectionPlan:
    strategy: str
    target: str
    anchor: str
    layers: tuple
    experts: dict                # layer -> {expert_id: provenance}
    alpha: float | None = None
    k_shared: int | None = None
    seed: int | None = None
    empty: bool = False
    full_model: bool = False
    trainable_param_estimate: int = 0
    source_split: str = "valid"

    def expert_ids(self, layer: int) -> list[int]:
        return sorted(self.experts.get(layer, {}))

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "target": self.target,
            "anchor": self.anchor,
            "layers": list(self.layers),
            "experts": {str(layer): {str(e): prov for e, prov in sorted(m.items())}
                        for layer, m in sorted(self.experts.items())},
            "alpha": self.alpha,
            "k_shared": self.k_shared,
            "seed": self.seed,
            "empty": self.empty,
            "full_model": self.full_model,
            "trainable_param_estimate": self.trainable_param_estimate,
            "source_split": self.source_split,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExpertSelectionPlan":
        experts = {int(layer): {int(e): prov for e, prov in m.items()}
                   for layer, m in d["experts"].items()}
        return cls(strategy=d["strategy"], target=d["target"], anchor=d["anchor"],
                   layers=tuple(d["layers"]), experts=experts, alpha=d["alpha"],
                   k_shared=d["k_shared"], seed=d["seed"], empty=d["empty"],
                   full_model=d["full_model"],
                   trainable_param_estimate=d["trainable_param_estimate"],
                   source_split=d.get("source_split", "valid"))

    def selection_payload(self) -> str:
        """The selection itself (no strategy metadata), for equality checks."""
        d = self.to_dict()
        for meta in ("strategy", "k_shared", "seed"):
            d.pop(meta)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))


def save_plan(plan: ExpertSelectionPlan, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(plan.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_plan(path) -> ExpertSelectionPlan:
    with open(path, "r", encoding="utf-8") as fh:
        return ExpertSelectionPlan.from_dict(json.load(fh))


def default_layer_set(config: ModelConfig) -> tuple:
    """The final two MoE layers (or all layers for shallower models)."""
    return tuple(range(max(0, config.n_layers - 2), config.n_layers))


def compute_gaps(tables) -> list[ActivationGapEntry]:
    """One entry per (layer, expert): top-two languages by activation.

    Ties take the language listed first in the table; a full tie is
    recorded with gap 0.
    """
    if isinstance(tables, ActivationFrequencyTable):
        tables = [tables]
    entries: list[ActivationGapEntry] = []
    for table in tables:
        if len(table.languages) < 2:
            raise InputError("activation-gap analysis needs at least two languages")
        for e in range(table.freq.shape[1]):
            col = table.freq[:, e]
            order = sorted(range(len(col)), key=lambda i: (-col[i], i))
            dom, run = order[0], order[1]
            entries.append(ActivationGapEntry(
                layer=table.layer, expert=e,
                dominant=table.languages[dom], runner_up=table.languages[run],
                gap=float(col[dom] - col[run])))
    return entries


def select_seft(gaps: list[ActivationGapEntry], anchor: str, alpha: float,
                layer_set) -> dict[int, list[int]]:
    """Anchor-dominant experts with gap strictly above alpha, per layer."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in [0,1], got {alpha}")
    layer_set = tuple(layer_set)
    if not layer_set:
        raise ConfigurationError("empty layer set")
    picked: dict[int, list[int]] = {layer: [] for layer in layer_set}
    for entry in gaps:
        if entry.layer in picked and entry.dominant == anchor and entry.gap > alpha:
            picked[entry.layer].append(entry.expert)
    return {layer: sorted(v) for layer, v in picked.items()}


def select_shared(tables, k_shared: int, layer_set) -> dict[int, list[int]]:
    """Per layer, the k_shared experts with highest mean activation."""
    if isinstance(tables, ActivationFrequencyTable):
        tables = [tables]
    by_layer = {t.layer: t for t in tables}
    out: dict[int, list[int]] = {}
    for layer in layer_set:
        table = by_layer[layer]
        n_experts = table.freq.shape[1]
        if k_shared > n_experts:
            raise ConfigurationError(
                f"k_shared={k_shared} exceeds expert count {n_experts}")
        means = table.freq.mean(axis=0)
        order = sorted(range(n_experts), key=lambda e: (-means[e], e))
        out[layer] = sorted(order[:k_shared])
    return out


def _estimate_params(config: ModelConfig | None, experts: dict, layers,
                     full_model: bool) -> int:
    if config is None:
        return 0
    shapes = param_shapes(config)
    if full_model:
        return int(sum(int(np.prod(s)) for s in shapes.values()))
    per_expert = 3 * config.d_model * config.expert_hidden
    router = config.d_model * config.n_experts
    total = 0
    for layer in layers:
        chosen = experts.get(layer, {})
        total += len(chosen) * per_expert
        if chosen:
            total += router
    return total


def assemble_plan(strategy: str, target: str, anchor: str, layer_set,
                  gaps: list[ActivationGapEntry] | None = None,
                  tables=None, alpha: float = 0.01, k_shared: int = 5,
                  base_seft: ExpertSelectionPlan | None = None,
                  seed: int | None = None,
                  model_config: ModelConfig | None = None,
                  source_split: str = "valid") -> ExpertSelectionPlan:
    """Build the trainable-expert plan for any strategy.

    SEFT/SSFT/SEFT_TOP20 need ``gaps`` (SSFT also ``tables`` for the shared
    set); RANDOM_SEFT needs a ``base_seft`` plan plus a ``seed``; AEFT and
    FULL_FT need only the layer set / config.
    """
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown strategy '{strategy}'")
    layer_set = tuple(layer_set)
    experts: dict[int, dict[int, str]] = {layer: {} for layer in layer_set}
    full_model = False

    if strategy in ("SEFT", "SSFT", "SEFT_TOP20"):
        if gaps is None:
            raise InputError(f"{strategy} requires activation-gap entries")

    if strategy == "SEFT":
        for layer, ids in select_seft(gaps, anchor, alpha, layer_set).items():
            experts[layer] = {e: "language_specific" for e in ids}
    elif strategy == "SSFT":
        if tables is None:
            raise InputError("SSFT requires activation tables for the shared set")
        for layer, ids in select_seft(gaps, anchor, alpha, layer_set).items():
            experts[layer] = {e: "language_specific" for e in ids}
        for layer, ids in select_shared(tables, k_shared, layer_set).items():
            for e in ids:
                experts[layer].setdefault(e, "shared")  # language_specific wins
    elif strategy == "RANDOM_SEFT":
        if base_seft is None:
            raise InputError("RANDOM_SEFT requires the base SEFT plan")
        if seed is None:
            raise InputError("RANDOM_SEFT requires a seed")
        if model_config is None:
            raise InputError("RANDOM_SEFT requires the model config for expert bounds")
        for layer in layer_set:
            count = len(base_seft.experts.get(layer, {}))
            gen = rng.stream(seed, "random-seft", target, layer)
            ids = sorted(gen.choice(model_config.n_experts, size=count,
                                    replace=False).tolist())
            experts[layer] = {int(e): "random" for e in ids}
    elif strategy == "SEFT_TOP20":
        if model_config is None:
            raise InputError("SEFT_TOP20 requires the model config for expert count")
        n_sel = math.ceil(0.3 * model_config.n_experts)
        by_layer: dict[int, list[ActivationGapEntry]] = {layer: [] for layer in layer_set}
        for entry in gaps:
            if entry.layer in by_layer:
                by_layer[entry.layer].append(entry)
        for layer, entries in by_layer.items():
            anchored = [e for e in entries if e.dominant == anchor]
            anchored.sort(key=lambda e: (-e.gap, e.expert))
            chosen = [e.expert for e in anchored[:n_sel]]
            if len(chosen) < n_sel:  # fall back to the global gap ranking
                rest = [e for e in entries if e.expert not in set(chosen)]
                rest.sort(key=lambda e: (-e.gap, e.expert))
                chosen += [e.expert for e in rest[: n_sel - len(chosen)]]
            experts[layer] = {e: "language_specific" for e in sorted(chosen)}
    elif strategy == "AEFT":
        if model_config is None:
            raise InputError("AEFT requires the model config for expert count")
        for layer in layer_set:
            experts[layer] = {e: "all" for e in range(model_config.n_experts)}
    elif strategy == "FULL_FT":
        full_model = True
        experts = {}

    empty = (not full_model) and all(not m for m in experts.values())
    plan = ExpertSelectionPlan(
        strategy=strategy, target=target, anchor=anchor, layers=layer_set,
        experts=experts, alpha=alpha if strategy in ("SEFT", "SSFT", "SEFT_TOP20") else None,
        k_shared=k_shared if strategy == "SSFT" else None,
        seed=seed if strategy == "RANDOM_SEFT" else None,
        empty=empty, full_model=full_model,
        trainable_param_estimate=_estimate_params(model_config, experts, layer_set,
                                                  full_model),
        source_split=source_split)
    return plan
