"""Activation-gap selection vs exhaustive scans; plan assembly contracts."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moelab import rng
from moelab.errors import ConfigurationError, InputError
from moelab.model import ModelConfig
from moelab.selection import (
    ActivationGapEntry, assemble_plan, compute_gaps, default_layer_set, load_plan,
    save_plan, select_seft, select_shared,
)
from moelab.telemetry import ActivationFrequencyTable

CFG = ModelConfig(n_layers=4, d_model=16, n_heads=2, vocab_size=32, seq_len=16,
                  n_experts=16, top_k=2, expert_hidden=8)


def _table(layer, freq, langs=None):
    freq = np.asarray(freq, dtype=float)
    langs = langs or [f"L{i}" for i in range(freq.shape[0])]
    return ActivationFrequencyTable(layer=layer, languages=langs, freq=freq,
                                    token_counts=np.full(freq.shape[0], 100))


def _random_table(seed, layer=0, n_langs=4, n_experts=8):
    gen = rng.stream(seed, "table", layer)
    freq = gen.random((n_langs, n_experts))
    return _table(layer, freq)


# --- compute_gaps ---


def test_gaps_simple_arithmetic():
    table = _table(0, [[0.42, 0.1], [0.37, 0.2], [0.10, 0.9]], ["ca", "ru", "hi"])
    entries = compute_gaps(table)
    first = entries[0]
    assert (first.dominant, first.runner_up) == ("ca", "ru")
    assert abs(first.gap - 0.05) < 1e-12


def test_gaps_tie_break_first_language():
    table = _table(0, [[0.3], [0.3], [0.3]], ["a", "b", "c"])
    entry = compute_gaps(table)[0]
    assert entry.dominant == "a" and entry.runner_up == "b"
    assert entry.gap == 0.0


def test_gaps_single_language_rejected():
    with pytest.raises(InputError):
        compute_gaps(_table(0, [[0.5, 0.5]], ["only"]))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=60, deadline=None)
def test_gaps_match_exhaustive_scan(seed):
    table = _random_table(seed)
    entries = compute_gaps(table)
    assert len(entries) == table.freq.shape[1]
    for entry in entries:
        col = table.freq[:, entry.expert]
        ranked = sorted(zip(col, table.languages), key=lambda t: (-t[0], table.languages.index(t[1])))
        assert entry.dominant == ranked[0][1]
        assert entry.runner_up == ranked[1][1]
        assert abs(entry.gap - (ranked[0][0] - ranked[1][0])) < 1e-12
        assert entry.gap >= 0.0
        assert entry.dominant != entry.runner_up
        for f, _ in ranked[2:]:
            assert ranked[1][0] >= f - 1e-15


# --- select_seft ---


def test_seft_threshold_filtering():
    gaps = [
        ActivationGapEntry(0, 0, "ca", "ru", 0.02),
        ActivationGapEntry(0, 1, "ca", "ru", 0.005),
        ActivationGapEntry(0, 2, "ru", "ca", 0.03),
    ]
    assert select_seft(gaps, "ca", 0.01, [0]) == {0: [0]}


def test_seft_alpha_zero_keeps_positive_gaps():
    gaps = [
        ActivationGapEntry(0, 0, "ca", "ru", 0.0),
        ActivationGapEntry(0, 1, "ca", "ru", 1e-9),
        ActivationGapEntry(0, 2, "ca", "ru", 0.2),
    ]
    assert select_seft(gaps, "ca", 0.0, [0]) == {0: [1, 2]}


def test_seft_alpha_one_empty_flagged_plan():
    gaps = [ActivationGapEntry(3, 0, "ca", "ru", 0.9)]
    plan = assemble_plan("SEFT", "tgt", "ca", [3], gaps=gaps, alpha=1.0,
                         model_config=CFG)
    assert plan.empty
    assert plan.experts == {3: {}}


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=60, deadline=None)
def test_seft_alpha_monotonicity(seed):
    gen = rng.stream(seed, "alpha-mono")
    table = _random_table(seed, layer=2)
    gaps = compute_gaps(table)
    anchor = table.languages[int(gen.integers(0, len(table.languages)))]
    a1, a2 = sorted(gen.random(2))
    s1 = select_seft(gaps, anchor, a1, [2])[2]
    s2 = select_seft(gaps, anchor, a2, [2])[2]
    assert set(s2) <= set(s1)


# --- select_shared ---


def test_shared_k_equals_e_all_experts():
    table = _random_table(5, layer=1)
    ids = select_shared(table, 8, [1])[1]
    assert ids == list(range(8))


def test_shared_strict_maximum():
    table = _table(1, [[0.1, 0.9, 0.2], [0.1, 0.8, 0.3]])
    assert select_shared(table, 1, [1]) == {1: [1]}


def test_shared_k_above_e_rejected():
    with pytest.raises(ConfigurationError):
        select_shared(_random_table(1), 9, [0])


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=60, deadline=None)
def test_shared_matches_sort_oracle(seed):
    gen = rng.stream(seed, "shared-oracle")
    table = _random_table(seed, layer=0)
    k = int(gen.integers(1, 9))
    got = select_shared(table, k, [0])[0]
    means = table.freq.mean(axis=0)
    oracle = sorted(sorted(range(8), key=lambda e: (-means[e], e))[:k])
    assert got == oracle


# --- assemble_plan ---


def _gaps_and_tables(seed=0, layers=(2, 3)):
    tables = [_random_table(seed, layer=la, n_langs=5, n_experts=16) for la in layers]
    return compute_gaps(tables), tables


def test_ssft_union_with_provenance():
    gaps = [
        ActivationGapEntry(2, 0, "A", "B", 0.5),
        ActivationGapEntry(3, 1, "A", "B", 0.4),
    ]
    freq = np.zeros((2, 16))
    freq[:, 5] = 0.9
    freq[:, 9] = 0.8
    tables = [_table(2, freq, ["A", "B"]), _table(3, freq, ["A", "B"])]
    plan = assemble_plan("SSFT", "tgt", "A", [2, 3], gaps=gaps, tables=tables,
                         alpha=0.01, k_shared=2, model_config=CFG)
    assert plan.experts[2] == {0: "language_specific", 5: "shared", 9: "shared"}
    assert plan.experts[3] == {1: "language_specific", 5: "shared", 9: "shared"}


def test_ssft_collision_language_specific_wins():
    gaps = [ActivationGapEntry(2, 5, "A", "B", 0.5)]
    freq = np.zeros((2, 16))
    freq[:, 5] = 0.9
    tables = [_table(2, freq, ["A", "B"])]
    plan = assemble_plan("SSFT", "tgt", "A", [2], gaps=gaps, tables=tables,
                         alpha=0.01, k_shared=1, model_config=CFG)
    assert plan.experts[2] == {5: "language_specific"}


def test_ssft_k0_equals_seft_payload_byte_for_byte():
    gaps, tables = _gaps_and_tables(7)
    seft = assemble_plan("SEFT", "tgt", "L0", (2, 3), gaps=gaps, alpha=0.01,
                         model_config=CFG)
    ssft = assemble_plan("SSFT", "tgt", "L0", (2, 3), gaps=gaps, tables=tables,
                         alpha=0.01, k_shared=0, model_config=CFG)
    assert ssft.selection_payload() == seft.selection_payload()


def test_random_seft_matches_cardinalities_and_is_deterministic():
    gaps, tables = _gaps_and_tables(9)
    seft = assemble_plan("SEFT", "tgt", "L1", (2, 3), gaps=gaps, alpha=0.05,
                         model_config=CFG)
    r1 = assemble_plan("RANDOM_SEFT", "tgt", "L1", (2, 3), base_seft=seft, seed=42,
                       model_config=CFG)
    r2 = assemble_plan("RANDOM_SEFT", "tgt", "L1", (2, 3), base_seft=seft, seed=42,
                       model_config=CFG)
    assert r1.to_dict() == r2.to_dict()
    for layer in (2, 3):
        assert len(r1.experts[layer]) == len(seft.experts[layer])
        assert all(p == "random" for p in r1.experts[layer].values())
        assert all(0 <= e < CFG.n_experts for e in r1.experts[layer])
        assert len(set(r1.experts[layer])) == len(r1.experts[layer])


def test_random_seft_without_base_rejected():
    with pytest.raises(InputError):
        assemble_plan("RANDOM_SEFT", "tgt", "L1", (2, 3), seed=1, model_config=CFG)


def test_seft_top20_ceiling_count():
    gaps, _ = _gaps_and_tables(11)
    plan = assemble_plan("SEFT_TOP20", "tgt", "L0", (2, 3), gaps=gaps,
                         model_config=CFG)
    expect = math.ceil(0.3 * CFG.n_experts)  # 5 of 16
    assert expect == 5
    for layer in (2, 3):
        assert len(plan.experts[layer]) == expect


def test_seft_top20_prefers_anchor_dominant_then_falls_back():
    gaps = [ActivationGapEntry(2, e, "A" if e < 2 else "B", "C", 0.9 - 0.01 * e)
            for e in range(16)]
    plan = assemble_plan("SEFT_TOP20", "tgt", "A", (2,), gaps=gaps, model_config=CFG)
    chosen = sorted(plan.experts[2])
    # both anchor-dominant experts first, then best global gaps (2, 3, 4)
    assert chosen == [0, 1, 2, 3, 4]


def test_aeft_all_experts():
    plan = assemble_plan("AEFT", "tgt", "L0", (2, 3), model_config=CFG)
    for layer in (2, 3):
        assert sorted(plan.experts[layer]) == list(range(CFG.n_experts))
        assert all(p == "all" for p in plan.experts[layer].values())


def test_full_ft_flag():
    plan = assemble_plan("FULL_FT", "tgt", "L0", (2, 3), model_config=CFG)
    assert plan.full_model
    assert plan.experts == {}
    total = sum(int(np.prod(s)) for s in
                __import__("moelab.model", fromlist=["param_shapes"]).param_shapes(CFG).values())
    assert plan.trainable_param_estimate == total


def test_plan_roundtrip(tmp_path):
    gaps, tables = _gaps_and_tables(13)
    plan = assemble_plan("SSFT", "lr0", "hr0", (2, 3), gaps=gaps, tables=tables,
                         alpha=0.01, k_shared=5, model_config=CFG)
    path = tmp_path / "plan.json"
    save_plan(plan, path)
    loaded = load_plan(path)
    assert loaded.to_dict() == plan.to_dict()


def test_default_layer_set_final_two():
    assert default_layer_set(CFG) == (2, 3)
    shallow = ModelConfig(n_layers=1, d_model=16, n_heads=2, vocab_size=32,
                          seq_len=16, n_experts=4, top_k=2, expert_hidden=8)
    assert default_layer_set(shallow) == (0,)


def test_param_estimate_exact_counts():
    gaps = [ActivationGapEntry(2, 0, "A", "B", 0.5), ActivationGapEntry(3, 1, "A", "B", 0.5)]
    plan = assemble_plan("SEFT", "tgt", "A", (2, 3), gaps=gaps, alpha=0.01,
                         model_config=CFG)
    per_expert = 3 * CFG.d_model * CFG.expert_hidden
    router = CFG.d_model * CFG.n_experts
    assert plan.trainable_param_estimate == 2 * per_expert + 2 * router
