"""Routing metrics vs brute-force and high-precision oracles."""

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moelab import rng
from moelab.corpus import build_manifest, default_corpus_config, emit_corpus, pair_key
from moelab.errors import ConfigurationError, InputError
from moelab.model import ModelConfig, MoeLM
from moelab.telemetry import (
    ActivationFrequencyTable, ExpertUsageDistribution, RoutingRecord, SpearmanResult,
    activation_frequencies, average_ranks, doc_usage, lang_usage, load_bundle,
    load_raw_records, mean_pairwise_jsd, pairwise_jsd, router_entropy, snapshot,
    spearman_rho, write_bundle,
)

mpmath.mp.dps = 50


def mp_entropy(q):
    return float(-mpmath.fsum(mpmath.mpf(float(p)) * mpmath.log(mpmath.mpf(float(p)))
                              for p in q if p > 0))


def mp_jsd(a, b):
    def kl(p, q):
        return mpmath.fsum(
            mpmath.mpf(float(pi)) * (mpmath.log(mpmath.mpf(float(pi))) - mpmath.log(qi))
            for pi, qi in zip(p, q) if pi > 0)
    m = [(mpmath.mpf(float(x)) + mpmath.mpf(float(y))) / 2 for x, y in zip(a, b)]
    return float(kl(a, m) / 2 + kl(b, m) / 2)


def _record(lang, doc_id, layer, probs, topk):
    return RoutingRecord(lang=lang, doc_id=doc_id, layer=layer,
                         probs=np.asarray(probs, float), topk=np.asarray(topk))


# --- usage distributions ---


def test_doc_usage_two_point_mean():
    rec = _record("x", 0, 0, [[1, 0], [0, 1]], [[0], [1]])
    np.testing.assert_allclose(doc_usage(rec).q, [0.5, 0.5])


def test_doc_usage_single_token_identity():
    rec = _record("x", 0, 0, [[0.2, 0.3, 0.5]], [[2]])
    np.testing.assert_allclose(doc_usage(rec).q, [0.2, 0.3, 0.5])


def test_doc_usage_brute_force():
    gen = rng.stream(0, "doc-usage")
    probs = gen.dirichlet(np.ones(6), size=100)
    rec = _record("x", 0, 1, probs, np.zeros((100, 2), dtype=int))
    brute = np.zeros(6)
    for row in probs:
        brute += row
    brute /= 100
    np.testing.assert_allclose(doc_usage(rec).q, brute, atol=1e-12)


def test_doc_usage_empty_rejected():
    with pytest.raises(InputError):
        doc_usage(_record("x", 0, 0, np.zeros((0, 4)), np.zeros((0, 1), dtype=int)))


def test_lang_usage_identity_and_mean():
    one = ExpertUsageDistribution("document", "x", 0, np.array([1.0, 0.0]), 5)
    two = ExpertUsageDistribution("document", "x", 0, np.array([0.0, 1.0]), 9)
    np.testing.assert_allclose(lang_usage([one]).q, [1.0, 0.0])
    np.testing.assert_allclose(lang_usage([one, two]).q, [0.5, 0.5])


def test_lang_usage_brute_force_500_docs():
    gen = rng.stream(1, "lang-usage")
    dists = [ExpertUsageDistribution("document", "x", 2, gen.dirichlet(np.ones(8)),
                                     int(gen.integers(1, 50))) for _ in range(500)]
    brute = np.zeros(8)
    for d in dists:
        brute += d.q
    brute /= 500
    np.testing.assert_allclose(lang_usage(dists).q, brute, atol=1e-12)


def test_lang_usage_empty_rejected():
    with pytest.raises(InputError):
        lang_usage([])


# --- entropy ---


def test_entropy_uniform_64():
    assert abs(router_entropy(np.full(64, 1 / 64)) - math.log(64)) < 1e-12


def test_entropy_one_hot_zero():
    q = np.zeros(16)
    q[3] = 1.0
    assert router_entropy(q) == 0.0


def test_entropy_dyadic_closed_form():
    assert abs(router_entropy(np.array([0.5, 0.25, 0.25, 0.0])) - 1.5 * math.log(2)) < 1e-12


def test_entropy_rejects_unnormalized():
    with pytest.raises(InputError):
        router_entropy(np.array([0.5, 0.6]))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=60, deadline=None)
def test_entropy_matches_high_precision(seed):
    gen = rng.stream(seed, "ent-oracle")
    q = gen.dirichlet(np.ones(int(gen.integers(2, 32))))
    assert abs(router_entropy(q) - mp_entropy(q)) < 1e-12
    assert -1e-15 <= router_entropy(q) <= math.log(len(q)) + 1e-12


# --- jsd ---


def test_jsd_identical_zero():
    q = np.array([0.25, 0.25, 0.5])
    assert pairwise_jsd(q, q) == 0.0


def test_jsd_disjoint_support_ln2():
    a = np.array([0.5, 0.5, 0.0, 0.0])
    b = np.array([0.0, 0.0, 0.3, 0.7])
    assert abs(pairwise_jsd(a, b) - math.log(2)) < 1e-12


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=60, deadline=None)
def test_jsd_matches_high_precision_and_bounds(seed):
    gen = rng.stream(seed, "jsd-oracle")
    e = int(gen.integers(2, 24))
    a, b = gen.dirichlet(np.ones(e)), gen.dirichlet(np.ones(e))
    val = pairwise_jsd(a, b)
    assert abs(val - mp_jsd(a, b)) < 1e-12
    assert abs(val - pairwise_jsd(b, a)) < 1e-15
    assert -1e-15 <= val <= math.log(2) + 1e-12


def test_jsd_mismatched_e_rejected():
    with pytest.raises(InputError):
        pairwise_jsd(np.array([0.5, 0.5]), np.array([0.3, 0.3, 0.4]))


# --- activation frequencies ---


def test_activation_k1_all_to_expert_3():
    recs = [_record("x", i, 0, np.full((10, 4), 0.25), np.full((10, 1), 3))
            for i in range(2)]
    table = activation_frequencies(recs, ["x"])
    np.testing.assert_array_equal(table.freq, [[0, 0, 0, 1.0]])


def test_activation_k2_e2_everything_one():
    recs = [_record("x", 0, 0, np.full((7, 2), 0.5), np.tile([0, 1], (7, 1)))]
    table = activation_frequencies(recs, ["x"])
    np.testing.assert_array_equal(table.freq, [[1.0, 1.0]])


def test_activation_rows_sum_to_k_exactly():
    gen = rng.stream(2, "act")
    recs = []
    for lang in ("a", "b"):
        for d in range(3):
            probs = gen.dirichlet(np.ones(6), size=20)
            topk = np.argsort(-probs, axis=1)[:, :3]
            recs.append(_record(lang, d, 1, probs, topk))
    table = activation_frequencies(recs, ["a", "b"])
    np.testing.assert_allclose(table.freq.sum(axis=1), [3.0, 3.0], atol=0)


def test_activation_matches_brute_force():
    gen = rng.stream(3, "act-brute")
    langs = ["a", "b", "c"]
    recs = []
    for lang in langs:
        for d in range(4):
            t = int(gen.integers(2, 30))
            probs = gen.dirichlet(np.ones(5), size=t)
            topk = np.argsort(-probs, axis=1)[:, :2]
            recs.append(_record(lang, d, 0, probs, topk))
    table = activation_frequencies(recs, langs)
    for li, lang in enumerate(langs):
        total = sum(r.topk.shape[0] for r in recs if r.lang == lang)
        for e in range(5):
            hits = sum(int((r.topk == e).sum()) for r in recs if r.lang == lang)
            assert abs(table.freq[li, e] - hits / total) < 1e-12


def test_activation_missing_language_rejected():
    recs = [_record("a", 0, 0, np.full((3, 2), 0.5), np.zeros((3, 1), dtype=int))]
    with pytest.raises(InputError):
        activation_frequencies(recs, ["a", "b"])


# --- spearman ---


def brute_force_spearman(xs, ys):
    """Pearson on mean ranks computed by exhaustive tie-group enumeration."""
    def ranks(v):
        out = []
        for x in v:
            less = sum(1 for y in v if y < x)
            equal = sum(1 for y in v if y == x)
            out.append(less + (equal + 1) / 2.0)
        return np.array(out)
    rx, ry = ranks(xs), ranks(ys)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    return float((dx * dy).sum() / math.sqrt((dx * dx).sum() * (dy * dy).sum()))


def test_spearman_perfect_and_inverse():
    assert spearman_rho([1, 2, 3], [10, 20, 30]).rho == 1.0
    assert spearman_rho([1, 2, 3], [3, 2, 1]).rho == -1.0


def test_spearman_with_ties_matches_brute_force():
    res = spearman_rho([1, 1, 2], [1, 2, 3])
    assert abs(res.rho - brute_force_spearman([1, 1, 2], [1, 2, 3])) < 1e-12


def test_spearman_constant_flagged():
    res = spearman_rho([2, 2, 2], [1, 2, 3])
    assert not res.defined
    assert math.isnan(res.rho)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=60, deadline=None)
def test_spearman_matches_brute_force_and_monotone_invariance(seed):
    gen = rng.stream(seed, "spear")
    n = int(gen.integers(2, 25))
    xs = np.round(gen.normal(size=n), 1)  # rounding induces ties
    ys = np.round(gen.normal(size=n), 1)
    if len(set(xs)) < 2 or len(set(ys)) < 2:
        return
    res = spearman_rho(xs, ys)
    assert abs(res.rho - brute_force_spearman(xs, ys)) < 1e-12
    assert -1.0 - 1e-12 <= res.rho <= 1.0 + 1e-12
    # strictly monotone transforms leave ranks alone
    res2 = spearman_rho(np.exp(xs / 2), ys**3)
    assert abs(res.rho - res2.rho) < 1e-12


def test_spearman_cross_checked_against_scipy():
    from scipy import stats
    gen = rng.stream(9, "spear-scipy")
    xs = np.round(gen.normal(size=40), 1)
    ys = np.round(gen.normal(size=40), 1)
    assert abs(spearman_rho(xs, ys).rho - stats.spearmanr(xs, ys).statistic) < 1e-12


# --- snapshot pipeline ---


MCFG = ModelConfig(n_layers=2, d_model=16, n_heads=2, vocab_size=64, seq_len=32,
                   n_experts=4, top_k=2, expert_hidden=8)


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    cfg = default_corpus_config(n_high=2, n_targets=0, seed=7, vocab_size=64,
                                lang_vocab_size=20, global_common_size=2,
                                train_docs=4, valid_docs=6, test_docs=3)
    cfg.doc_len_min, cfg.doc_len_max = 8, 24
    emit_corpus(build_manifest(cfg), out)
    return out, cfg


def test_snapshot_identical_languages_near_zero_jsd(tmp_path):
    # two languages built from the same vocabulary ids and same seed-stream
    # structure differ only by name; routing must then be near-identical
    cfg = default_corpus_config(n_high=2, n_targets=0, seed=13, vocab_size=64,
                                lang_vocab_size=20, global_common_size=0,
                                train_docs=2, valid_docs=8, test_docs=2)
    cfg.groups = [{"languages": ["same0"], "overlap": None}]
    cfg.pretrain_languages = ["same0"]
    cfg.doc_len_min, cfg.doc_len_max = 8, 24
    manifest = build_manifest(cfg)
    out = tmp_path / "c"
    emit_corpus(manifest, out)
    # duplicate the emitted files under a second language name
    for split in ("train", "valid", "test"):
        src = out / f"same0.{split}.txt"
        (out / f"same1.{split}.txt").write_bytes(src.read_bytes())
    model = MoeLM(MCFG, seed=3)
    bundle = snapshot(model, out, ["same0", "same1"])
    for layer in bundle.layers:
        assert bundle.jsd[(layer, pair_key("same0", "same1"))] < 1e-6


def test_snapshot_deterministic(tiny_corpus, tmp_path):
    corpus_dir, ccfg = tiny_corpus
    model = MoeLM(MCFG, seed=4)
    b1 = snapshot(model, corpus_dir, ccfg.pretrain_languages, step=5)
    b2 = snapshot(model, corpus_dir, ccfg.pretrain_languages, step=5)
    write_bundle(b1, tmp_path / "r1")
    write_bundle(b2, tmp_path / "r2")
    for name in ("entropy.csv", "jsd.csv", "activation.csv", "bundle.json"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()


def test_snapshot_matches_recomputation_from_raw_export(tiny_corpus, tmp_path):
    corpus_dir, ccfg = tiny_corpus
    model = MoeLM(MCFG, seed=4)
    raw = tmp_path / "raw.jsonl"
    bundle = snapshot(model, corpus_dir, ccfg.pretrain_languages, export_raw_path=raw)
    records = load_raw_records(raw)
    for layer in bundle.layers:
        layer_recs = [r for r in records if r.layer == layer]
        for lang in ccfg.pretrain_languages:
            dists = [doc_usage(r) for r in layer_recs if r.lang == lang]
            lu = lang_usage(dists)
            np.testing.assert_allclose(lu.q, bundle.usage[(layer, lang)], atol=1e-10)
            assert abs(router_entropy(lu) - bundle.entropy[(layer, lang)]) < 1e-10
        table = activation_frequencies(layer_recs, ccfg.pretrain_languages)
        np.testing.assert_allclose(table.freq, bundle.activation[layer].freq, atol=1e-10)
        a, b = ccfg.pretrain_languages[:2]
        got = pairwise_jsd(bundle.usage[(layer, a)], bundle.usage[(layer, b)])
        assert abs(got - bundle.jsd[(layer, pair_key(a, b))]) < 1e-10


def test_snapshot_does_not_mutate_model(tiny_corpus):
    corpus_dir, ccfg = tiny_corpus
    model = MoeLM(MCFG, seed=4)
    before = {k: p.data.copy() for k, p in model.params.items()}
    snapshot(model, corpus_dir, ccfg.pretrain_languages)
    for k, p in model.params.items():
        assert p.data.tobytes() == before[k].tobytes()


def test_snapshot_vocab_mismatch_rejected(tiny_corpus):
    corpus_dir, ccfg = tiny_corpus
    small = ModelConfig(n_layers=1, d_model=8, n_heads=2, vocab_size=8, seq_len=32,
                        n_experts=2, top_k=1, expert_hidden=4)
    with pytest.raises(ConfigurationError):
        snapshot(MoeLM(small, seed=0), corpus_dir, ccfg.pretrain_languages)


def test_mean_pairwise_jsd_and_bundle_roundtrip(tiny_corpus, tmp_path):
    corpus_dir, ccfg = tiny_corpus
    model = MoeLM(MCFG, seed=4)
    bundle = snapshot(model, corpus_dir, ccfg.pretrain_languages)
    m = mean_pairwise_jsd(bundle, layer=0)
    assert m >= 0.0
    write_bundle(bundle, tmp_path / "out")
    mirror = load_bundle(tmp_path / "out")
    assert mirror["log_base"] == "e"
    key = f"0/{pair_key(*ccfg.pretrain_languages[:2])}"
    assert abs(mirror["jsd"][key] - bundle.jsd[(0, pair_key(*ccfg.pretrain_languages[:2]))]) < 1e-15
