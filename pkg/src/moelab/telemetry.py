"""Routing telemetry: expert-usage distributions, entropy, JSD, activations.

Definitions (natural log throughout, so entropy is bounded by ln E and
JSD by ln 2):

- document usage q_i = mean over the document's tokens of the per-token
  routing probability vectors;
- language usage q(lang) = unweighted mean of its documents' q_i
  (documents weigh equally regardless of length);
- router entropy H = -sum_e q[e] ln q[e] with 0 ln 0 := 0;
- JSD(a, b) = KL(a||m)/2 + KL(b||m)/2 with m = (a+b)/2;
- activation frequency freq[lang, e] = fraction of the language's tokens
  whose top-k set contains expert e (rows sum to exactly k).

Snapshots run the model over a held-out split with tracing enabled and
aggregate per (layer, language); the BOS framing position is excluded so
statistics cover exactly the document's own tokens.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .corpus import load_split, pair_key
from .errors import ConfigurationError, InputError
from .model import MoeLM

_SUM_TOL = 1e-6


@dataclass
class RoutingRecord:
    """Per-token routing of one document at one layer."""

    lang: str
    doc_id: int
    layer: int
    probs: np.ndarray   # [T, E]
    topk: np.ndarray    # [T, k]


@dataclass
class ExpertUsageDistribution:
    granularity: str    # "document" | "language"
    owner: str
    layer: int
    q: np.ndarray       # [E]
    count: int          # tokens (document) or documents (language)


@dataclass
class ActivationFrequencyTable:
    layer: int
    languages: list[str]
    freq: np.ndarray          # [n_languages, E]
    token_counts: np.ndarray  # [n_languages]


@dataclass
class SpearmanResult:
    rho: float
    defined: bool
    note: str = ""


def _check_distribution(q: np.ndarray, what: str) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1:
        raise InputError(f"{what} must be a vector, got shape {q.shape}")
    if abs(q.sum() - 1.0) > _SUM_TOL or (q < -1e-12).any():
        raise InputError(f"{what} is not a probability vector (sum={q.sum()})")
    return np.clip(q, 0.0, None)


def doc_usage(record: RoutingRecord) -> ExpertUsageDistribution:
    """Mean routing probability over a document's tokens."""
    if record.probs.shape[0] < 1:
        raise InputError(f"document {record.doc_id} of '{record.lang}' has no tokens")
    q = record.probs.mean(axis=0)
    return ExpertUsageDistribution("document", record.lang, record.layer, q,
                                   record.probs.shape[0])


def lang_usage(doc_dists: list[ExpertUsageDistribution]) -> ExpertUsageDistribution:
    """Unweighted mean over document distributions (documents weigh equally)."""
    if not doc_dists:
        raise InputError("lang_usage on an empty document set")
    layer = doc_dists[0].layer
    owner = doc_dists[0].owner
    for d in doc_dists:
        if d.layer != layer or d.owner != owner:
            raise InputError("lang_usage mixes layers or languages")
    q = np.mean([d.q for d in doc_dists], axis=0)
    return ExpertUsageDistribution("language", owner, layer, q, len(doc_dists))


def router_entropy(q) -> float:
    """Shannon entropy in nats of an expert-usage distribution."""
    vec = q.q if isinstance(q, ExpertUsageDistribution) else q
    vec = _check_distribution(vec, "entropy input")
    nz = vec[vec > 0.0]
    return float(-(nz * np.log(nz)).sum())


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0.0
    return float((p[mask] * (np.log(p[mask]) - np.log(q[mask]))).sum())


def pairwise_jsd(qa, qb) -> float:
    """Jensen-Shannon divergence in nats; symmetric, in [0, ln 2]."""
    if isinstance(qa, ExpertUsageDistribution) and isinstance(qb, ExpertUsageDistribution):
        if qa.layer != qb.layer:
            raise InputError(f"JSD across layers {qa.layer} vs {qb.layer}")
        qa, qb = qa.q, qb.q
    a = _check_distribution(qa, "JSD left input")
    b = _check_distribution(qb, "JSD right input")
    if a.shape != b.shape:
        raise InputError(f"JSD expert-count mismatch: {a.shape} vs {b.shape}")
    m = 0.5 * (a + b)
    return 0.5 * _kl(a, m) + 0.5 * _kl(b, m)


def activation_frequencies(records: list[RoutingRecord],
                           languages: list[str]) -> ActivationFrequencyTable:
    """Fraction of each language's tokens selecting each expert in its top-k."""
    if not records:
        raise InputError("activation_frequencies on an empty record set")
    layer = records[0].layer
    n_experts = records[0].probs.shape[1]
    counts = {lang: np.zeros(n_experts) for lang in languages}
    tokens = {lang: 0 for lang in languages}
    for rec in records:
        if rec.layer != layer:
            raise InputError("activation_frequencies mixes layers")
        if rec.lang not in counts:
            raise InputError(f"record for unknown language '{rec.lang}'")
        counts[rec.lang] += np.bincount(rec.topk.ravel(), minlength=n_experts)
        tokens[rec.lang] += rec.topk.shape[0]
    for lang in languages:
        if tokens[lang] == 0:
            raise InputError(f"language '{lang}' has no tokens in the record set")
    freq = np.stack([counts[lang] / tokens[lang] for lang in languages])
    return ActivationFrequencyTable(layer=layer, languages=list(languages), freq=freq,
                                    token_counts=np.array([tokens[lang] for lang in languages]))


def average_ranks(xs) -> np.ndarray:
    """Ranks 1..n with ties assigned their mean rank."""
    xs = np.asarray(xs, dtype=np.float64)
    order = np.argsort(xs, kind="stable")
    ranks = np.empty(len(xs), dtype=np.float64)
    i = 0
    sorted_x = xs[order]
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(xs, ys) -> SpearmanResult:
    """Rank correlation with mean ranks for ties; flagged when undefined."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise InputError(f"spearman_rho needs equal-length vectors, got {xs.shape}, {ys.shape}")
    if len(xs) < 2:
        raise InputError("spearman_rho needs at least two points")
    rx, ry = average_ranks(xs), average_ranks(ys)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    vx, vy = (dx * dx).sum(), (dy * dy).sum()
    if vx == 0.0 or vy == 0.0:
        return SpearmanResult(rho=float("nan"), defined=False, note="constant input")
    return SpearmanResult(rho=float((dx * dy).sum() / math.sqrt(vx * vy)), defined=True)


# --- snapshots ---


@dataclass
class MetricBundle:
    step: int
    layers: list[int]
    languages: list[str]
    entropy: dict          # (layer, lang) -> float
    jsd: dict              # (layer, "a|b") -> float
    usage: dict            # (layer, lang) -> np.ndarray
    activation: dict       # layer -> ActivationFrequencyTable
    doc_counts: dict       # lang -> int


def _group_by_length(docs: list[np.ndarray]):
    groups: dict[int, list[int]] = {}
    for i, doc in enumerate(docs):
        groups.setdefault(len(doc), []).append(i)
    for length in sorted(groups):
        yield length, groups[length]


def collect_records(model: MoeLM, docs: list[np.ndarray], lang: str,
                    layers: list[int], batch_docs: int = 32) -> list[RoutingRecord]:
    """Trace routing for every document; BOS position excluded."""
    records: list[RoutingRecord] = []
    vocab = model.config.vocab_size
    for doc in docs:
        if doc.max() >= vocab:
            raise ConfigurationError(
                f"corpus token id {int(doc.max())} exceeds model vocabulary {vocab}")
    for length, idxs in _group_by_length(docs):
        for lo in range(0, len(idxs), batch_docs):
            chunk = idxs[lo:lo + batch_docs]
            batch = np.stack([docs[i] for i in chunk])
            traces = model.trace_batch(batch)
            for layer in layers:
                tr = traces[layer]
                probs = tr.probs.reshape(len(chunk), length, -1)
                topk = tr.topk.reshape(len(chunk), length, -1)
                for row, doc_id in enumerate(chunk):
                    records.append(RoutingRecord(lang=lang, doc_id=doc_id, layer=layer,
                                                 probs=probs[row, 1:], topk=topk[row, 1:]))
    return records


def snapshot(model: MoeLM, corpus_dir, languages: list[str], step: int = 0,
             layers: list[int] | None = None, split: str = "valid",
             export_raw_path=None) -> MetricBundle:
    """Run tracing forward passes and aggregate every routing metric.

    Read-only: the model is not mutated. With ``export_raw_path`` the raw
    per-token records are written as JSON lines alongside the aggregates.
    """
    if layers is None:
        layers = list(range(model.config.n_layers))
    entropy, jsd_map, usage, activation = {}, {}, {}, {}
    doc_counts = {}
    raw_fh = None
    if export_raw_path is not None:
        Path(export_raw_path).parent.mkdir(parents=True, exist_ok=True)
        raw_fh = open(export_raw_path, "w", encoding="utf-8")
    try:
        per_layer_records: dict[int, list[RoutingRecord]] = {la: [] for la in layers}
        for lang in languages:
            docs = load_split(corpus_dir, lang, split)
            if not docs:
                raise InputError(f"empty {split} split for '{lang}'")
            doc_counts[lang] = len(docs)
            records = collect_records(model, docs, lang, layers)
            by_layer: dict[int, list[ExpertUsageDistribution]] = {la: [] for la in layers}
            for rec in records:
                by_layer[rec.layer].append(doc_usage(rec))
                per_layer_records[rec.layer].append(rec)
                if raw_fh is not None:
                    _write_raw(raw_fh, step, rec)
            for layer in layers:
                lu = lang_usage(by_layer[layer])
                usage[(layer, lang)] = lu.q
                entropy[(layer, lang)] = router_entropy(lu)
        for layer in layers:
            activation[layer] = activation_frequencies(per_layer_records[layer], languages)
            for i, a in enumerate(languages):
                for b in languages[i + 1:]:
                    jsd_map[(layer, pair_key(a, b))] = pairwise_jsd(
                        usage[(layer, a)], usage[(layer, b)])
    finally:
        if raw_fh is not None:
            raw_fh.close()
    return MetricBundle(step=step, layers=list(layers), languages=list(languages),
                        entropy=entropy, jsd=jsd_map, usage=usage,
                        activation=activation, doc_counts=doc_counts)


def _write_raw(fh, step: int, rec: RoutingRecord) -> None:
    for t in range(rec.probs.shape[0]):
        fh.write(json.dumps({
            "step": step, "layer": rec.layer, "language": rec.lang,
            "doc": rec.doc_id, "token_index": t,
            "topk": [int(e) for e in rec.topk[t]],
            "probs": [float(p) for p in rec.probs[t]],
        }, sort_keys=True, separators=(",", ":")) + "\n")


def load_raw_records(path) -> list[RoutingRecord]:
    """Rebuild RoutingRecords from a raw JSONL export."""
    rows: dict[tuple, list] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            d = json.loads(line)
            rows.setdefault((d["language"], d["doc"], d["layer"]), []).append(d)
    records = []
    for (lang, doc, layer), toks in sorted(rows.items()):
        toks.sort(key=lambda d: d["token_index"])
        records.append(RoutingRecord(
            lang=lang, doc_id=doc, layer=layer,
            probs=np.array([t["probs"] for t in toks]),
            topk=np.array([t["topk"] for t in toks]),
        ))
    return records


def mean_pairwise_jsd(bundle: MetricBundle, layer: int,
                      languages: list[str] | None = None) -> float:
    """Unweighted mean JSD over unordered language pairs at one layer."""
    langs = languages if languages is not None else bundle.languages
    vals = []
    for i, a in enumerate(langs):
        for b in langs[i + 1:]:
            vals.append(bundle.jsd[(layer, pair_key(a, b))])
    if not vals:
        raise InputError("mean_pairwise_jsd needs at least one language pair")
    return float(np.mean(vals))


def _fmt(x: float) -> str:
    return repr(float(x))


def write_bundle(bundle: MetricBundle, out_dir) -> None:
    """CSV tables plus a structured JSON mirror, byte-deterministic."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "entropy.csv", "w", encoding="utf-8") as fh:
        fh.write("step,layer,language,entropy\n")
        for layer in bundle.layers:
            for lang in bundle.languages:
                fh.write(f"{bundle.step},{layer},{lang},{_fmt(bundle.entropy[(layer, lang)])}\n")
    with open(out_dir / "jsd.csv", "w", encoding="utf-8") as fh:
        fh.write("step,layer,lang_a,lang_b,jsd\n")
        for layer in bundle.layers:
            for i, a in enumerate(bundle.languages):
                for b in bundle.languages[i + 1:]:
                    val = bundle.jsd[(layer, pair_key(a, b))]
                    fh.write(f"{bundle.step},{layer},{a},{b},{_fmt(val)}\n")
    with open(out_dir / "activation.csv", "w", encoding="utf-8") as fh:
        fh.write("step,layer,language,expert,frequency\n")
        for layer in bundle.layers:
            table = bundle.activation[layer]
            for li, lang in enumerate(table.languages):
                for e in range(table.freq.shape[1]):
                    fh.write(f"{bundle.step},{layer},{lang},{e},{_fmt(table.freq[li, e])}\n")
    mirror = {
        "step": bundle.step,
        "layers": bundle.layers,
        "languages": bundle.languages,
        "entropy": {f"{la}/{lang}": bundle.entropy[(la, lang)]
                    for la in bundle.layers for lang in bundle.languages},
        "jsd": {f"{la}/{key}": val for (la, key), val in sorted(bundle.jsd.items())},
        "usage": {f"{la}/{lang}": [float(x) for x in q]
                  for (la, lang), q in sorted(bundle.usage.items())},
        "activation": {
            str(la): {
                "languages": t.languages,
                "freq": [[float(x) for x in row] for row in t.freq],
                "token_counts": [int(c) for c in t.token_counts],
            } for la, t in bundle.activation.items()
        },
        "doc_counts": bundle.doc_counts,
        "log_base": "e",
    }
    with open(out_dir / "bundle.json", "w", encoding="utf-8") as fh:
        json.dump(mirror, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_bundle(out_dir) -> dict:
    with open(Path(out_dir) / "bundle.json", "r", encoding="utf-8") as fh:
        return json.load(fh)
