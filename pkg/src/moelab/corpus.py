"""Synthetic multilingual corpora with controlled vocabulary overlap.

Languages draw token ids from a shared global space. Each language's
vocabulary is the union of: one optional global-common pool (all
languages), one shared pool per language group (sized so the pairwise
Jaccard overlap inside the group hits its target), and a private pool.
Documents are sampled from a per-language Markov chain built as a
Metropolis walk over a sparse symmetric successor graph, so the chain's
stationary distribution is exactly the language's Zipfian unigram while
transitions stay sparse.

Corpus files: one document per line, space-separated decimal token ids,
UTF-8. The manifest report carries target and achieved overlaps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import rng
from .errors import ConfigurationError, InputError

BOS_ID = 0


@dataclass
class LanguageSpec:
    """A synthetic language: vocabulary, unigram law, and transition graph."""

    lang: str
    vocab: np.ndarray              # sorted global token ids, BOS excluded
    unigram: np.ndarray            # Zipfian probabilities aligned with vocab
    successors: list[np.ndarray]   # symmetric neighbor lists (vocab indices)
    doc_len_min: int
    doc_len_max: int

    def __post_init__(self):
        if len(self.vocab) == 0:
            raise ConfigurationError(f"language '{self.lang}' has an empty vocabulary")
        if BOS_ID in self.vocab:
            raise ConfigurationError(f"language '{self.lang}' vocabulary contains BOS")
        if abs(self.unigram.sum() - 1.0) > 1e-9 or (self.unigram < 0).any():
            raise ConfigurationError(f"language '{self.lang}' unigram is not a distribution")

    @property
    def cdf(self) -> np.ndarray:
        cached = getattr(self, "_cdf", None)
        if cached is None:
            cached = np.cumsum(self.unigram)
            object.__setattr__(self, "_cdf", cached)
        return cached


@dataclass
class CorpusConfig:
    """Generation parameters; a pure function of this + nothing else."""

    seed: int = 0
    vocab_size: int = 512
    lang_vocab_size: int = 120
    global_common_size: int = 22
    zipf_exponent: float = 1.1
    rank_noise: float = 0.5
    successor_count: int = 8
    doc_len_min: int = 32
    doc_len_max: int = 127
    train_docs: int = 5000
    valid_docs: int = 100
    test_docs: int = 100
    groups: list = field(default_factory=list)        # [{"languages": [...], "overlap": s}]
    pretrain_languages: list = field(default_factory=list)
    target_languages: list = field(default_factory=list)
    anchors: dict = field(default_factory=dict)       # target -> anchor

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        return cls(**d)

    def all_languages(self) -> list[str]:
        out = []
        for group in self.groups:
            for lang in group["languages"]:
                if lang in out:
                    raise ConfigurationError(f"language '{lang}' appears in two groups")
                out.append(lang)
        return out


@dataclass
class CorpusManifest:
    config: CorpusConfig
    languages: dict                 # lang -> LanguageSpec
    target_overlap: dict            # (a, b) sorted-pair key "a|b" -> target or None
    splits: dict                    # split -> docs per language


def default_corpus_config(n_high: int = 5, n_targets: int = 3, seed: int = 0,
                          vocab_size: int = 512, lang_vocab_size: int = 120,
                          global_common_size: int = 22,
                          train_docs: int = 5000, valid_docs: int = 100,
                          test_docs: int = 100) -> CorpusConfig:
    """The desk experiment layout: high-resource languages hr*, targets lr*.

    Targets join their anchor's group so anchor-target overlap matches the
    group level; the three groups span high/mid/low overlap and all other
    pairs share only the global-common pool.
    """
    high = [f"hr{i}" for i in range(n_high)]
    targets = [f"lr{i}" for i in range(n_targets)]
    levels = [0.9, 0.5, 0.2]
    groups, anchors = [], {}
    # pair up high-resource languages: (hr0,hr1) @ .9, (hr2,hr3) @ .5, hr4 solo
    used = set()
    pair_defs = []
    for i in range(0, n_high - 1, 2):
        pair_defs.append(([high[i], high[i + 1]], levels[min(len(pair_defs), 2)]))
        used.update((high[i], high[i + 1]))
    solo = [h for h in high if h not in used]
    group_langs = [list(p[0]) for p in pair_defs] + [[s] for s in solo]
    group_levels = [p[1] for p in pair_defs] + [None] * len(solo)
    # anchors: lr0 -> first language of group 0, lr1 -> group 1, lr2 -> solo
    for j, target in enumerate(targets):
        gi = min(j, len(group_langs) - 1)
        anchor = group_langs[gi][0]
        anchors[target] = anchor
        group_langs[gi].append(target)
        if group_levels[gi] is None:
            group_levels[gi] = levels[min(j, 2)]
    for langs, level in zip(group_langs, group_levels):
        groups.append({"languages": langs, "overlap": level})
    return CorpusConfig(seed=seed, vocab_size=vocab_size,
                        lang_vocab_size=lang_vocab_size,
                        global_common_size=global_common_size,
                        train_docs=train_docs, valid_docs=valid_docs,
                        test_docs=test_docs, groups=groups,
                        pretrain_languages=high, target_languages=targets,
                        anchors=anchors)


class IdAllocator:
    """Hands out disjoint blocks of global token ids, BOS excluded."""

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size
        self.next_id = BOS_ID + 1

    def allocate(self, count: int, what: str) -> np.ndarray:
        if self.next_id + count > self.vocab_size:
            raise ConfigurationError(
                f"global vocabulary exhausted while allocating {count} ids for {what} "
                f"(next={self.next_id}, size={self.vocab_size})"
            )
        block = np.arange(self.next_id, self.next_id + count)
        self.next_id += count
        return block


def shared_pool_size(lang_vocab_size: int, overlap: float, global_common: int) -> int:
    """Group-pool size m so that Jaccard((g+m)/(2n-g-m)) hits ``overlap``.

    Both languages have n tokens of which g+m are shared, so
    J = (g+m)/(2n-(g+m));  solving gives g+m = 2*n*s/(1+s).
    """
    if not 0.0 <= overlap <= 1.0:
        raise ConfigurationError(f"overlap {overlap} outside [0,1]")
    n = lang_vocab_size
    exact = 2.0 * n * overlap / (1.0 + overlap)
    candidates = sorted({int(np.floor(exact)), int(np.ceil(exact))})
    best = min(candidates,
               key=lambda s: abs(s / (2.0 * n - s) - overlap) if s <= n else np.inf)
    m = best - global_common
    if m < 0:
        raise ConfigurationError(
            f"global-common pool ({global_common}) alone exceeds the sharing needed "
            f"for overlap {overlap} at vocab size {n} (needs {best})"
        )
    if global_common + m > n:
        raise ConfigurationError(
            f"overlap {overlap} requires {global_common + m} shared tokens, more than "
            f"the per-language vocabulary {n}"
        )
    achieved = (global_common + m) / (2.0 * n - (global_common + m))
    if abs(achieved - overlap) > 0.02 + 1e-9:
        raise ConfigurationError(
            f"cannot reach overlap {overlap} within +-0.02 at vocab size {n} "
            f"(achievable: {achieved:.4f})"
        )
    return m


def _zipf_weights(size: int, exponent: float, order: np.ndarray) -> np.ndarray:
    """order[r] = vocab index holding frequency rank r (rank 0 most frequent)."""
    ranks = np.empty(size, dtype=np.int64)
    ranks[order] = np.arange(size)
    w = (ranks + 1.0) ** (-exponent)
    return w / w.sum()


def _successor_graph(size: int, unigram: np.ndarray, count: int,
                     gen: np.random.Generator) -> list[np.ndarray]:
    """Sparse symmetric proposal graph; neighbors drawn from the unigram."""
    proposed: list[set] = [set() for _ in range(size)]
    if size > 1:
        cdf = np.cumsum(unigram)
        for u in range(size):
            want = min(count, size - 1)
            picks = proposed[u]
            guard = 0
            while len(picks) < want and guard < 200 * count:
                v = int(np.searchsorted(cdf, gen.random(), side="right"))
                v = min(v, size - 1)
                if v != u:
                    picks.add(v)
                guard += 1
    graph = [set(p) for p in proposed]
    for u in range(size):
        for v in proposed[u]:
            graph[v].add(u)
    return [np.array(sorted(g), dtype=np.int64) for g in graph]


def _base_scores(config: CorpusConfig) -> np.ndarray:
    """One frequency-propensity score per global token id, shared by all
    languages, so shared tokens carry correlated frequencies across
    languages (as cognates do)."""
    return rng.stream(config.seed, "corpus", "base-scores").normal(
        size=config.vocab_size)


def make_language_spec(lang: str, vocab_ids: np.ndarray, config: CorpusConfig) -> LanguageSpec:
    vocab = np.sort(np.asarray(vocab_ids))
    size = len(vocab)
    noise = rng.stream(config.seed, "corpus", "rank-noise", lang).normal(
        0.0, config.rank_noise, size=size)
    scores = _base_scores(config)[vocab] + noise
    order = np.argsort(-scores, kind="stable")
    unigram = _zipf_weights(size, config.zipf_exponent, order)
    graph = _successor_graph(size, unigram, config.successor_count,
                             rng.stream(config.seed, "corpus", "graph", lang))
    return LanguageSpec(lang=lang, vocab=vocab, unigram=unigram, successors=graph,
                        doc_len_min=config.doc_len_min, doc_len_max=config.doc_len_max)


def build_language_group(alloc: IdAllocator, members: list[str], overlap: float | None,
                         global_pool: np.ndarray, config: CorpusConfig) -> dict:
    """Materialize a group of languages sharing one overlap pool."""
    n = config.lang_vocab_size
    g = len(global_pool)
    if overlap is None or len(members) == 1:
        m = 0
    else:
        m = shared_pool_size(n, overlap, g)
    shared = alloc.allocate(m, f"group {members} shared pool")
    specs = {}
    for lang in members:
        private = alloc.allocate(n - g - m, f"language '{lang}' private pool")
        ids = np.concatenate([global_pool, shared, private])
        specs[lang] = make_language_spec(lang, ids, config)
    return specs


def build_language_family(alloc: IdAllocator, anchor: str, target: str,
                          shared_fraction: float, config: CorpusConfig,
                          global_pool: np.ndarray | None = None):
    """Anchor-target pair with the requested vocabulary overlap."""
    if global_pool is None:
        global_pool = np.arange(0, 0)
    specs = build_language_group(alloc, [anchor, target], shared_fraction,
                                 global_pool, config)
    return specs[anchor], specs[target]


def build_manifest(config: CorpusConfig) -> CorpusManifest:
    langs = config.all_languages()
    if config.lang_vocab_size < 1:
        raise ConfigurationError("lang_vocab_size must be positive")
    alloc = IdAllocator(config.vocab_size)
    global_pool = alloc.allocate(config.global_common_size, "global-common pool")
    specs: dict[str, LanguageSpec] = {}
    for group in config.groups:
        specs.update(build_language_group(alloc, group["languages"], group["overlap"],
                                          global_pool, config))
    target_overlap = {}
    for i, a in enumerate(langs):
        for b in langs[i + 1:]:
            declared = None
            for group in config.groups:
                if a in group["languages"] and b in group["languages"]:
                    declared = group["overlap"]
            target_overlap[pair_key(a, b)] = declared
    splits = {"train": config.train_docs, "valid": config.valid_docs,
              "test": config.test_docs}
    return CorpusManifest(config=config, languages=specs,
                          target_overlap=target_overlap, splits=splits)


def pair_key(a: str, b: str) -> str:
    return "|".join(sorted((a, b)))


def vocab_overlap(a, b) -> float:
    """Jaccard index of two token-id vocabularies (specs or id sets)."""
    sa = set(int(t) for t in (a.vocab if isinstance(a, LanguageSpec) else a))
    sb = set(int(t) for t in (b.vocab if isinstance(b, LanguageSpec) else b))
    if not sa or not sb:
        raise InputError("vocab_overlap on an empty vocabulary")
    return len(sa & sb) / len(sa | sb)


def corpus_token_set(docs) -> set[int]:
    """Distinct token ids observed in documents, excluding BOS."""
    out: set[int] = set()
    for doc in docs:
        out.update(int(t) for t in doc)
    out.discard(BOS_ID)
    return out


def generate_document(spec: LanguageSpec, length: int, gen: np.random.Generator) -> np.ndarray:
    """BOS followed by ``length`` tokens of a Metropolis walk.

    Proposals are uniform over the successor set; acceptance
    min(1, pi(v)*deg(u) / (pi(u)*deg(v))) makes the Zipfian unigram the
    exact stationary law. The first token is drawn from the unigram, so
    the walk starts in stationarity.
    """
    if length < 1:
        raise InputError(f"document length must be >= 1, got {length}")
    doc = np.empty(length + 1, dtype=np.int64)
    doc[0] = BOS_ID
    size = len(spec.vocab)
    u = int(np.searchsorted(spec.cdf, gen.random(), side="right"))
    u = min(u, size - 1)
    doc[1] = spec.vocab[u]
    if length > 1:
        draws = gen.random(2 * (length - 1))
        pi = spec.unigram
        nbrs = spec.successors
        for t in range(length - 1):
            nb = nbrs[u]
            deg_u = len(nb)
            if deg_u > 0:
                v = int(nb[int(draws[2 * t] * deg_u)])
                accept = (pi[v] * deg_u) / (pi[u] * len(nbrs[v]))
                if draws[2 * t + 1] < accept:
                    u = v
            doc[t + 2] = spec.vocab[u]
    return doc


def _doc_stream(config: CorpusConfig, lang: str, split: str, index: int):
    return rng.stream(config.seed, "corpus", "doc", lang, split, index)


def generate_split(manifest: CorpusManifest, lang: str, split: str) -> list[np.ndarray]:
    spec = manifest.languages[lang]
    count = manifest.splits[split]
    docs = []
    for i in range(count):
        gen = _doc_stream(manifest.config, lang, split, i)
        length = int(gen.integers(spec.doc_len_min, spec.doc_len_max + 1))
        docs.append(generate_document(spec, length, gen))
    return docs


def emit_corpus(manifest: CorpusManifest, out_dir) -> dict:
    """Write corpus files and the achieved-overlap report; returns the report."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out_dir}: {exc}") from exc
    langs = manifest.config.all_languages()
    observed: dict[str, set] = {}
    report: dict = {
        "seed": manifest.config.seed,
        "languages": {},
        "target_overlap": {},
        "achieved_overlap": {},
    }
    for lang in langs:
        lang_info: dict = {"vocab_size": int(len(manifest.languages[lang].vocab)),
                           "splits": {}}
        for split in ("train", "valid", "test"):
            docs = generate_split(manifest, lang, split)
            path = out_dir / f"{lang}.{split}.txt"
            with open(path, "w", encoding="utf-8") as fh:
                for doc in docs:
                    fh.write(" ".join(str(int(t)) for t in doc))
                    fh.write("\n")
            lang_info["splits"][split] = {
                "docs": len(docs),
                "tokens": int(sum(len(d) for d in docs)),
            }
            if split == "train":
                observed[lang] = corpus_token_set(docs)
        report["languages"][lang] = lang_info
    for i, a in enumerate(langs):
        for b in langs[i + 1:]:
            key = pair_key(a, b)
            target = manifest.target_overlap[key]
            achieved = len(observed[a] & observed[b]) / len(observed[a] | observed[b])
            report["target_overlap"][key] = target
            report["achieved_overlap"][key] = achieved
    with open(out_dir / "corpus_report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(out_dir / "corpus_config.json", "w", encoding="utf-8") as fh:
        json.dump(manifest.config.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    return report


def load_split(corpus_dir, lang: str, split: str) -> list[np.ndarray]:
    path = Path(corpus_dir) / f"{lang}.{split}.txt"
    if not path.exists():
        raise InputError(f"missing corpus file {path}")
    docs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                docs.append(np.array(line.split(), dtype=np.int64))
    return docs


def load_corpus_config(corpus_dir) -> CorpusConfig:
    with open(Path(corpus_dir) / "corpus_config.json", "r", encoding="utf-8") as fh:
        return CorpusConfig.from_dict(json.load(fh))


def load_corpus_report(corpus_dir) -> dict:
    with open(Path(corpus_dir) / "corpus_report.json", "r", encoding="utf-8") as fh:
        return json.load(fh)
