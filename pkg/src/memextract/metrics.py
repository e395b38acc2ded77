"""Copy-detection scoring and tiered memorization rates.

A generated sample's *best match* is the training item with the highest
similarity (lowest index on ties).  For a tier ``[alpha, beta)`` the average
memorization score is the fraction of generated samples whose best score lies
in the tier; the unique score counts distinct best-match indices in the tier,
again divided by the number of generated samples.  The top tier is closed at
its upper bound so that the tiers partition ``[alpha_low, 1]``.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from memextract.nn import ShapeError

MATCH_CHUNK = 512


@dataclass(frozen=True)
class SimilarityTier:
    name: str
    alpha: float
    beta: float
    closed: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha < self.beta <= 1.0:
            raise ValueError(f"tier {self.name}: need 0 <= alpha < beta <= 1")

    def contains(self, scores) -> np.ndarray:
        scores = np.asarray(scores)
        upper = scores <= self.beta if self.closed else scores < self.beta
        return (scores >= self.alpha) & upper


def standard_tiers(low=0.4, mid=0.5, high=0.6) -> tuple[SimilarityTier, ...]:
    return (SimilarityTier("low", low, mid), SimilarityTier("mid", mid, high),
            SimilarityTier("high", high, 1.0, closed=True))


STANDARD_TIERS = standard_tiers()


def standardize(x: np.ndarray) -> np.ndarray:
    """Per-sample zero mean, unit norm; constant rows map to zero."""
    x = np.asarray(x, dtype=np.float64)
    c = x - x.mean(axis=1, keepdims=True)
    norm = np.linalg.norm(c, axis=1, keepdims=True)
    return np.divide(c, norm, out=np.zeros_like(c), where=norm > 0)


@dataclass(frozen=True)
class SimilarityScorer:
    """Pairwise similarity between row sets.

    ``cosine_normalized`` standardises each vector then takes the cosine
    (a Pearson correlation, in ``[-1, 1]``).  ``neg_l2_mapped`` maps distance
    to ``1 - |a - b| / (|a| + |b|)`` in ``[0, 1]``.  ``plugin`` calls ``fn``.
    """

    kind: str = "cosine_normalized"
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.kind not in ("cosine_normalized", "neg_l2_mapped", "plugin"):
            raise ValueError(f"unknown scorer {self.kind!r}")
        if (self.kind == "plugin") != (self.fn is not None):
            raise ValueError("a plugin scorer needs fn, other kinds must not set it")

    def prepare(self, x):
        x = np.asarray(x, dtype=np.float64)
        return standardize(x) if self.kind == "cosine_normalized" else x

    def matrix_prepared(self, a, b) -> np.ndarray:
        if self.kind == "cosine_normalized":
            return np.clip(a @ b.T, -1.0, 1.0)
        if self.kind == "neg_l2_mapped":
            na = np.linalg.norm(a, axis=1)[:, None]
            nb = np.linalg.norm(b, axis=1)[None, :]
            d2 = np.maximum(na ** 2 + nb ** 2 - 2.0 * (a @ b.T), 0.0)
            denom = na + nb
            return np.where(denom > 0, 1.0 - np.sqrt(d2) / np.where(denom > 0, denom, 1.0), 1.0)
        return np.asarray(self.fn(a, b), dtype=np.float64)

    def matrix(self, a, b) -> np.ndarray:
        return self.matrix_prepared(self.prepare(a), self.prepare(b))


@dataclass(frozen=True)
class MatchRecord:
    gen_index: int
    train_index: int
    score: float


def best_matches(gen, train, scorer: SimilarityScorer = SimilarityScorer()) -> list[MatchRecord]:
    """Exact best match for every generated row (ties go to the lowest training index)."""
    gen = np.asarray(gen, dtype=np.float64)
    train = np.asarray(train, dtype=np.float64)
    if gen.ndim != 2 or train.ndim != 2 or len(gen) == 0 or len(train) == 0:
        raise ShapeError("need non-empty 2-d generated and training arrays")
    if gen.shape[1] != train.shape[1]:
        raise ShapeError(f"dimension mismatch: generated {gen.shape[1]} vs training {train.shape[1]}")
    idx, scores = best_match_arrays(gen, train, scorer)
    return [MatchRecord(i, int(j), float(s)) for i, (j, s) in enumerate(zip(idx, scores))]


def best_match_arrays(gen, train, scorer: SimilarityScorer = SimilarityScorer(), threads: int = 1):
    """Best-match indices and scores as arrays; chunks of generated rows run on ``threads`` workers."""
    g = scorer.prepare(gen)
    tr = scorer.prepare(train)
    idx = np.empty(len(g), dtype=np.int64)
    scores = np.empty(len(g))

    def chunk(s):
        sim = scorer.matrix_prepared(g[s:s + MATCH_CHUNK], tr)
        j = np.argmax(sim, axis=1)
        idx[s:s + len(j)] = j
        scores[s:s + len(j)] = sim[np.arange(len(j)), j]

    starts = range(0, len(g), MATCH_CHUNK)
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(chunk, starts))
    else:
        for s in starts:
            chunk(s)
    return idx, scores


def _arrays(records):
    if isinstance(records, tuple):
        return np.asarray(records[0]), np.asarray(records[1])
    return (np.array([r.train_index for r in records], dtype=np.int64),
            np.array([r.score for r in records], dtype=np.float64))


def ams(records, tier: SimilarityTier, n_gen: int | None = None) -> float:
    """Fraction of generated samples whose best score falls in ``tier``."""
    idx, scores = _arrays(records)
    n_gen = len(scores) if n_gen is None else n_gen
    if n_gen <= 0:
        raise ValueError("N_G must be positive")
    if n_gen != len(scores):
        raise ValueError(f"N_G={n_gen} but {len(scores)} match records")
    return int(tier.contains(scores).sum()) / n_gen


def ums(records, tier: SimilarityTier, n_gen: int | None = None) -> float:
    """Distinct in-tier best-match training indices, divided by N_G."""
    idx, scores = _arrays(records)
    n_gen = len(scores) if n_gen is None else n_gen
    if n_gen <= 0:
        raise ValueError("N_G must be positive")
    if n_gen != len(scores):
        raise ValueError(f"N_G={n_gen} but {len(scores)} match records")
    return len(np.unique(idx[tier.contains(scores)])) / n_gen


@dataclass
class TierResult:
    tier: SimilarityTier
    ams: float
    ums: float
    count: int
    unique: int


@dataclass
class MemorizationReport:
    lam: float
    n_gen: int
    tiers: list[TierResult]
    train_index: np.ndarray = field(repr=False, default=None)
    scores: np.ndarray = field(repr=False, default=None)

    def tier(self, name: str) -> TierResult:
        for r in self.tiers:
            if r.tier.name == name:
                return r
        raise KeyError(name)


def evaluate(gen, train, lam: float, tiers: Sequence[SimilarityTier] = STANDARD_TIERS,
             scorer: SimilarityScorer = SimilarityScorer(), threads: int = 1) -> MemorizationReport:
    gen, train = np.asarray(gen), np.asarray(train)
    if gen.ndim != 2 or train.ndim != 2 or gen.shape[1] != train.shape[1]:
        raise ShapeError(f"cannot match generated {gen.shape} against training {train.shape}")
    idx, scores = best_match_arrays(gen, train, scorer, threads)
    n = len(scores)
    results = []
    for tier in tiers:
        mask = tier.contains(scores)
        results.append(TierResult(tier, ams((idx, scores), tier, n), ums((idx, scores), tier, n),
                                  int(mask.sum()), len(np.unique(idx[mask]))))
    return MemorizationReport(lam, n, results, idx, scores)


REPORT_COLUMNS = ["lambda", "tier", "alpha", "beta", "ams", "ums", "in_tier_count",
                  "unique_count", "n_gen"]
MATCH_COLUMNS = ["lambda", "gen_index", "train_index", "score"]


def _fmt(x: float) -> str:
    return repr(float(x))


def report_rows(report: MemorizationReport) -> list[list[str]]:
    return [[_fmt(report.lam), r.tier.name, _fmt(r.tier.alpha), _fmt(r.tier.beta), _fmt(r.ams),
             _fmt(r.ums), str(r.count), str(r.unique), str(report.n_gen)] for r in report.tiers]


def reports_csv(reports: Sequence[MemorizationReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for rep in reports:
        w.writerows(report_rows(rep))
    return buf.getvalue()


def matches_csv(reports: Sequence[MemorizationReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MATCH_COLUMNS)
    for rep in reports:
        for i, (j, s) in enumerate(zip(rep.train_index, rep.scores)):
            w.writerow([_fmt(rep.lam), i, int(j), _fmt(s)])
    return buf.getvalue()


def read_reports_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("lambda", "alpha", "beta", "ams", "ums"):
            r[k] = float(r[k])
        for k in ("in_tier_count", "unique_count", "n_gen"):
            r[k] = int(r[k])
    return rows


def expected_mem_count(p, n_gen: int) -> float:
    """Expected number of in-tier generations over ``n_gen`` independent draws."""
    p = _check_probs(p)
    return float(n_gen * p.sum())


def expected_unique_mem_count(p, n_gen: int) -> float:
    """Expected number of distinct training items hit at least once in ``n_gen`` draws."""
    p = _check_probs(p)
    return float(np.sum(1.0 - (1.0 - p) ** n_gen))


def _check_probs(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must lie in [0, 1]")
    return p


def empirical_mem_probs(report: MemorizationReport, tier: SimilarityTier, n_train: int) -> np.ndarray:
    """Per-training-item frequency of being the in-tier best match."""
    mask = tier.contains(report.scores)
    return np.bincount(report.train_index[mask], minlength=n_train) / report.n_gen


def simulate_generation_runs(p, n_gen: int, runs: int, rng: np.random.Generator):
    """Monte Carlo of ``runs`` generation rounds of ``n_gen`` draws each.

    Each draw memorizes training item ``i`` with probability ``p[i]`` and
    nothing otherwise (events exclusive, so ``sum(p) <= 1``).  Returns the
    per-run memorization counts and distinct-item counts.
    """
    p = _check_probs(p)
    if p.sum() > 1.0 + 1e-12:
        raise ValueError("exclusive memorization events need sum(p) <= 1")
    m = len(p)
    outcome = rng.choice(m + 1, size=(runs, n_gen), p=np.append(p, max(0.0, 1.0 - p.sum())))
    flat = np.arange(runs)[:, None] * (m + 1) + outcome
    per_item = np.bincount(flat.ravel(), minlength=runs * (m + 1)).reshape(runs, m + 1)[:, :m]
    return per_item.sum(axis=1), (per_item > 0).sum(axis=1)
