"""Exact dense retrieval, ranking metrics and paired significance statistics.

All searches are brute force over unit-norm rows; ties are broken by
ascending document index so every ranking is reproducible.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import gammaincc

from .errors import ConfigurationError, ContractError, DataError

TOP_K = 10


@dataclass
class CorpusIndex:
    doc_ids: list
    embeddings: np.ndarray
    qrels: dict = field(default_factory=dict)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.doc_ids):
            raise DataError(
                f"embeddings {self.embeddings.shape} do not match {len(self.doc_ids)} doc ids"
            )
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise DataError("doc_ids must be unique")
        norms = np.linalg.norm(self.embeddings, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-5)
        if bad.size:
            raise DataError(f"{bad.size} corpus rows are not unit norm (first: {self.doc_ids[bad[0]]})")
        self.qrels = {k: set(v) for k, v in self.qrels.items()}
        self.position = {doc: i for i, doc in enumerate(self.doc_ids)}

    @property
    def size(self) -> int:
        return len(self.doc_ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def _rank_scores(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ties by ascending index."""
    m = scores.shape[0]
    if k < m:
        threshold = np.partition(scores, m - k)[m - k]
        pool = np.flatnonzero(scores >= threshold)
    else:
        pool = np.arange(m)
    order = np.lexsort((pool, -scores[pool]))
    return pool[order[:k]]


def topk_search(query, index: CorpusIndex, k: int = TOP_K):
    """Exact top-``k`` by dot product.

    ``query`` is one vector ``[d]`` (returns ``(indices [k], scores [k])``) or
    a batch ``[Q, d]`` (returns ``[Q, k]`` arrays). Scores are row-wise dot
    products. They are reduced row by row rather than through BLAS so that
    identical documents always receive bit-identical scores and fall back to
    the ascending-index tie-break.
    """
    if k < 1 or k > index.size:
        raise ConfigurationError(f"k={k} must be in [1, {index.size}]")
    q = np.asarray(query, dtype=np.float64)
    if q.shape[-1] != index.dim:
        raise ConfigurationError(f"query width {q.shape[-1]} does not match index width {index.dim}")
    single = q.ndim == 1
    q = np.atleast_2d(q)
    idx = np.empty((q.shape[0], k), dtype=np.int64)
    val = np.empty((q.shape[0], k))
    for i, row in enumerate(q):
        scores = (index.embeddings * row).sum(axis=1)
        top = _rank_scores(scores, k)
        idx[i] = top
        val[i] = scores[top]
    if single:
        return idx[0], val[0]
    return idx, val


# -- per-trigger metrics -------------------------------------------------------------

def hit_at_k(ranked: Sequence[str], relevant, k: int = TOP_K) -> bool:
    return any(doc in relevant for doc in ranked[:k])


def reciprocal_rank(ranked: Sequence[str], relevant, k: int = TOP_K) -> float:
    for r, doc in enumerate(ranked[:k], start=1):
        if doc in relevant:
            return 1.0 / r
    return 0.0


def ndcg(ranked: Sequence[str], relevant, k: int = TOP_K) -> float:
    """Binary-gain nDCG with a log2 discount; ideal DCG truncated at ``min(k, |relevant|)``."""
    if not relevant:
        return 0.0
    dcg = sum(1.0 / math.log2(r + 1) for r, doc in enumerate(ranked[:k], start=1) if doc in relevant)
    ideal = sum(1.0 / math.log2(r + 1) for r in range(1, min(k, len(relevant)) + 1))
    return dcg / ideal


def _scored_triggers(results: Mapping[str, Sequence[str]], qrels: Mapping[str, set]):
    missing = sorted(t for t in results if t not in qrels)
    if missing:
        raise DataError(f"no qrels entry for triggers: {missing}")
    return [(t, ranked, qrels[t]) for t, ranked in results.items() if qrels[t]]


def recall_at_k(results: Mapping[str, Sequence[str]], qrels: Mapping[str, set], k: int = TOP_K) -> float:
    """Fraction of triggers (with non-empty qrels) that have a relevant doc in the top ``k``."""
    rows = _scored_triggers(results, qrels)
    return float(np.mean([hit_at_k(r, rel, k) for _, r, rel in rows])) if rows else 0.0


def mrr_at_k(results: Mapping[str, Sequence[str]], qrels: Mapping[str, set], k: int = TOP_K) -> float:
    rows = _scored_triggers(results, qrels)
    return float(np.mean([reciprocal_rank(r, rel, k) for _, r, rel in rows])) if rows else 0.0


def ndcg_at_k(results: Mapping[str, Sequence[str]], qrels: Mapping[str, set], k: int = TOP_K) -> float:
    rows = _scored_triggers(results, qrels)
    return float(np.mean([ndcg(r, rel, k) for _, r, rel in rows])) if rows else 0.0


def random_chance_recall(index: CorpusIndex, trigger_ids: Sequence[str], k: int = TOP_K) -> float:
    """Expected Recall@k of a uniformly random ranking over the corpus."""
    m = index.size
    vals = []
    for t in trigger_ids:
        r = len(index.qrels.get(t, ()))
        if r == 0:
            continue
        miss = 1.0
        for i in range(k):
            miss *= max(m - r - i, 0) / (m - i)
        vals.append(1.0 - miss)
    return float(np.mean(vals)) if vals else 0.0


@dataclass
class PerTriggerResult:
    trigger_id: str
    conversation_id: str
    doc_ids: list
    scores: list
    hit: bool
    reciprocal_rank: float
    ndcg: float
    n_relevant: int


def score_rankings(
    trigger_ids: Sequence[str],
    conversation_ids: Sequence[str],
    queries: np.ndarray,
    index: CorpusIndex,
    k: int = TOP_K,
) -> list[PerTriggerResult]:
    """Search every query and score it against ``index.qrels``."""
    missing = sorted(t for t in trigger_ids if t not in index.qrels)
    if missing:
        raise DataError(f"no qrels entry for triggers: {missing}")
    idx, val = topk_search(np.atleast_2d(queries), index, k)
    out = []
    for t, c, row, scores in zip(trigger_ids, conversation_ids, idx, val):
        ranked = [index.doc_ids[i] for i in row]
        rel = index.qrels[t]
        out.append(
            PerTriggerResult(
                trigger_id=t,
                conversation_id=c,
                doc_ids=ranked,
                scores=[float(s) for s in scores],
                hit=hit_at_k(ranked, rel, k),
                reciprocal_rank=reciprocal_rank(ranked, rel, k),
                ndcg=ndcg(ranked, rel, k),
                n_relevant=len(rel),
            )
        )
    return out


# -- paired statistics --------------------------------------------------------------

@dataclass(frozen=True)
class BootstrapCI:
    point: float
    low: float
    high: float


def bootstrap_ci(ours, baseline, resamples: int = 1000, seed: int = 0, level: float = 0.95) -> BootstrapCI:
    """Percentile bootstrap CI of ``mean(ours - baseline)``, resampling triggers with replacement."""
    ours = np.asarray(ours, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if ours.shape != baseline.shape or ours.ndim != 1:
        raise ContractError(f"bootstrap_ci needs paired 1-D vectors, got {ours.shape} and {baseline.shape}")
    n = ours.size
    if n < 1:
        raise ContractError("bootstrap_ci needs at least one trigger")
    delta = ours - baseline
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, n, size=(resamples, n))
    means = delta[draws].mean(axis=1)
    tail = 100.0 * (1.0 - level) / 2.0
    low, high = np.percentile(means, [tail, 100.0 - tail])
    return BootstrapCI(float(delta.mean()), float(low), float(high))


@dataclass(frozen=True)
class McNemarResult:
    b: int
    c: int
    chi2: float
    p: float


def mcnemar_from_counts(b: int, c: int) -> McNemarResult:
    """Continuity-corrected McNemar test from the two discordant counts."""
    if b + c == 0:
        return McNemarResult(int(b), int(c), 0.0, 1.0)
    chi2 = (abs(b - c) - 1.0) ** 2 / (b + c)
    # chi-square survival with 1 dof: Q(1/2, x/2)
    return McNemarResult(int(b), int(c), float(chi2), float(gammaincc(0.5, chi2 / 2.0)))


def mcnemar(ours_hits, base_hits) -> McNemarResult:
    """``b`` counts ours-only successes, ``c`` baseline-only successes."""
    ours = np.asarray(ours_hits, dtype=bool)
    base = np.asarray(base_hits, dtype=bool)
    if ours.shape != base.shape:
        raise ContractError(f"mcnemar needs paired vectors, got {ours.shape} and {base.shape}")
    return mcnemar_from_counts(int(np.sum(ours & ~base)), int(np.sum(base & ~ours)))


@dataclass(frozen=True)
class WinTieLoss:
    wins: int
    ties: int
    losses: int

    @property
    def total(self) -> int:
        return self.wins + self.ties + self.losses

    @property
    def agreement(self) -> float:
        return self.ties / self.total if self.total else 1.0


def win_tie_loss(ours_hits, base_hits) -> WinTieLoss:
    ours = np.asarray(ours_hits, dtype=bool)
    base = np.asarray(base_hits, dtype=bool)
    if ours.shape != base.shape:
        raise ContractError(f"win_tie_loss needs paired vectors, got {ours.shape} and {base.shape}")
    wins = int(np.sum(ours & ~base))
    losses = int(np.sum(base & ~ours))
    return WinTieLoss(wins, ours.size - wins - losses, losses)


@dataclass
class ConversationRow:
    conversation_id: str
    n_triggers: int
    agreement: float
    ours_recall: float
    baseline_recall: float

    @property
    def gap(self) -> float:
        return self.baseline_recall - self.ours_recall


@dataclass
class ConversationAnalysis:
    rows: list
    mean_agreement: float
    failure_concentrated: list
    min_triggers: int
    gap_threshold: float


def _pair(ours: Sequence[PerTriggerResult], baseline: Sequence[PerTriggerResult]):
    base_by_id = {r.trigger_id: r for r in baseline}
    ours_ids = [r.trigger_id for r in ours]
    if set(ours_ids) != set(base_by_id) or len(ours_ids) != len(base_by_id):
        raise ContractError("ours and baseline results must cover the same triggers")
    pairs = [(r, base_by_id[r.trigger_id]) for r in ours]
    return [(o, b) for o, b in pairs if o.n_relevant > 0]


def per_conversation_analysis(
    ours: Sequence[PerTriggerResult],
    baseline: Sequence[PerTriggerResult],
    min_triggers: int = 3,
    gap_threshold: float = 0.25,
) -> ConversationAnalysis:
    """Per-conversation agreement (tie rate) and the conversations where ours trails badly.

    A conversation is failure-concentrated when it has at least ``min_triggers``
    triggers and ``baseline_recall - ours_recall >= gap_threshold``. The mean
    agreement is unweighted over conversations.
    """
    groups = defaultdict(list)
    for o, b in _pair(ours, baseline):
        groups[o.conversation_id].append((o.hit, b.hit))
    rows = []
    for conv in sorted(groups):
        hits = np.array(groups[conv], dtype=bool)
        rows.append(
            ConversationRow(
                conversation_id=conv,
                n_triggers=len(hits),
                agreement=float(np.mean(hits[:, 0] == hits[:, 1])),
                ours_recall=float(hits[:, 0].mean()),
                baseline_recall=float(hits[:, 1].mean()),
            )
        )
    flagged = [
        r.conversation_id
        for r in rows
        if r.n_triggers >= min_triggers and r.gap >= gap_threshold - 1e-12
    ]
    mean_agreement = float(np.mean([r.agreement for r in rows])) if rows else 1.0
    return ConversationAnalysis(rows, mean_agreement, flagged, min_triggers, gap_threshold)


# -- report --------------------------------------------------------------------------

METRICS = ("recall@10", "mrr@10", "ndcg@10")


def _metric_vectors(results: Sequence[PerTriggerResult]) -> dict:
    kept = [r for r in results if r.n_relevant > 0]
    return {
        "recall@10": np.array([float(r.hit) for r in kept]),
        "mrr@10": np.array([r.reciprocal_rank for r in kept]),
        "ndcg@10": np.array([r.ndcg for r in kept]),
    }


@dataclass
class EvalReport:
    system: str
    n_triggers: int
    excluded_triggers: list
    metrics: dict
    per_trigger: list = field(repr=False, default_factory=list)
    baseline: str | None = None
    baseline_metrics: dict | None = None
    deltas: dict | None = None
    confidence_intervals: dict | None = None
    mcnemar: McNemarResult | None = None
    win_tie_loss: WinTieLoss | None = None
    conversations: ConversationAnalysis | None = field(repr=False, default=None)
    retention: float | None = None

    @property
    def recall(self) -> float:
        return self.metrics["recall@10"]

    def to_dict(self, include_per_trigger: bool = True) -> OrderedDict:
        out = OrderedDict()
        out["system"] = self.system
        out["n_triggers"] = self.n_triggers
        out["excluded_triggers"] = list(self.excluded_triggers)
        out["metrics"] = OrderedDict((m, self.metrics[m]) for m in METRICS)
        if self.baseline is not None:
            out["baseline"] = self.baseline
            out["baseline_metrics"] = OrderedDict((m, self.baseline_metrics[m]) for m in METRICS)
            out["deltas"] = OrderedDict((m, self.deltas[m]) for m in METRICS)
            out["confidence_intervals"] = OrderedDict(
                (m, [self.confidence_intervals[m].low, self.confidence_intervals[m].high]) for m in METRICS
            )
            out["retention"] = self.retention
            out["mcnemar"] = asdict(self.mcnemar)
            wtl = self.win_tie_loss
            out["win_tie_loss"] = OrderedDict(
                [("wins", wtl.wins), ("ties", wtl.ties), ("losses", wtl.losses), ("agreement", wtl.agreement)]
            )
            conv = self.conversations
            out["conversations"] = OrderedDict(
                [
                    ("count", len(conv.rows)),
                    ("mean_agreement", conv.mean_agreement),
                    ("min_triggers", conv.min_triggers),
                    ("gap_threshold", conv.gap_threshold),
                    ("failure_concentrated", list(conv.failure_concentrated)),
                    ("rows", [asdict(r) for r in conv.rows]),
                ]
            )
        if include_per_trigger:
            out["per_trigger"] = [asdict(r) for r in self.per_trigger]
        return out

    def to_json(self, include_per_trigger: bool = True) -> str:
        return json.dumps(self.to_dict(include_per_trigger), indent=2)

    def render_table(self) -> str:
        """Plain-text table laid out like the main results table (no latency column)."""
        lines = [f"{'':<10}{'Recall@10':>16}{'MRR@10':>16}{'nDCG@10':>16}"]
        if self.baseline is not None:
            lines.append(self._row(self.baseline, self.baseline_metrics))
        lines.append(self._row(self.system, self.metrics))
        if self.baseline is not None:
            lines.append(
                f"{'delta':<10}"
                + "".join(f"{100 * self.deltas[m]:>+15.1f}%" for m in METRICS)
            )
            lines.append(
                f"{'95% CI':<10}"
                + "".join(
                    f"{f'[{100 * self.confidence_intervals[m].low:+.1f}, {100 * self.confidence_intervals[m].high:+.1f}]':>16}"
                    for m in METRICS
                )
            )
            mc, wtl = self.mcnemar, self.win_tie_loss
            lines.append(f"McNemar chi2 = {mc.chi2:.2f}, p = {mc.p:.4f} (b={mc.b}, c={mc.c})")
            lines.append(
                f"win/tie/loss = {wtl.wins}/{wtl.ties}/{wtl.losses}, agreement {100 * wtl.agreement:.1f}%"
            )
            lines.append(f"retention (Recall@10) = {100 * self.retention:.1f}%")
        return "\n".join(lines)

    @staticmethod
    def _row(name: str, metrics: dict) -> str:
        return f"{name[:10]:<10}" + "".join(f"{metrics[m]:>16.3f}" for m in METRICS)


def build_report(
    ours: Sequence[PerTriggerResult],
    baseline: Sequence[PerTriggerResult] | None = None,
    system: str = "ours",
    baseline_name: str = "baseline",
    resamples: int = 1000,
    seed: int = 0,
    min_triggers: int = 3,
    gap_threshold: float = 0.25,
) -> EvalReport:
    vec = _metric_vectors(ours)
    report = EvalReport(
        system=system,
        n_triggers=len(ours),
        excluded_triggers=[r.trigger_id for r in ours if r.n_relevant == 0],
        metrics={m: float(v.mean()) if v.size else 0.0 for m, v in vec.items()},
        per_trigger=list(ours),
    )
    if baseline is None:
        return report
    pairs = _pair(ours, baseline)
    base_sorted = [b for _, b in pairs]
    bvec = _metric_vectors(base_sorted)
    report.baseline = baseline_name
    report.baseline_metrics = {m: float(v.mean()) if v.size else 0.0 for m, v in bvec.items()}
    report.deltas = {m: report.metrics[m] - report.baseline_metrics[m] for m in METRICS}
    report.confidence_intervals = {
        m: bootstrap_ci(vec[m], bvec[m], resamples=resamples, seed=seed) for m in METRICS
    }
    ours_hits = [o.hit for o, _ in pairs]
    base_hits = [b.hit for _, b in pairs]
    report.mcnemar = mcnemar(ours_hits, base_hits)
    report.win_tie_loss = win_tie_loss(ours_hits, base_hits)
    report.conversations = per_conversation_analysis(ours, baseline, min_triggers, gap_threshold)
    base_recall = report.baseline_metrics["recall@10"]
    report.retention = report.metrics["recall@10"] / base_recall if base_recall > 0 else float("nan")
    return report
