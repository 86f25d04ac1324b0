"""ITM-IoU: weighted per-triplet scores, thresholded one-to-one matching and
set-level intersection over union.

For a prediction set P and gold set G::

    detection  = (semantic(p, p') + chrF(p, p')) / 2
    correction = semantic(o, o')
    aspect     = w_ca * EM(c, c') + w_de * detection + w_co * correction
    itm_iou    = mean_j(score_j) * matched / (|P| + |G| - matched)

where ``score_j`` is the aspect score of prediction j's accepted pair, or 0
when it was not matched at threshold T.
"""
from __future__ import annotations

import math
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence

from itmeval.errors import SchemaError
from itmeval.parsing import parse_prediction_text
from itmeval.similarity import EmbeddingProvider, SimilarityConfig, SimilarityScorer
from itmeval.text import DEFAULT_POLICY, NormalizationPolicy, chrf, exact_match
from itmeval.types import (
    MAX_GOLD_MISMATCHES,
    AspectTriplet,
    ExampleRecord,
    PredictionRecord,
    Task,
    TripletSet,
)

MATCHING_MODES = ("one_to_one", "unbounded")


@dataclass(frozen=True)
class MetricWeights:
    w_ca: float = 0.2
    w_de: float = 0.4
    w_co: float = 0.4

    def __post_init__(self):
        if min(self.w_ca, self.w_de, self.w_co) < 0:
            raise ValueError("metric weights must be non-negative")
        if abs(math.fsum((self.w_ca, self.w_de, self.w_co)) - 1.0) > 1e-9:
            raise ValueError("metric weights must sum to 1")


@dataclass(frozen=True)
class EvalConfig:
    task: str = "mdc"
    weights: MetricWeights = field(default_factory=MetricWeights)
    threshold: float = 0.55
    chrf_order: int = 6
    chrf_beta: float = 1.0
    normalization: NormalizationPolicy = DEFAULT_POLICY
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    matching: str = "one_to_one"

    def __post_init__(self):
        if self.task not in ("md", "mdc"):
            raise ValueError(f"task must be 'md' or 'mdc', got {self.task!r}")
        if not 0 < self.threshold <= 1:
            raise ValueError("threshold must lie in (0, 1]")
        if self.chrf_order < 1 or self.chrf_beta <= 0:
            raise ValueError("chrF order must be >= 1 and beta > 0")
        if self.matching not in MATCHING_MODES:
            raise ValueError(f"matching must be one of {MATCHING_MODES}")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "weights": {"w_ca": self.weights.w_ca, "w_de": self.weights.w_de, "w_co": self.weights.w_co},
            "threshold": self.threshold,
            "chrf": {"order": self.chrf_order, "beta": self.chrf_beta},
            "normalization": self.normalization.to_dict(),
            "similarity": self.similarity.to_dict(),
            "matching": self.matching,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "EvalConfig":
        """Build from a (possibly partial) dict; missing keys keep their defaults."""
        known = {"task", "weights", "threshold", "chrf", "normalization", "similarity", "matching"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        kw: dict = {}
        if "task" in data:
            kw["task"] = data["task"]
        if "weights" in data:
            kw["weights"] = MetricWeights(**{**base.to_dict()["weights"], **data["weights"]})
        if "threshold" in data:
            kw["threshold"] = float(data["threshold"])
        if "chrf" in data:
            extra = set(data["chrf"]) - {"order", "beta"}
            if extra:
                raise ValueError(f"unknown chrf keys: {sorted(extra)}")
            kw["chrf_order"] = int(data["chrf"].get("order", base.chrf_order))
            kw["chrf_beta"] = float(data["chrf"].get("beta", base.chrf_beta))
        if "normalization" in data:
            kw["normalization"] = NormalizationPolicy(**{**base.normalization.to_dict(), **data["normalization"]})
        if "similarity" in data:
            kw["similarity"] = SimilarityConfig(**{**base.similarity.to_dict(), **data["similarity"]})
        if "matching" in data:
            kw["matching"] = data["matching"]
        return replace(base, **kw)


@dataclass(frozen=True)
class MatchResult:
    scores: tuple[float, ...]
    matched: int
    pairs: tuple[tuple[int, int, float], ...]


@dataclass(frozen=True)
class ExampleResult:
    id: str
    scores: tuple[float, ...]
    matched: int
    union: int
    itm_iou: float
    pred_count: int
    gold_count: int
    pairs: tuple[tuple[int, int, float], ...] = ()
    asserted_none: bool = False
    unparseable: bool = False
    missing: bool = False
    source: str = ""
    gold_classes: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "itm_iou": self.itm_iou,
            "scores": list(self.scores),
            "matched": self.matched,
            "union": self.union,
            "pred_count": self.pred_count,
            "gold_count": self.gold_count,
            "pairs": [list(p) for p in self.pairs],
            "flags": {
                "asserted_none": self.asserted_none,
                "unparseable": self.unparseable,
                "missing": self.missing,
            },
        }


class ItmIou:
    """Metric evaluator bound to one config and one similarity scorer."""

    def __init__(
        self,
        cfg: EvalConfig = EvalConfig(),
        provider: Optional[EmbeddingProvider] = None,
        scorer: Optional[SimilarityScorer] = None,
    ):
        self.cfg = cfg
        self.scorer = scorer or SimilarityScorer(cfg.similarity, provider, cfg.normalization)

    # -- per pair -----------------------------------------------------------

    def detection_score(self, p: str, p_gold: str) -> float:
        ch = chrf(p, p_gold, self.cfg.chrf_order, self.cfg.chrf_beta, self.cfg.normalization)
        return (self.scorer.score(p, p_gold) + ch) / 2

    def correction_score(self, o: Optional[str], o_gold: Optional[str]) -> float:
        if o is None or o_gold is None:
            return 0.0
        return self.scorer.score(o, o_gold)

    def aspect_score(self, pred: AspectTriplet, gold: AspectTriplet) -> float:
        w = self.cfg.weights
        em = exact_match(pred.aspect.value, gold.aspect.value, self.cfg.normalization)
        det = self.detection_score(pred.phrase, gold.phrase)
        if self.cfg.task == "mdc":
            terms = (w.w_ca * em, w.w_de * det, w.w_co * self.correction_score(pred.correction, gold.correction))
        else:
            # detection-only: correction weight folds into detection
            terms = (w.w_ca * em, (w.w_de + w.w_co) * det)
        return min(1.0, math.fsum(terms))

    # -- per example --------------------------------------------------------

    def score_matrix(self, preds: TripletSet, golds: TripletSet) -> list[list[float]]:
        return [[self.aspect_score(p, g) for g in golds] for p in preds]

    def match_and_score(self, preds: TripletSet, golds: TripletSet) -> MatchResult:
        table = self.score_matrix(preds, golds)
        t = self.cfg.threshold
        scores = [0.0] * len(preds)
        if self.cfg.matching == "unbounded":
            pairs = []
            for i, row in enumerate(table):
                if row:
                    j = max(range(len(row)), key=lambda k: (row[k], -k))
                    if row[j] >= t:
                        scores[i] = row[j]
                        pairs.append((i, j, row[j]))
            return MatchResult(tuple(scores), len(pairs), tuple(pairs))

        candidates = sorted(
            ((-s, i, j) for i, row in enumerate(table) for j, s in enumerate(row) if s >= t)
        )
        used_p: set[int] = set()
        used_g: set[int] = set()
        pairs = []
        for neg, i, j in candidates:
            if i in used_p or j in used_g:
                continue
            used_p.add(i)
            used_g.add(j)
            scores[i] = -neg
            pairs.append((i, j, -neg))
        pairs.sort()
        return MatchResult(tuple(scores), len(pairs), tuple(pairs))

    def example(self, preds: TripletSet, golds: TripletSet, example_id: str = "", **flags) -> ExampleResult:
        if not preds and not golds:
            return ExampleResult(example_id, (), 0, 0, 1.0, 0, 0, **flags)
        if not preds or not golds:
            return ExampleResult(example_id, (0.0,) * len(preds), 0, len(preds) + len(golds), 0.0,
                                 len(preds), len(golds), **flags)
        m = self.match_and_score(preds, golds)
        union = len(preds) + len(golds) - m.matched
        iou = min(1.0, m.matched / union)
        value = math.fsum(m.scores) / len(preds) * iou
        return ExampleResult(example_id, m.scores, m.matched, union, min(1.0, value),
                             len(preds), len(golds), m.pairs, **flags)


# ---------------------------------------------------------------------------
# functional wrappers


def detection_score(p: str, p_gold: str, cfg: EvalConfig = EvalConfig(), scorer=None) -> float:
    return ItmIou(cfg, scorer=scorer).detection_score(p, p_gold)


def correction_score(o: str, o_gold: str, cfg: EvalConfig = EvalConfig(), scorer=None) -> float:
    return ItmIou(cfg, scorer=scorer).correction_score(o, o_gold)


def aspect_score(pred: AspectTriplet, gold: AspectTriplet, cfg: EvalConfig = EvalConfig(), scorer=None) -> float:
    return ItmIou(cfg, scorer=scorer).aspect_score(pred, gold)


def match_and_score(preds: TripletSet, golds: TripletSet, cfg: EvalConfig = EvalConfig(), scorer=None) -> MatchResult:
    return ItmIou(cfg, scorer=scorer).match_and_score(preds, golds)


def itm_iou_example(preds: TripletSet, golds: TripletSet, cfg: EvalConfig = EvalConfig(), scorer=None) -> ExampleResult:
    return ItmIou(cfg, scorer=scorer).example(preds, golds)


# ---------------------------------------------------------------------------
# corpus level


@dataclass
class CorpusReport:
    overall: Optional[float]
    n_examples: int
    breakdowns: dict
    warnings: dict
    config: dict
    provider: dict
    examples: list[ExampleResult]

    def to_dict(self, per_example: bool = False) -> dict:
        out = {
            "overall": self.overall,
            "n_examples": self.n_examples,
            "matching": self.config.get("matching"),
            "config": self.config,
            "provider": self.provider,
            "breakdowns": self.breakdowns,
            "warnings": self.warnings,
        }
        if per_example:
            out["examples"] = [r.to_dict() for r in self.examples]
        return out


def _mean(values: Sequence[float]) -> Optional[float]:
    return math.fsum(values) / len(values) if values else None


def _breakdowns(results: Sequence[ExampleResult]) -> dict:
    by_class: dict[str, list[float]] = defaultdict(list)
    by_source: dict[str, list[float]] = defaultdict(list)
    by_count: dict[str, list[float]] = {str(k): [] for k in range(MAX_GOLD_MISMATCHES + 1)}
    for r in results:
        for c in r.gold_classes or ("None",):
            by_class[c].append(r.itm_iou)
        by_source[r.source].append(r.itm_iou)
        by_count.setdefault(str(r.gold_count), []).append(r.itm_iou)

    def table(groups):
        return {k: {"mean": _mean(v), "n": len(v)} for k, v in sorted(groups.items())}

    return {"aspect_class": table(by_class), "source": table(by_source), "gold_count": table(by_count)}


def evaluate_corpus(
    dataset: Sequence[ExampleRecord],
    predictions: Mapping[str, PredictionRecord] | Iterable[PredictionRecord],
    cfg: EvalConfig = EvalConfig(),
    provider: Optional[EmbeddingProvider] = None,
    workers: int = 1,
    scorer: Optional[SimilarityScorer] = None,
) -> CorpusReport:
    """Score every dataset example; missing predictions count as empty."""
    if not isinstance(predictions, Mapping):
        predictions = {p.id: p for p in predictions}
    known = {ex.id for ex in dataset}
    stray = sorted(set(predictions) - known)
    if stray:
        raise SchemaError([(0, f"prediction id {i!r} not in dataset") for i in stray])

    warnings: Counter = Counter()
    prepared = []
    for ex in dataset:
        pred = predictions.get(ex.id)
        flags = {"source": ex.source, "gold_classes": tuple(sorted(c.value for c in ex.gold.classes()))}
        if pred is None:
            warnings["missing_prediction"] += 1
            prepared.append((ex, TripletSet(), {**flags, "missing": True}))
        elif pred.triplets is not None:
            prepared.append((ex, pred.triplets, flags))
        else:
            parsed = parse_prediction_text(pred.raw_text, cfg.task)
            for w in parsed.warnings:
                warnings[f"parse_{w.kind}"] += 1
            prepared.append(
                (ex, parsed.triplets,
                 {**flags, "asserted_none": parsed.asserted_none, "unparseable": parsed.unparseable})
            )

    metric = ItmIou(cfg, provider=provider, scorer=scorer)
    if cfg.similarity.backend == "remote":
        texts = set()
        for ex, preds, _ in prepared:
            for t in list(preds) + list(ex.gold):
                texts.add(t.phrase)
                if t.correction is not None and cfg.task == "mdc":
                    texts.add(t.correction)
        metric.scorer.prefetch(sorted(texts))

    def run(item):
        ex, preds, flags = item
        return metric.example(preds, ex.gold, ex.id, **flags)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, prepared))
    else:
        results = [run(item) for item in prepared]

    return CorpusReport(
        overall=_mean([r.itm_iou for r in results]),
        n_examples=len(results),
        breakdowns=_breakdowns(results),
        warnings=dict(sorted(warnings.items())),
        config=cfg.to_dict(),
        provider=metric.scorer.identity(),
        examples=results,
    )


# ---------------------------------------------------------------------------
# agreement with human ratings


@dataclass(frozen=True)
class Correlation:
    pearson: Optional[float]
    spearman: Optional[float]
    n: int


def _average_ranks(values: Sequence[float]) -> list[Fraction]:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks: list[Fraction] = [Fraction(0)] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = Fraction(i + j + 2, 2)
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def _pearson_exact(xs: Sequence[Fraction], ys: Sequence[Fraction]) -> Optional[float]:
    # rational sums keep perfectly correlated inputs at exactly +/-1
    n = len(xs)
    mx = sum(xs, Fraction(0)) / n
    my = sum(ys, Fraction(0)) / n
    sxy = sum(((x - mx) * (y - my) for x, y in zip(xs, ys)), Fraction(0))
    sxx = sum(((x - mx) ** 2 for x in xs), Fraction(0))
    syy = sum(((y - my) ** 2 for y in ys), Fraction(0))
    if sxx == 0 or syy == 0:
        return None
    r2 = sxy * sxy / (sxx * syy)
    r = math.sqrt(float(r2))
    return max(-1.0, min(1.0, math.copysign(r, sxy)))


def correlate_with_human(example_scores: Mapping[str, float], human_scores: Mapping[str, float]) -> Correlation:
    ids = sorted(set(example_scores) & set(human_scores))
    if len(ids) < 3:
        raise ValueError(f"need at least 3 overlapping ids, got {len(ids)}")
    x = [float(example_scores[i]) for i in ids]
    y = [float(human_scores[i]) for i in ids]
    pearson = _pearson_exact([Fraction(v) for v in x], [Fraction(v) for v in y])
    spearman = _pearson_exact(_average_ranks(x), _average_ranks(y))
    return Correlation(pearson, spearman, len(ids))
