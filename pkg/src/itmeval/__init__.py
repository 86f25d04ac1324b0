"""Aspect-level image/caption mismatch evaluation (ITM-IoU) and data tooling."""
from itmeval.kernels import BACKEND
from itmeval.metric import (
    Correlation,
    CorpusReport,
    EvalConfig,
    ItmIou,
    MetricWeights,
    correlate_with_human,
    evaluate_corpus,
)
from itmeval.parsing import ParseResult, parse_prediction_text, serialize_triplet_set, validate_record
from itmeval.text import NormalizationPolicy, chrf, normalize
from itmeval.types import AspectClass, AspectTriplet, ExampleRecord, PredictionRecord, TripletSet

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "AspectClass",
    "AspectTriplet",
    "Correlation",
    "CorpusReport",
    "EvalConfig",
    "ExampleRecord",
    "ItmIou",
    "MetricWeights",
    "NormalizationPolicy",
    "ParseResult",
    "PredictionRecord",
    "TripletSet",
    "chrf",
    "correlate_with_human",
    "evaluate_corpus",
    "normalize",
    "parse_prediction_text",
    "serialize_triplet_set",
    "validate_record",
]
