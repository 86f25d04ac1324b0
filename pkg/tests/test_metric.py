import json
import math

import pytest

from itmeval.errors import SchemaError
from itmeval.io import load_dataset, load_predictions
from itmeval.metric import (
    EvalConfig,
    ItmIou,
    MetricWeights,
    aspect_score,
    correction_score,
    correlate_with_human,
    detection_score,
    evaluate_corpus,
    itm_iou_example,
    match_and_score,
)
from itmeval.types import AspectClass, AspectTriplet, PredictionRecord, TripletSet

import oracles
from conftest import FIXTURES

EXPECTED = json.loads((FIXTURES / "mini_expected.json").read_text())
# scipy.stats on the 10-row human table, frozen
PEARSON_FIXTURE = 0.875737026031681
SPEARMAN_FIXTURE = 0.8896297447829338
# oracles.aspect_score_ref for the pair in test_threshold_boundary
BOUNDARY_SCORE = 0.5482745939995715


def T(cls, phrase, corr=None):
    return AspectTriplet(AspectClass.parse(cls), phrase, corr)


def S(*ts):
    return TripletSet(ts)


GOLD = T("Attribute", "golden flower", "blond hair")
GARBAGE = T("Number", "xyz", "qqq")


# -- configuration -------------------------------------------------------------


def test_default_config_snapshot():
    d = EvalConfig().to_dict()
    assert d["weights"] == {"w_ca": 0.2, "w_de": 0.4, "w_co": 0.4}
    assert d["threshold"] == 0.55
    assert d["chrf"] == {"order": 6, "beta": 1.0}
    assert d["matching"] == "one_to_one"
    assert EvalConfig.from_dict(d) == EvalConfig()


def test_config_rejects_unknown_keys_and_bad_weights():
    with pytest.raises(ValueError):
        EvalConfig.from_dict({"thresh": 0.5})
    with pytest.raises(ValueError):
        MetricWeights(0.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        EvalConfig(threshold=0.0)


def test_partial_config_keeps_defaults():
    cfg = EvalConfig.from_dict({"threshold": 0.6, "weights": {"w_ca": 0.4, "w_de": 0.3, "w_co": 0.3}})
    assert cfg.threshold == 0.6 and cfg.chrf_order == 6 and cfg.weights.w_ca == 0.4


# -- per pair ---------------------------------------------------------------------


def test_detection_score_composes_components():
    assert detection_score("red car", "red car") == 1.0
    assert detection_score("abc", "xyz") == 0.0
    want = (0.7970238095238097 + 0.8333333333333334) / 2
    assert detection_score("a blue bus", "a blue bug") == pytest.approx(want, abs=1e-12)


def test_correction_score():
    assert correction_score("blond hair", "blond hair") == 1.0
    assert correction_score("abc", "xyz") == 0.0
    assert correction_score("three dogs", "two dogs") == pytest.approx(0.3380617018914066, abs=1e-12)


def test_aspect_score_cases():
    assert aspect_score(GOLD, GOLD) == 1.0
    wrong_class = T("Entity", "golden flower", "blond hair")
    assert aspect_score(wrong_class, GOLD) == pytest.approx(0.8, abs=1e-12)
    md = EvalConfig(task="md")
    assert aspect_score(T("Attribute", "golden flower"), T("Attribute", "golden flower"), md) == 1.0


# -- matching ---------------------------------------------------------------------


def test_threshold_boundary():
    pred, gold = T("Entity", "red cart", "bus"), T("Entity", "red car", "car")
    s = aspect_score(pred, gold)
    assert s == pytest.approx(BOUNDARY_SCORE, abs=1e-12)
    assert s == pytest.approx(oracles.aspect_score_ref(("Entity", "red cart", "bus"), ("Entity", "red car", "car")))
    below = match_and_score(S(pred), S(gold))
    assert below.scores == (0.0,) and below.matched == 0
    at = match_and_score(S(pred), S(gold), EvalConfig(threshold=s))
    assert at.matched == 1 and at.scores == (s,)
    above = match_and_score(S(pred), S(gold), EvalConfig(threshold=s + 1e-9))
    assert above.matched == 0


def test_near_duplicate_predictions_match_once():
    preds = S(
        T("Attribute", "golden flower", "blond hair"),
        T("Attribute", "golden flowers", "blond hair"),
        T("Attribute", "a golden flower", "blond hair"),
    )
    res = itm_iou_example(preds, S(GOLD))
    assert res.matched == 1
    assert res.union == 3
    assert res.itm_iou == pytest.approx(oracles.itm_iou_ref(
        [(t.aspect.value, t.phrase, t.correction) for t in preds], [("Attribute", "golden flower", "blond hair")]
    ), abs=1e-12)


def test_unbounded_mode_matches_every_prediction_but_clips_iou():
    preds = S(GOLD, T("Attribute", "golden flowers", "blond hair"), T("Attribute", "a golden flower", "blond hair"))
    cfg = EvalConfig(matching="unbounded")
    res = itm_iou_example(preds, S(GOLD), cfg)
    assert res.matched == 3
    mean = sum(res.scores) / 3
    assert res.itm_iou == pytest.approx(mean, abs=1e-12)
    ref = oracles.itm_iou_ref(
        [(t.aspect.value, t.phrase, t.correction) for t in preds],
        [("Attribute", "golden flower", "blond hair")],
        one_to_one=False,
    )
    assert res.itm_iou == pytest.approx(ref, abs=1e-12)


def test_tie_break_prefers_lower_indices():
    a = T("Entity", "car", "bus")
    res = match_and_score(S(a), S(a, T("Entity", "car", "bus stop")))
    assert res.pairs[0][:2] == (0, 0)


# -- per example ------------------------------------------------------------------


def test_analytic_examples():
    assert itm_iou_example(S(), S()).itm_iou == 1.0
    assert itm_iou_example(S(GOLD), S(GOLD)).itm_iou == 1.0
    assert itm_iou_example(S(GOLD), S()).itm_iou == 0.0
    assert itm_iou_example(S(), S(GOLD)).itm_iou == 0.0
    r = itm_iou_example(S(GOLD, GARBAGE), S(GOLD))
    assert r.itm_iou == pytest.approx(0.25, abs=1e-12)
    assert r.matched == 1 and r.union == 2
    md = EvalConfig(task="md")
    g = T("Number", "two dogs")
    assert itm_iou_example(S(g), S(g), md).itm_iou == 1.0


def test_example_result_invariants():
    r = ItmIou().example(S(GOLD, GARBAGE), S(GOLD, T("Entity", "garden", "kitchen")), "x")
    assert r.matched <= min(r.pred_count, r.gold_count)
    assert r.union == r.pred_count + r.gold_count - r.matched
    assert 0.0 <= r.itm_iou <= 1.0
    assert r.to_dict()["id"] == "x"


# -- corpus -----------------------------------------------------------------------


@pytest.fixture
def mini():
    return load_dataset(FIXTURES / "mini_dataset.jsonl")


@pytest.mark.parametrize("pred_file", ["mini_predictions.jsonl", "mini_predictions_raw.jsonl"])
def test_mini_corpus_matches_reference(mini, pred_file):
    preds = load_predictions(FIXTURES / pred_file)
    rep = evaluate_corpus(mini, preds)
    assert rep.overall == pytest.approx(EXPECTED["overall"], abs=1e-9)
    for ex in rep.examples:
        assert ex.itm_iou == pytest.approx(EXPECTED["per_example"][ex.id], abs=1e-9)
    assert rep.overall == pytest.approx(math.fsum(e.itm_iou for e in rep.examples) / len(rep.examples), abs=1e-15)


def test_parallel_workers_give_identical_report(mini):
    preds = load_predictions(FIXTURES / "mini_predictions_raw.jsonl")
    one = evaluate_corpus(mini, preds).to_dict(per_example=True)
    four = evaluate_corpus(mini, preds, workers=4).to_dict(per_example=True)
    assert one == four


def test_missing_predictions_score_empty_with_warning(mini):
    preds = load_predictions(FIXTURES / "mini_predictions.jsonl")
    del preds["ex01"], preds["ex03"]
    rep = evaluate_corpus(mini, preds)
    assert rep.warnings["missing_prediction"] == 2
    by_id = {e.id: e for e in rep.examples}
    assert by_id["ex01"].itm_iou == 0.0  # non-empty gold
    assert by_id["ex03"].itm_iou == 1.0  # empty gold: empty prediction agrees
    assert by_id["ex01"].missing


def test_stray_prediction_id_is_schema_error(mini):
    preds = load_predictions(FIXTURES / "mini_predictions.jsonl")
    preds["zzz"] = PredictionRecord("zzz", triplets=TripletSet())
    with pytest.raises(SchemaError):
        evaluate_corpus(mini, preds)


def test_perfect_and_empty_corpora(mini):
    perfect = {r.id: PredictionRecord(r.id, triplets=r.gold) for r in mini}
    assert evaluate_corpus(mini, perfect).overall == 1.0
    nonempty = [r for r in mini if r.gold]
    empty = {r.id: PredictionRecord(r.id, triplets=TripletSet()) for r in nonempty}
    assert evaluate_corpus(nonempty, empty).overall == 0.0


def test_breakdowns(mini):
    rep = evaluate_corpus(mini, load_predictions(FIXTURES / "mini_predictions.jsonl"))
    b = rep.breakdowns
    assert set(b) == {"aspect_class", "source", "gold_count"}
    assert set(b["gold_count"]) == {"0", "1", "2", "3"}
    assert sum(cell["n"] for cell in b["source"].values()) == 10
    assert sum(cell["n"] for cell in b["gold_count"].values()) == 10
    none_ids = [r.id for r in mini if not r.gold]
    assert b["aspect_class"]["None"]["n"] == len(none_ids)


def test_report_echoes_config_and_provider(mini):
    rep = evaluate_corpus(mini, load_predictions(FIXTURES / "mini_predictions.jsonl"))
    d = rep.to_dict()
    assert d["config"] == EvalConfig().to_dict()
    assert d["provider"]["name"] == "fallback-char-trigram"
    assert "examples" not in d
    assert len(rep.to_dict(per_example=True)["examples"]) == 10


# -- correlation --------------------------------------------------------------------


def test_correlation_fixture():
    human = {}
    for line in (FIXTURES / "human_scores.jsonl").read_text().splitlines():
        row = json.loads(line)
        human[row["id"]] = row["score"]
    c = correlate_with_human(EXPECTED["per_example"], human)
    assert c.n == 10
    assert c.pearson == pytest.approx(PEARSON_FIXTURE, abs=1e-12)
    assert c.spearman == pytest.approx(SPEARMAN_FIXTURE, abs=1e-12)


def test_correlation_edge_cases():
    scores = {"a": 0.1, "b": 0.5, "c": 0.9, "d": 0.3}
    affine = {k: 1 + 4 * v for k, v in scores.items()}
    c = correlate_with_human(scores, affine)
    assert c.pearson == 1.0 and c.spearman == 1.0
    rev = {k: 6 - (1 + 4 * v) for k, v in scores.items()}
    assert correlate_with_human(scores, rev).spearman == -1.0
    flat = correlate_with_human(scores, {k: 3.0 for k in scores})
    assert flat.pearson is None and flat.spearman is None
    with pytest.raises(ValueError):
        correlate_with_human(scores, {"a": 1.0, "b": 2.0, "x": 3.0})


def test_spearman_averages_ties():
    scipy_stats = pytest.importorskip("scipy.stats")
    xs = [0.1, 0.1, 0.4, 0.4, 0.4, 0.9]
    ys = [1, 2, 2, 3, 5, 4]
    c = correlate_with_human({str(i): x for i, x in enumerate(xs)}, {str(i): y for i, y in enumerate(ys)})
    assert c.spearman == pytest.approx(scipy_stats.spearmanr(xs, ys)[0], abs=1e-12)
    assert c.pearson == pytest.approx(scipy_stats.pearsonr(xs, ys)[0], abs=1e-12)
