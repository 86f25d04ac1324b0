"""One test per acceptance criterion; each records a PASS/FAIL line."""
import json
import math
import random
import time

from itmeval import cli
from itmeval.autoalign import LoopClients, run_loop
from itmeval.clients import DetectorClient, EditorClient, PromptGenClient, ScorerClient, ScriptedTransport, T2IClient
from itmeval.io import load_dataset, load_predictions
from itmeval.metric import EvalConfig, ItmIou, correlate_with_human, evaluate_corpus
from itmeval.parsing import parse_prediction_text
from itmeval.pipeline import AspectEdge, AspectGraph, AspectNode, replace_nodes, score_gap
from itmeval.text import chrf
from itmeval.types import AspectClass, AspectTriplet, TripletSet

import oracles
from conftest import FIXTURES
from test_pipeline import FakeLLM

CLASSES = list(AspectClass)
VOCAB = ["red car", "red cart", "blue bus", "two dogs", "three dogs", "dog", "golden flower", "blond hair",
         "a cat", "on the table", "holding", "riding", "big", "small"]


def rand_triplet(rng):
    return AspectTriplet(rng.choice(CLASSES), rng.choice(VOCAB), rng.choice(VOCAB))


def rand_set(rng, lo=0, hi=3):
    return TripletSet(rand_triplet(rng) for _ in range(rng.randint(lo, hi)))


def as_tuples(ts):
    return [(t.aspect.value, t.phrase, t.correction) for t in ts]


# 1 -------------------------------------------------------------------------------------


def test_chrf_oracle_equivalence(criterion):
    rng = random.Random(2024)
    alphabet = "abcdefg hij,é"
    pairs = [
        ("".join(rng.choice(alphabet) for _ in range(rng.randrange(25))),
         "".join(rng.choice(alphabet) for _ in range(rng.randrange(25))))
        for _ in range(1000)
    ]
    start = time.perf_counter()
    worst = max(abs(chrf(a, b) - oracles.chrf_bruteforce(a, b)) for a, b in pairs)
    elapsed = time.perf_counter() - start
    criterion("chrF oracle equivalence", worst <= 1e-9 and elapsed < 5.0,
              f"1000 pairs, max |diff| = {worst:.2e}, {elapsed:.2f}s")


# 2 -------------------------------------------------------------------------------------


def test_metric_constants(criterion):
    d = EvalConfig().to_dict()
    snapshot = {"w_ca": d["weights"]["w_ca"], "w_de": d["weights"]["w_de"], "w_co": d["weights"]["w_co"],
                "T": d["threshold"], "n": d["chrf"]["order"]}
    want = {"w_ca": 0.2, "w_de": 0.4, "w_co": 0.4, "T": 0.55, "n": 6}
    criterion("metric constants", snapshot == want, json.dumps(snapshot, sort_keys=True))


# 3 -------------------------------------------------------------------------------------


def test_itm_iou_analytic(criterion):
    gold = AspectTriplet(AspectClass.ATTRIBUTE, "golden flower", "blond hair")
    garbage = AspectTriplet(AspectClass.NUMBER, "xyz", "qqq")
    m = ItmIou()
    md = ItmIou(EvalConfig(task="md"))
    cases = {
        "empty/empty": (m.example(TripletSet(), TripletSet()).itm_iou, 1.0),
        "perfect": (m.example(TripletSet([gold]), TripletSet([gold])).itm_iou, 1.0),
        "perfect+garbage": (m.example(TripletSet([gold, garbage]), TripletSet([gold])).itm_iou, 0.25),
        "md perfect": (md.example(TripletSet([AspectTriplet(AspectClass.NUMBER, "two dogs")]),
                                  TripletSet([AspectTriplet(AspectClass.NUMBER, "two dogs")])).itm_iou, 1.0),
    }
    bad = {k: v for k, (v, want) in cases.items() if abs(v - want) > 1e-12}
    criterion("ITM-IoU analytic suite", not bad, f"{len(cases) - len(bad)}/{len(cases)} exact" + (f", off: {bad}" if bad else ""))


# 4 -------------------------------------------------------------------------------------


def test_reference_script_equivalence(criterion):
    dataset = load_dataset(FIXTURES / "mini_dataset.jsonl")
    preds = load_predictions(FIXTURES / "mini_predictions.jsonl")
    start = time.perf_counter()
    report = evaluate_corpus(dataset, preds)
    elapsed = time.perf_counter() - start
    ref = {r.id: oracles.itm_iou_ref(as_tuples(preds[r.id].triplets), as_tuples(r.gold)) for r in dataset}
    ref_overall = math.fsum(ref.values()) / len(ref)
    frozen = json.loads((FIXTURES / "mini_expected.json").read_text())["overall"]
    worst = max(abs(e.itm_iou - ref[e.id]) for e in report.examples)
    ok = worst <= 1e-9 and abs(report.overall - ref_overall) <= 1e-9 and abs(report.overall - frozen) <= 1e-9
    criterion("reference-script equivalence", ok and elapsed < 1.0,
              f"overall {report.overall:.10f} vs {ref_overall:.10f}, max |diff| {worst:.1e}, {elapsed:.3f}s")


# 5 -------------------------------------------------------------------------------------


def test_metric_properties(criterion):
    rng = random.Random(11)
    m = ItmIou()
    n = 600
    failures = {"range": 0, "permutation": 0, "monotone": 0, "matched_cap": 0, "threshold": 0}
    monotone_checked = boundary_checked = 0
    for i in range(n):
        P, G = rand_set(rng), rand_set(rng)
        r = m.example(P, G)
        if not 0.0 <= r.itm_iou <= 1.0:
            failures["range"] += 1
        if r.matched > min(len(P), len(G)):
            failures["matched_cap"] += 1
        shuffled_p, shuffled_g = list(P), list(G)
        rng.shuffle(shuffled_p)
        rng.shuffle(shuffled_g)
        if m.example(TripletSet(shuffled_p), TripletSet(shuffled_g)) != r:
            failures["permutation"] += 1
        # positive-valued case: P shares at least one triplet with G
        G2 = rand_set(rng, 1, 3)
        P2 = TripletSet([rng.choice(list(G2))] + list(rand_set(rng, 0, 2)))
        base = m.example(P2, G2).itm_iou
        # a prediction sharing no characters with the vocabulary cannot reach T
        spurious = AspectTriplet(rng.choice(CLASSES), f"zzq{i}", "vvwx")
        if base > 0:
            monotone_checked += 1
            if not m.example(TripletSet(list(P2) + [spurious]), G2).itm_iou < base:
                failures["monotone"] += 1
        p, g = rand_triplet(rng), rand_triplet(rng)
        s = m.aspect_score(p, g)
        eps = 1e-9
        if s > eps:
            boundary_checked += 1
            one_p, one_g = TripletSet([p]), TripletSet([g])
            at = ItmIou(EvalConfig(threshold=s)).match_and_score(one_p, one_g).matched
            below = ItmIou(EvalConfig(threshold=s - eps)).match_and_score(one_p, one_g).matched
            above = 0 if s + eps > 1 else ItmIou(EvalConfig(threshold=s + eps)).match_and_score(one_p, one_g).matched
            if (at, below, above) != (1, 1, 0):
                failures["threshold"] += 1
    ok = not any(failures.values()) and min(monotone_checked, boundary_checked) >= 500
    criterion("metric property suite", ok,
              f"{n} random cases; monotone checked on {monotone_checked}, boundary on {boundary_checked}; "
              f"failures {failures}")


# 6 -------------------------------------------------------------------------------------


def test_parser_robustness(criterion):
    corpus = json.loads((FIXTURES / "parser_corpus.json").read_text())
    mismatches = 0
    for case in corpus:
        r = parse_prediction_text(case["raw"], case["task"])
        got = [[t.aspect.value, t.phrase] + ([t.correction] if t.correction is not None else []) for t in r.triplets]
        if (got, len(r.warnings), r.asserted_none, r.unparseable) != (
            case["triplets"], case["warnings"], case["asserted_none"], case["unparseable"]
        ):
            mismatches += 1
    rng = random.Random(5150)
    crashes = 0
    for i in range(10_000):
        raw = bytes(rng.randrange(256) for _ in range(rng.randrange(80))).decode("utf-8", "replace")
        try:
            parse_prediction_text(raw, "mdc" if i % 2 else "md")
        except Exception:  # noqa: BLE001
            crashes += 1
    criterion("parser robustness", mismatches == 0 and crashes == 0,
              f"{len(corpus)} corpus strings, {mismatches} mismatches; 10000 fuzz cases, {crashes} crashes")


# 7 -------------------------------------------------------------------------------------


def test_correlation_sanity(criterion):
    rng = random.Random(8)
    bad = 0
    for _ in range(200):
        ids = [f"e{i}" for i in range(rng.randint(3, 30))]
        scores = {k: rng.random() for k in ids}
        if len(set(scores.values())) < len(ids):
            continue
        a, b = rng.uniform(0.1, 4), rng.uniform(1, 1.5)
        affine = correlate_with_human(scores, {k: b + a * v for k, v in scores.items()})
        order = sorted(ids, key=scores.get)
        reversed_ranks = correlate_with_human(scores, {k: 5 - 4 * order.index(k) / (len(ids) - 1) for k in ids})
        if affine.pearson != 1.0 or affine.spearman != 1.0 or reversed_ranks.spearman != -1.0:
            bad += 1
    criterion("correlation sanity", bad == 0, f"200 random tables, {bad} inexact")


# 8 -------------------------------------------------------------------------------------


def _random_graph(rng):
    n = rng.randint(1, 8)
    pos = ["NOUN", "ADJ", "NUM", "VERB", "ADP"]
    nodes = tuple(AspectNode(f"n{i}", f"tok{i}x{rng.randrange(99)}", rng.choice(pos)) for i in range(n))
    edges = tuple(AspectEdge(f"n{rng.randrange(n)}", f"n{rng.randrange(n)}", "rel") for _ in range(rng.randrange(2 * n)))
    return AspectGraph(nodes, edges)


def test_pipeline_determinism(criterion, tmp_path):
    blobs = set()
    for i in range(3):
        out = tmp_path / f"gen{i}.jsonl"
        code = cli.main(["pipeline", "generate", "--input", str(FIXTURES / "pipeline" / "captions.jsonl"),
                         "--out", str(out), "--seed", "7", "--mock", str(FIXTURES / "pipeline" / "mock_generate.jsonl")])
        assert code == 0
        blobs.add(out.read_bytes())

    rng = random.Random(42)
    broken = 0
    for trial in range(200):
        g = _random_graph(rng)
        k = rng.randint(1, min(3, len(g.nodes)))
        new, log = replace_nodes(g, k, FakeLLM(), seed=trial)
        if (new.edges != g.edges or [n.id for n in new.nodes] != [n.id for n in g.nodes]
                or any(e.new_pos != e.original_pos for e in log)):
            broken += 1

    entries = [{"client": kind, "match": f"cap{i}", "response": {"score": rng.random()}, "repeat": True}
               for kind in ("vera", "grammar", "clip") for i in range(20)]
    t = ScriptedTransport(entries)
    scorers = {kind: ScorerClient(kind, t) for kind in ("vera", "grammar", "clip")}
    nonzero = sum(
        any(v != 0.0 for v in (g.vera_gap, g.grammar_gap, g.clip_gap))
        for g in (score_gap(f"cap{i}", f"cap{i}", "img", scorers) for i in range(20))
    )
    ok = len(blobs) == 1 and broken == 0 and nonzero == 0
    criterion("pipeline determinism", ok,
              f"{len(blobs)} distinct output(s) over 3 runs; {broken}/200 graphs altered; {nonzero}/20 non-zero self-gaps")


# 9 -------------------------------------------------------------------------------------


def _loop_script(k=None, fail_at=None, budget=5):
    """Script where detection k (1-based) is the first empty one; or editor fails at iteration fail_at."""
    entries = [{"client": "t2i", "response": {"image": "img/0.png"}}]
    for i in range(1, budget + 1):
        if k == i:
            entries.append({"client": "detector", "response": {"triplets": []}})
            break
        entries.append({"client": "detector", "response": {"triplets": [
            {"class": "Entity", "phrase": f"pear {i}", "correction": "apple"}]}})
        entries.append({"client": "prompt_gen", "response": {"text": f"turn pear {i} into an apple"}})
        if fail_at == i:
            entries.append({"client": "editor", "error": "editor offline"})
            break
        entries.append({"client": "editor", "response": {"image": f"img/{i}.png"}})
    return ScriptedTransport(entries)


def _expected(k=None, fail_at=None, budget=5):
    """Hand-written trace shape for the scenarios above."""
    its = []
    stop = k if k is not None else (fail_at if fail_at is not None else budget)
    for i in range(1, stop + 1):
        if i == k:
            its.append({"image": f"img/{i - 1}.png", "detected": [], "instruction": None, "edited_image": None})
        else:
            its.append({
                "image": f"img/{i - 1}.png",
                "detected": [{"class": "Entity", "phrase": f"pear {i}", "correction": "apple"}],
                "instruction": f"turn pear {i} into an apple",
                "edited_image": None if i == fail_at else f"img/{i}.png",
            })
    if k is not None:
        term, code, err = "aligned", 0, None
    elif fail_at is not None:
        term, code, err = "client_error", 3, {"client": "editor", "message": "editor offline"}
    else:
        term, code, err = "budget_exhausted", 4, None
    final = its[-1]["edited_image"] or its[-1]["image"]
    return {"prompt": "apples", "iterations": its, "termination": term, "iteration_count": len(its),
            "final_image": final, "error": err}, code


def test_autoalign_scenarios(criterion):
    scenarios = [dict(k=k) for k in range(1, 6)] + [dict()] + [dict(fail_at=2)]
    wrong = []
    for sc in scenarios:
        t = _loop_script(**sc)
        clients = LoopClients(T2IClient(t), DetectorClient(t), PromptGenClient(t), EditorClient(t))
        trace = run_loop("apples", clients, max_iters=5)
        got = trace.to_dict()
        got.pop("clients")
        want, code = _expected(**sc)
        if got != want or trace.exit_code != code:
            wrong.append(sc)
    criterion("AutoAlign loop scenarios", not wrong,
              f"{len(scenarios) - len(wrong)}/{len(scenarios)} traces and exit codes exact")


# 10 ------------------------------------------------------------------------------------


def test_end_to_end_cli(criterion, tmp_path):
    start = time.perf_counter()
    reports, codes = [], []
    for i in range(2):
        out = tmp_path / f"report{i}.json"
        codes.append(cli.main(["evaluate", "--dataset", str(FIXTURES / "mini_dataset.jsonl"),
                               "--pred", str(FIXTURES / "mini_predictions_raw.jsonl"), "--task", "mdc",
                               "--out", str(out), "--per-example"]))
        reports.append(json.loads(out.read_text()))
        codes.append(cli.main(["correlate", "--scores", str(out), "--human", str(FIXTURES / "human_scores.jsonl"),
                               "--out", str(tmp_path / f"corr{i}.json")]))
    elapsed = time.perf_counter() - start
    for r in reports:
        r.pop("generated_at")
    same = reports[0] == reports[1]
    corr_same = (tmp_path / "corr0.json").read_text() == (tmp_path / "corr1.json").read_text()
    ok = codes == [0, 0, 0, 0] and same and corr_same and elapsed < 10.0
    criterion("end-to-end CLI", ok, f"exit codes {codes}, reports identical={same}, {elapsed:.2f}s")
