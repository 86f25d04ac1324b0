"""Regenerate frozen fixture files from the independent oracles.

Run from the repository root:  python3 tests/fixtures/make_fixtures.py
"""
import json
import pathlib
import sys

HERE = pathlib.Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))
sys.path.insert(0, str(HERE))

import oracles  # noqa: E402
from parser_corpus_raw import CORPUS  # noqa: E402


def parser_corpus():
    rows = []
    for raw, task in CORPUS:
        out = oracles.grammar_oracle(raw, task)
        rows.append({"raw": raw, "task": task, **out})
    (HERE / "parser_corpus.json").write_text(
        json.dumps(rows, indent=1, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    return rows


def load_jsonl(path):
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def mini_corpus_value():
    gold = {r["id"]: r for r in load_jsonl(HERE / "mini_dataset.jsonl")}
    preds = {r["id"]: r for r in load_jsonl(HERE / "mini_predictions.jsonl")}
    per = {}
    for ex_id, rec in gold.items():
        g = [(m["class"], m["phrase"], m["correction"]) for m in rec["mismatches"]]
        p = [(t["class"], t["phrase"], t["correction"]) for t in preds[ex_id]["triplets"]]
        per[ex_id] = oracles.itm_iou_ref(p, g)
    overall = sum(per.values()) / len(per)
    return {"overall": overall, "per_example": per}


if __name__ == "__main__":
    rows = parser_corpus()
    print(f"parser corpus: {len(rows)} rows")
    if (HERE / "mini_dataset.jsonl").exists():
        vals = mini_corpus_value()
        (HERE / "mini_expected.json").write_text(json.dumps(vals, indent=1) + "\n")
        print("mini corpus overall", repr(vals["overall"]))
