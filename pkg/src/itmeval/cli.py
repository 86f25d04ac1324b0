"""Command-line entry point.

Exit codes: 0 success, 1 internal error, 2 usage/schema/validation error,
3 external service failure, 4 loop budget exhausted.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

from itmeval import autoalign, io, pipeline
from itmeval.clients import (
    SCORER_KINDS,
    DetectorClient,
    EditorClient,
    HttpTransport,
    LLMClient,
    PromptGenClient,
    ScorerClient,
    ScriptedTransport,
    T2IClient,
)
from itmeval.errors import ClientError, SchemaError
from itmeval.metric import EvalConfig, correlate_with_human, evaluate_corpus
from itmeval.similarity import ProviderError, RemoteEmbeddingProvider

logger = logging.getLogger("itmeval")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_SERVICE, EXIT_BUDGET = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


def _parser(prog: str, **kw) -> argparse.ArgumentParser:
    return argparse.ArgumentParser(prog=prog, allow_abbrev=False, **kw)


def build_parser() -> argparse.ArgumentParser:
    p = _parser("itmeval", description="Aspect-level image/caption mismatch evaluation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=argparse.ArgumentParser)

    ev = sub.add_parser("evaluate", allow_abbrev=False, help="score predictions with ITM-IoU")
    ev.add_argument("--dataset", required=True, help="dataset JSONL")
    ev.add_argument("--pred", required=True, help="prediction JSONL")
    ev.add_argument("--task", required=True, choices=["md", "mdc"])
    ev.add_argument("--config", help="JSON file with metric settings (defaults otherwise)")
    ev.add_argument("--backend", choices=["fallback", "remote"], help="similarity backend (overrides config)")
    ev.add_argument("--out", help="report JSON path")
    ev.add_argument("--csv", help="also write breakdown tables as CSV")
    ev.add_argument("--per-example", action="store_true", help="include per-example results in the report")
    ev.add_argument("--unbounded-matching", action="store_true",
                    help="match each prediction to its best gold independently (IoU clipped to 1)")
    ev.add_argument("--workers", type=int, default=1, help="parallel example workers")

    co = sub.add_parser("correlate", allow_abbrev=False, help="correlate ITM-IoU with human ratings")
    co.add_argument("--scores", required=True, help="report JSON written with --per-example")
    co.add_argument("--human", required=True, help='JSONL of {"id": str, "score": 1..5}')
    co.add_argument("--out", help="write the correlation summary as JSON")

    pl = sub.add_parser("pipeline", allow_abbrev=False, help="synthetic mismatch data stages")
    stages = pl.add_subparsers(dest="stage", required=True)

    def client_flags(sp, llm=False, scorers=False):
        sp.add_argument("--mock", help="scripted client replies (JSONL) for offline runs")
        if llm:
            sp.add_argument("--llm-endpoint", default=os.environ.get("LLM_ENDPOINT"),
                            help="LLM service URL (default $LLM_ENDPOINT)")
        if scorers:
            sp.add_argument("--scorer-endpoint", action="append", default=[], metavar="KIND=URL",
                            help=f"scorer service, KIND in {', '.join(SCORER_KINDS)}; repeatable")

    ge = stages.add_parser("generate", allow_abbrev=False, help="caption -> graph -> replaced nodes -> caption")
    ge.add_argument("--input", required=True, help='JSONL of {"id", "caption", "image", "domain"}')
    ge.add_argument("--out", required=True)
    ge.add_argument("--seed", type=int, default=0)
    ge.add_argument("--k", type=int, default=1, help="nodes to replace per caption (1-3)")
    ge.add_argument("--templates", help="directory overriding the bundled prompt templates")
    client_flags(ge, llm=True)

    fi = stages.add_parser("filter", allow_abbrev=False, help="score-gap debias filtering")
    fi.add_argument("--input", required=True, help='JSONL of {"id", "original_caption", "caption", "image"}')
    fi.add_argument("--out", required=True)
    fi.add_argument("--rejected", help="write rejected candidates with reasons")
    fi.add_argument("--config", help="filter thresholds JSON")
    fi.add_argument("--seed", type=int, default=0, help="recorded in provenance")
    client_flags(fi, scorers=True)

    sq = stages.add_parser("select-queries", allow_abbrev=False, help="keep queries with deep parse trees")
    sq.add_argument("--input", required=True, help='JSONL of {"query", "tree"}')
    sq.add_argument("--out", required=True)
    sq.add_argument("--min-depth", type=int, required=True)
    sq.add_argument("--rejected", help="write rejected queries with reasons")
    sq.add_argument("--seed", type=int, default=0, help="recorded in provenance")

    rk = stages.add_parser("rank", allow_abbrev=False, help="re-rank retrieved image candidates")
    rk.add_argument("--input", required=True, help='JSONL of {"id", "candidates": [...]}')
    rk.add_argument("--out", required=True)
    rk.add_argument("--w-clip", type=float, default=0.7)
    rk.add_argument("--w-aesthetic", type=float, default=0.3)
    rk.add_argument("--min-width", type=int, default=0)
    rk.add_argument("--min-height", type=int, default=0)
    rk.add_argument("--top-k", type=int)
    rk.add_argument("--seed", type=int, default=0, help="recorded in provenance")

    aa = sub.add_parser("autoalign", allow_abbrev=False, help="detect-and-edit loop for a T2I prompt")
    aa.add_argument("--prompt", required=True)
    aa.add_argument("--max-iters", type=int, default=autoalign.DEFAULT_MAX_ITERS)
    aa.add_argument("--task", choices=["md", "mdc"], default="mdc")
    aa.add_argument("--out", help="trace JSON path (stdout otherwise)")
    aa.add_argument("--mock", help="scripted client replies (JSONL)")
    for name in autoalign.LoopClients.__dataclass_fields__:
        aa.add_argument(f"--{name.replace('_', '-')}-endpoint", help=f"{name} service URL")
    return p


# ---------------------------------------------------------------------------
# commands


def _load_config(args) -> EvalConfig:
    data: dict = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    data["task"] = args.task
    if args.backend:
        data["similarity"] = {**data.get("similarity", {}), "backend": args.backend}
    if args.unbounded_matching:
        data["matching"] = "unbounded"
    try:
        return EvalConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    dataset = io.load_dataset(args.dataset, cfg.normalization)
    preds = io.load_predictions(args.pred, cfg.task)
    provider = None
    if cfg.similarity.backend == "remote":
        try:
            provider = RemoteEmbeddingProvider()
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    report = evaluate_corpus(dataset, preds, cfg, provider=provider, workers=args.workers)
    doc = report.to_dict(per_example=args.per_example)
    doc["generated_at"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
    doc["inputs"] = {"dataset": str(args.dataset), "predictions": str(args.pred)}
    if args.out:
        io.write_json(args.out, doc)
    if args.csv:
        io.write_atomic(args.csv, io.breakdowns_csv(report.breakdowns))
    n_warn = sum(report.warnings.values())
    overall = "nan" if report.overall is None else f"{report.overall:.4f}"
    print(f"ITM-IoU {overall} over {report.n_examples} examples ({n_warn} warnings)")
    return EXIT_OK


def cmd_correlate(args) -> int:
    try:
        report = json.loads(Path(args.scores).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read report {args.scores}: {exc}") from None
    if "examples" not in report:
        raise UsageError("report has no per-example results; rerun evaluate with --per-example")
    scores = {r["id"]: r["itm_iou"] for r in report["examples"]}
    human = io.load_human_scores(args.human)
    try:
        corr = correlate_with_human(scores, human)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    def fmt(v):
        return "undefined" if v is None else f"{v:.6f}"

    print(f"pearson {fmt(corr.pearson)} spearman {fmt(corr.spearman)} n {corr.n}")
    if args.out:
        io.write_json(args.out, {"pearson": corr.pearson, "spearman": corr.spearman, "n": corr.n})
    return EXIT_OK


def _transport(args, endpoints: dict[str, str], keys: Optional[dict] = None):
    if getattr(args, "mock", None):
        try:
            return ScriptedTransport.from_jsonl(args.mock)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot load mock script: {exc}") from None
    endpoints = {k: v for k, v in endpoints.items() if v}
    if not endpoints:
        raise UsageError("no client endpoints given (use endpoint flags or --mock)")
    return HttpTransport(endpoints, keys)


def _rows(path) -> list[tuple[int, dict]]:
    rows = []
    for n, row in io.iter_jsonl(path):
        if not isinstance(row, dict):
            raise SchemaError([(n, "line is not a JSON object")], str(path))
        rows.append((n, row))
    return rows


def _stamp(row: dict, stage: str, prov: dict, **extra) -> dict:
    """Copy ``row`` adding ``extra`` fields and this stage's provenance, keeping upstream entries."""
    return {**row, **extra, "provenance": {**row.get("provenance", {}), stage: prov}}


def _require(path, n, row, *keys):
    missing = [k for k in keys if k not in row]
    if missing:
        raise SchemaError([(n, f"missing fields: {', '.join(missing)}")], str(path))


def cmd_generate(args) -> int:
    transport = _transport(args, {"llm": args.llm_endpoint}, {"llm": os.environ.get("LLM_API_KEY", "")})
    llm = LLMClient(transport)
    templates = pipeline.Templates.load(args.templates) if args.templates else pipeline.default_templates()
    if not 1 <= args.k <= pipeline.MAX_REPLACEMENTS:
        raise UsageError("--k must be between 1 and 3")
    out = []
    for n, row in _rows(args.input):
        _require(args.input, n, row, "id", "caption")
        try:
            out.append(pipeline.generate_record(row, llm, args.k, args.seed, templates))
        except (pipeline.GraphError, pipeline.PipelineError, ValueError) as exc:
            raise SchemaError([(n, f"generation failed: {exc}")], str(args.input)) from None
    io.write_jsonl(args.out, out)
    print(f"generated {len(out)} records")
    return EXIT_OK


def cmd_filter(args) -> int:
    cfg = pipeline.FilterConfig()
    if args.config:
        try:
            cfg = pipeline.FilterConfig.from_dict(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
            raise UsageError(f"invalid filter config: {exc}") from None
    endpoints = {}
    for spec in args.scorer_endpoint:
        kind, _, url = spec.partition("=")
        if kind not in SCORER_KINDS or not url:
            raise UsageError(f"bad --scorer-endpoint {spec!r}")
        endpoints[kind] = url
    transport = _transport(args, endpoints) if cfg.enabled() else None
    scorers = {k: ScorerClient(k, transport) for k in cfg.enabled()}
    rows = _rows(args.input)
    cands = []
    for n, row in rows:
        _require(args.input, n, row, "id", "original_caption", "caption")
        cands.append(pipeline.Candidate(row["id"], row["original_caption"], row["caption"], row.get("image")))
    try:
        kept, rejected = pipeline.debias_filter(cands, cfg, scorers)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    by_id = {row["id"]: row for _, row in rows}
    prov = {"seed": args.seed, "scorers": {k: s.version for k, s in scorers.items()}, "config": asdict(cfg)}
    io.write_jsonl(args.out, [_stamp(by_id[c.id], "filter", prov, gaps=g.to_dict()) for c, g in kept])
    if args.rejected:
        io.write_jsonl(args.rejected, [
            _stamp(by_id[r.candidate.id], "filter", prov, gaps=r.gaps.to_dict(),
                   rejection={"scorer": r.scorer, "rule": r.rule, "value": r.value, "limit": r.limit})
            for r in rejected
        ])
    print(f"kept {len(kept)} of {len(cands)} candidates")
    return EXIT_OK


def cmd_select_queries(args) -> int:
    rows = _rows(args.input)
    for n, row in rows:
        _require(args.input, n, row, "query", "tree")
    kept, rejected = pipeline.select_queries([(r["query"], r["tree"]) for _, r in rows], args.min_depth)
    keep = set(kept)
    reasons = dict(rejected)
    prov = {"seed": args.seed, "min_depth": args.min_depth}
    out, rej = [], []
    for _, row in rows:
        if row["query"] in keep:
            out.append(_stamp(row, "select_queries", prov, depth=pipeline.tree_depth(row["tree"])))
        else:
            rej.append(_stamp(row, "select_queries", prov, reason=reasons[row["query"]]))
    io.write_jsonl(args.out, out)
    if args.rejected:
        io.write_jsonl(args.rejected, rej)
    print(f"kept {len(out)} of {len(rows)} queries")
    return EXIT_OK


def cmd_rank(args) -> int:
    weights = pipeline.RankWeights(args.w_clip, args.w_aesthetic)
    cons = pipeline.SizeConstraints(args.min_width, args.min_height, args.top_k)
    out = []
    for n, row in _rows(args.input):
        _require(args.input, n, row, "id", "candidates")
        try:
            cands = [pipeline.ImageCandidate(c["image"], float(c["clip"]), float(c["aesthetic"]),
                                             int(c["width"]), int(c["height"])) for c in row["candidates"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError([(n, f"bad candidate: {exc}")], str(args.input)) from None
        ranked = pipeline.rank_candidates(cands, weights, cons)
        prov = {"seed": args.seed, "weights": asdict(weights), "constraints": asdict(cons)}
        out.append(_stamp({"id": row["id"], "provenance": row.get("provenance", {})}, "rank", prov,
                          ranked=[{**asdict(c), "score": s} for c, s in ranked]))
    io.write_jsonl(args.out, out)
    print(f"ranked {len(out)} candidate lists")
    return EXIT_OK


def cmd_autoalign(args) -> int:
    if args.max_iters < 1:
        raise UsageError("--max-iters must be >= 1")
    names = list(autoalign.LoopClients.__dataclass_fields__)
    endpoints = {n: getattr(args, f"{n}_endpoint") for n in names}
    transport = _transport(args, endpoints)
    if not args.mock:
        missing = [n for n in names if not endpoints[n]]
        if missing:
            raise UsageError(f"missing endpoints for: {', '.join(missing)}")
    clients = autoalign.LoopClients(
        T2IClient(transport), DetectorClient(transport, args.task), PromptGenClient(transport), EditorClient(transport)
    )
    trace = autoalign.run_loop(args.prompt, clients, args.max_iters)
    text = trace.dumps() + "\n"
    if args.out:
        io.write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    print(f"{trace.termination.value} after {trace.iteration_count} iteration(s)", file=sys.stderr)
    return trace.exit_code


COMMANDS = {
    "evaluate": cmd_evaluate,
    "correlate": cmd_correlate,
    "autoalign": cmd_autoalign,
}
STAGES = {
    "generate": cmd_generate,
    "filter": cmd_filter,
    "select-queries": cmd_select_queries,
    "rank": cmd_rank,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = STAGES[args.stage] if args.command == "pipeline" else COMMANDS[args.command]
    try:
        return handler(args)
    except (SchemaError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ProviderError, ClientError) as exc:
        print(f"service error: {exc}", file=sys.stderr)
        return EXIT_SERVICE
    except Exception:  # noqa: BLE001
        logger.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
