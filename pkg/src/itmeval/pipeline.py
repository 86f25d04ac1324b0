"""Synthetic mismatch generation and filtering.

Stages:

* caption -> aspect graph (LLM), random POS-preserving node replacement
  (LLM), graph -> new caption (LLM);
* score-gap debiasing of (original, mutated) caption pairs with plausibility,
  grammar and image-text scorers;
* query selection by constituency tree depth;
* re-ranking of retrieved image candidates.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import random
import re
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Sequence

from itmeval.clients import LLMClient, ScorerClient
from itmeval.errors import ClientError
from itmeval.text import normalize
from itmeval.types import AspectClass, AspectTriplet, TripletSet

logger = logging.getLogger(__name__)

MAX_REPLACEMENTS = 3

POS_TO_ASPECT = {
    "NOUN": AspectClass.ENTITY,
    "PROPN": AspectClass.ENTITY,
    "PRON": AspectClass.ENTITY,
    "ADJ": AspectClass.ATTRIBUTE,
    "ADV": AspectClass.ATTRIBUTE,
    "NUM": AspectClass.NUMBER,
    "VERB": AspectClass.RELATION,
    "ADP": AspectClass.RELATION,
    "AUX": AspectClass.RELATION,
}


class GraphError(ValueError):
    """An aspect graph (or an LLM reply meant to be one) is invalid."""


class PipelineError(RuntimeError):
    """A stage gave up after exhausting its retries."""


# ---------------------------------------------------------------------------
# aspect graphs


@dataclass(frozen=True)
class AspectNode:
    id: str
    phrase: str
    pos: str
    replaced_from: Optional[str] = None
    aspect: Optional[AspectClass] = None

    @property
    def aspect_class(self) -> AspectClass:
        if self.aspect is not None:
            return self.aspect
        return POS_TO_ASPECT.get(self.pos.upper(), AspectClass.ENTITY)

    def to_dict(self) -> dict:
        d = {"id": self.id, "phrase": self.phrase, "pos": self.pos}
        if self.aspect is not None:
            d["aspect"] = self.aspect.value
        if self.replaced_from is not None:
            d["replaced_from"] = self.replaced_from
        return d


@dataclass(frozen=True)
class AspectEdge:
    source: str
    target: str
    label: str


def _token_boundary_in(needle: str, haystack: str) -> bool:
    if not needle:
        return False
    return re.search(r"(?<!\w)" + re.escape(needle) + r"(?!\w)", haystack) is not None


@dataclass(frozen=True)
class AspectGraph:
    nodes: tuple[AspectNode, ...]
    edges: tuple[AspectEdge, ...] = ()

    def node(self, node_id: str) -> AspectNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def problems(self) -> list[str]:
        out = []
        ids = [n.id for n in self.nodes]
        if not ids:
            out.append("graph has no nodes")
        if len(set(ids)) != len(ids):
            out.append("duplicate node ids")
        known = set(ids)
        for e in self.edges:
            if e.source not in known or e.target not in known:
                out.append(f"edge {e.source}->{e.target} references a missing node")
        phrases = [(n.id, normalize(n.phrase)) for n in self.nodes]
        for nid, p in phrases:
            if not p:
                out.append(f"node {nid} has an empty phrase")
        for a_id, a in phrases:
            for b_id, b in phrases:
                if a_id != b_id and b and len(b) < len(a) and _token_boundary_in(b, a):
                    out.append(f"node {a_id} ({a!r}) is not atomic: contains node {b_id} ({b!r})")
        return out

    def validate(self) -> "AspectGraph":
        problems = self.problems()
        if problems:
            raise GraphError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return {
            "nodes": [n.to_dict() for n in self.nodes],
            "edges": [asdict(e) for e in self.edges],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "AspectGraph":
        try:
            nodes = tuple(
                AspectNode(
                    id=str(n["id"]),
                    phrase=str(n["phrase"]).strip(),
                    pos=str(n["pos"]).strip().upper(),
                    replaced_from=n.get("replaced_from"),
                    aspect=AspectClass.parse(n["aspect"]) if n.get("aspect") else None,
                )
                for n in data["nodes"]
            )
            edges = tuple(
                AspectEdge(str(e["source"]), str(e["target"]), str(e.get("label", "")))
                for e in data.get("edges", [])
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise GraphError(f"malformed graph: {exc}") from None
        return cls(nodes, edges)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)


@dataclass(frozen=True)
class Replacement:
    node_id: str
    original_phrase: str
    original_pos: str
    new_phrase: str
    new_pos: str


# ---------------------------------------------------------------------------
# prompt templates


class Templates:
    """Prompt templates with ``{name}`` placeholders, loaded from text files.

    Only known placeholders are substituted, so JSON braces in few-shot
    examples pass through untouched.
    """

    NAMES = ("parse_graph", "parse_graph_examples", "replace_node", "replace_examples", "graph_to_caption")

    def __init__(self, texts: Mapping[str, str]):
        missing = set(self.NAMES) - set(texts)
        if missing:
            raise ValueError(f"missing templates: {sorted(missing)}")
        self.texts = dict(texts)

    @classmethod
    def load(cls, directory: Optional[str | Path] = None) -> "Templates":
        texts = {}
        for name in cls.NAMES:
            if directory is not None and (Path(directory) / f"{name}.txt").exists():
                texts[name] = (Path(directory) / f"{name}.txt").read_text(encoding="utf-8")
            else:
                texts[name] = resources.files("itmeval").joinpath(f"templates/{name}.txt").read_text(encoding="utf-8")
        return cls(texts)

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        for name in self.NAMES:
            h.update(name.encode())
            h.update(b"\0")
            h.update(self.texts[name].encode())
        return h.hexdigest()[:16]

    def render(self, name: str, **values: str) -> str:
        def sub(m):
            key = m.group(1)
            return str(values[key]) if key in values else m.group(0)

        return re.sub(r"\{(\w+)\}", sub, self.texts[name])


_DEFAULT_TEMPLATES: Optional[Templates] = None


def default_templates() -> Templates:
    global _DEFAULT_TEMPLATES
    if _DEFAULT_TEMPLATES is None:
        _DEFAULT_TEMPLATES = Templates.load()
    return _DEFAULT_TEMPLATES


def extract_json(text: str) -> dict:
    """Pull the first JSON object out of an LLM reply (fences and prose tolerated)."""
    text = text.strip()
    fenced = re.search(r"```(?:json)?\s*(.*?)```", text, re.S)
    if fenced:
        text = fenced.group(1).strip()
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        start = text.find("{")
        end = text.rfind("}")
        if start < 0 or end <= start:
            raise ValueError("no JSON object in reply") from None
        value = json.loads(text[start : end + 1])
    if not isinstance(value, dict):
        raise ValueError("reply JSON is not an object")
    return value


# ---------------------------------------------------------------------------
# generation


def parse_caption_to_graph(
    caption: str,
    llm: LLMClient,
    templates: Optional[Templates] = None,
    max_retries: int = 2,
) -> AspectGraph:
    if not caption or not caption.strip():
        raise ValueError("empty caption")
    templates = templates or default_templates()
    prompt = templates.render(
        "parse_graph", caption=caption.strip(), examples=templates.texts["parse_graph_examples"].strip()
    )
    last = ""
    for attempt in range(max_retries + 1):
        reply = llm.complete(prompt)
        try:
            return AspectGraph.from_dict(extract_json(reply)).validate()
        except (ValueError, GraphError) as exc:
            last = str(exc)
            logger.info("graph reply rejected (attempt %d): %s", attempt + 1, exc)
    raise GraphError(f"no valid aspect graph after {max_retries + 1} attempts: {last}")


def replace_nodes(
    graph: AspectGraph,
    k: int,
    llm: LLMClient,
    seed: int | str,
    caption: str = "",
    templates: Optional[Templates] = None,
    max_retries: int = 3,
) -> tuple[AspectGraph, list[Replacement]]:
    """Swap ``k`` randomly chosen nodes for counterfactual phrases of equal POS.

    Node ids, node count and edges are left unchanged.
    """
    if not 1 <= k <= min(MAX_REPLACEMENTS, len(graph.nodes)):
        raise ValueError(f"k must be in [1, {min(MAX_REPLACEMENTS, len(graph.nodes))}], got {k}")
    templates = templates or default_templates()
    rng = random.Random(seed)
    chosen = sorted(rng.sample(range(len(graph.nodes)), k))
    nodes = list(graph.nodes)
    log: list[Replacement] = []
    for idx in chosen:
        node = nodes[idx]
        taken = [n.phrase for n in nodes if n.id != node.id]
        prompt = templates.render(
            "replace_node",
            caption=caption or " ".join(n.phrase for n in graph.nodes),
            node=node.phrase,
            pos=node.pos,
            references=", ".join(f'"{p}"' for p in taken) or "(none)",
            examples=templates.texts["replace_examples"].strip(),
        )
        for attempt in range(max_retries + 1):
            reply = llm.complete(prompt)
            try:
                data = extract_json(reply)
                phrase = str(data["phrase"]).strip()
                pos = str(data.get("pos", "")).strip().upper()
            except (ValueError, KeyError) as exc:
                logger.info("replacement reply unusable (attempt %d): %s", attempt + 1, exc)
                continue
            if pos != node.pos.upper():
                logger.info("replacement POS %s != %s (attempt %d)", pos, node.pos, attempt + 1)
                continue
            if not phrase or normalize(phrase) == normalize(node.phrase):
                continue
            nodes[idx] = replace(node, phrase=phrase, replaced_from=node.phrase)
            log.append(Replacement(node.id, node.phrase, node.pos, phrase, pos))
            break
        else:
            raise PipelineError(
                f"node {node.id} ({node.phrase!r}): no same-POS replacement after {max_retries + 1} attempts"
            )
    return AspectGraph(tuple(nodes), graph.edges), log


def graph_to_caption(
    graph: AspectGraph,
    llm: LLMClient,
    caption: str = "",
    templates: Optional[Templates] = None,
    max_retries: int = 2,
) -> str:
    """Linearize a graph; every node phrase must appear in the result."""
    graph.validate()
    templates = templates or default_templates()
    prompt = templates.render("graph_to_caption", graph=graph.dumps(), caption=caption)
    missing: list[str] = []
    for attempt in range(max_retries + 1):
        reply = llm.complete(prompt).strip()
        if reply.startswith("{"):
            try:
                reply = str(extract_json(reply).get("caption", "")).strip()
            except ValueError:
                pass
        text = normalize(reply)
        missing = [n.phrase for n in graph.nodes if not _token_boundary_in(normalize(n.phrase), text)]
        if reply and not missing:
            return reply
        logger.info("caption misses node phrases %s (attempt %d)", missing, attempt + 1)
    raise PipelineError(f"caption does not cover node phrases {missing} after {max_retries + 1} attempts")


def mismatches_from_log(log: Sequence[Replacement], graph: AspectGraph) -> TripletSet:
    """Gold triplets for a mutated caption: new phrase, corrected back to the original."""
    return TripletSet(
        AspectTriplet(graph.node(r.node_id).aspect_class, r.new_phrase, r.original_phrase) for r in log
    )


def generate_record(
    record: Mapping,
    llm: LLMClient,
    k: int,
    seed: int,
    templates: Optional[Templates] = None,
) -> dict:
    """Run graph parsing, node replacement and re-captioning for one input line."""
    templates = templates or default_templates()
    caption = record["caption"]
    graph = parse_caption_to_graph(caption, llm, templates)
    k_eff = min(k, len(graph.nodes), MAX_REPLACEMENTS)
    new_graph, log = replace_nodes(graph, k_eff, llm, f"{seed}:{record['id']}", caption, templates)
    new_caption = graph_to_caption(new_graph, llm, caption, templates)
    return {
        "id": record["id"],
        "image": record.get("image", ""),
        "caption": new_caption,
        "original_caption": caption,
        "source": "gpt_synth",
        "domain": record.get("domain", ""),
        "mismatches": mismatches_from_log(log, new_graph).to_list(),
        "graph": graph.to_dict(),
        "mutated_graph": new_graph.to_dict(),
        "replacements": [asdict(r) for r in log],
        "provenance": {"seed": seed, "llm_version": llm.version, "prompt_template_hash": templates.digest},
    }


# ---------------------------------------------------------------------------
# debiasing


@dataclass(frozen=True)
class GapScores:
    """Per-scorer (S^P, S^N, gap) with gap = S^P - S^N."""

    components: Mapping[str, tuple[float, float]]

    def gap(self, kind: str) -> Optional[float]:
        if kind not in self.components:
            return None
        sp, sn = self.components[kind]
        return sp - sn

    @property
    def vera_gap(self) -> Optional[float]:
        return self.gap("vera")

    @property
    def grammar_gap(self) -> Optional[float]:
        return self.gap("grammar")

    @property
    def clip_gap(self) -> Optional[float]:
        return self.gap("clip")

    def to_dict(self) -> dict:
        return {k: {"s_p": sp, "s_n": sn, "gap": sp - sn} for k, (sp, sn) in sorted(self.components.items())}


def score_gap(
    original: str,
    mutated: str,
    image: Optional[str],
    scorers: Mapping[str, ScorerClient],
) -> GapScores:
    comps = {}
    for kind, scorer in sorted(scorers.items()):
        img = image if kind in ("clip", "aesthetic") else None
        sp = scorer.score(original, img)
        sn = sp if mutated == original else scorer.score(mutated, img)
        comps[kind] = (sp, sn)
    return GapScores(comps)


@dataclass(frozen=True)
class FilterConfig:
    """Keep/reject rules. ``None`` disables a rule; disabled scorers are never called."""

    use_vera: bool = True
    use_grammar: bool = True
    use_clip: bool = True
    min_vera: Optional[float] = None
    min_grammar: Optional[float] = None
    clip_min: Optional[float] = None
    clip_max: Optional[float] = None
    max_vera_gap: Optional[float] = None
    max_grammar_gap: Optional[float] = None
    max_clip_gap: Optional[float] = None

    def __post_init__(self):
        for name, value in asdict(self).items():
            if isinstance(value, float) and not math.isfinite(value):
                raise ValueError(f"{name} must be finite")

    def enabled(self) -> list[str]:
        return [k for k, on in (("vera", self.use_vera), ("grammar", self.use_grammar), ("clip", self.use_clip)) if on]

    @classmethod
    def from_dict(cls, data: Mapping) -> "FilterConfig":
        return cls(**data)


@dataclass(frozen=True)
class Candidate:
    id: str
    original: str
    mutated: str
    image: Optional[str] = None


@dataclass(frozen=True)
class Rejection:
    candidate: Candidate
    scorer: str
    rule: str
    value: float
    limit: float
    gaps: GapScores


def _first_failure(cfg: FilterConfig, gaps: GapScores) -> Optional[tuple[str, str, float, float]]:
    rules = {
        "vera": [("min", cfg.min_vera), ("max_gap", cfg.max_vera_gap)],
        "grammar": [("min", cfg.min_grammar), ("max_gap", cfg.max_grammar_gap)],
        "clip": [("min", cfg.clip_min), ("max", cfg.clip_max), ("max_gap", cfg.max_clip_gap)],
    }
    for kind in cfg.enabled():
        sp, sn = gaps.components[kind]
        for rule, limit in rules[kind]:
            if limit is None:
                continue
            if rule == "min" and sn < limit:
                return kind, rule, sn, limit
            if rule == "max" and sn > limit:
                return kind, rule, sn, limit
            if rule == "max_gap" and sp - sn > limit:
                return kind, rule, sp - sn, limit
    return None


def debias_filter(
    candidates: Sequence[Candidate],
    cfg: FilterConfig,
    scorers: Mapping[str, ScorerClient],
) -> tuple[list[tuple[Candidate, GapScores]], list[Rejection]]:
    """Partition candidates into kept and rejected (with the first failing rule).

    Scorer failures propagate; there is no partial result.
    """
    missing = [k for k in cfg.enabled() if k not in scorers]
    if missing:
        raise ValueError(f"no scorer client for enabled kinds {missing}")
    active = {k: scorers[k] for k in cfg.enabled()}
    kept: list[tuple[Candidate, GapScores]] = []
    rejected: list[Rejection] = []
    for cand in candidates:
        gaps = score_gap(cand.original, cand.mutated, cand.image, active)
        fail = _first_failure(cfg, gaps)
        if fail is None:
            kept.append((cand, gaps))
        else:
            rejected.append(Rejection(cand, *fail, gaps))
    return kept, rejected


# ---------------------------------------------------------------------------
# query selection


def tree_depth(tree: str) -> int:
    """Depth of a bracketed constituency tree, counting nodes (leaves included).

    >>> tree_depth("(S (NP a) (VP b))")
    3
    """
    tokens = re.findall(r"\(|\)|[^\s()]+", tree)
    if not tokens:
        raise ValueError("empty tree")
    pos = 0

    def node() -> int:
        nonlocal pos
        tok = tokens[pos]
        if tok == ")":
            raise ValueError(f"unexpected ')' at token {pos}")
        if tok != "(":
            pos += 1
            return 1
        pos += 1
        if pos >= len(tokens) or tokens[pos] in "()":
            raise ValueError("constituent without a label")
        pos += 1  # label
        deepest = 0
        while True:
            if pos >= len(tokens):
                raise ValueError("unbalanced brackets: missing ')'")
            if tokens[pos] == ")":
                pos += 1
                return 1 + deepest
            deepest = max(deepest, node())

    depth = node()
    if pos != len(tokens):
        raise ValueError("trailing tokens after tree (unbalanced brackets?)")
    return depth


def select_queries(
    parsed: Sequence[tuple[str, str]], min_depth: int
) -> tuple[list[str], list[tuple[str, str]]]:
    """Keep queries whose tree depth is at least ``min_depth``.

    Returns (kept queries, [(query, reason)] for rejected ones).
    """
    kept, rejected = [], []
    for query, tree in parsed:
        try:
            depth = tree_depth(tree)
        except ValueError as exc:
            rejected.append((query, f"malformed tree: {exc}"))
            continue
        if depth >= min_depth:
            kept.append(query)
        else:
            rejected.append((query, f"depth {depth} < {min_depth}"))
    return kept, rejected


# ---------------------------------------------------------------------------
# retrieval candidates


@dataclass(frozen=True)
class ImageCandidate:
    image: str
    clip: float
    aesthetic: float
    width: int
    height: int


@dataclass(frozen=True)
class RankWeights:
    clip: float = 0.7
    aesthetic: float = 0.3


@dataclass(frozen=True)
class SizeConstraints:
    min_width: int = 0
    min_height: int = 0
    top_k: Optional[int] = None


def _minmax(values: Sequence[float]) -> list[float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        return [0.0] * len(values)
    return [(v - lo) / (hi - lo) for v in values]


def rank_candidates(
    candidates: Sequence[ImageCandidate],
    weights: RankWeights = RankWeights(),
    constraints: SizeConstraints = SizeConstraints(),
) -> list[tuple[ImageCandidate, float]]:
    """Drop undersized images, then order by weighted min-max-normalized scores."""
    pool = [c for c in candidates if c.width >= constraints.min_width and c.height >= constraints.min_height]
    if not pool:
        return []
    clip = _minmax([c.clip for c in pool])
    aes = _minmax([c.aesthetic for c in pool])
    scored = [(c, weights.clip * cn + weights.aesthetic * an) for c, cn, an in zip(pool, clip, aes)]
    scored.sort(key=lambda item: (-item[1], item[0].image))
    if constraints.top_k is not None:
        scored = scored[: constraints.top_k]
    return scored
