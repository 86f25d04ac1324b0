"""Generate -> detect -> instruct -> edit loop for text-to-image hallucination repair."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Optional

from itmeval.clients import DetectorClient, EditorClient, PromptGenClient, T2IClient
from itmeval.errors import ClientError
from itmeval.types import TripletSet

DEFAULT_MAX_ITERS = 5


class Termination(str, enum.Enum):
    ALIGNED = "aligned"
    BUDGET_EXHAUSTED = "budget_exhausted"
    CLIENT_ERROR = "client_error"


EXIT_CODES = {Termination.ALIGNED: 0, Termination.CLIENT_ERROR: 3, Termination.BUDGET_EXHAUSTED: 4}


@dataclass
class LoopClients:
    t2i: T2IClient
    detector: DetectorClient
    prompt_gen: PromptGenClient
    editor: EditorClient

    def versions(self) -> dict:
        return {name: getattr(self, name).version for name in ("t2i", "detector", "prompt_gen", "editor")}


@dataclass
class Iteration:
    image: str
    detected: Optional[TripletSet] = None
    instruction: Optional[str] = None
    edited_image: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "image": self.image,
            "detected": None if self.detected is None else self.detected.to_list(),
            "instruction": self.instruction,
            "edited_image": self.edited_image,
        }

    @classmethod
    def from_dict(cls, d: dict, task: str = "mdc") -> "Iteration":
        det = d.get("detected")
        return cls(
            d["image"],
            None if det is None else TripletSet.from_list(det, task),
            d.get("instruction"),
            d.get("edited_image"),
        )


@dataclass
class LoopTrace:
    prompt: str
    iterations: list[Iteration] = field(default_factory=list)
    termination: Optional[Termination] = None
    error: Optional[dict] = None
    clients: dict = field(default_factory=dict)

    @property
    def iteration_count(self) -> int:
        return len(self.iterations)

    @property
    def final_image(self) -> Optional[str]:
        if not self.iterations:
            return None
        last = self.iterations[-1]
        return last.edited_image or last.image

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.termination]

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "iterations": [it.to_dict() for it in self.iterations],
            "termination": self.termination.value if self.termination else None,
            "iteration_count": self.iteration_count,
            "final_image": self.final_image,
            "error": self.error,
            "clients": self.clients,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> "LoopTrace":
        return cls(
            d["prompt"],
            [Iteration.from_dict(it) for it in d["iterations"]],
            Termination(d["termination"]) if d.get("termination") else None,
            d.get("error"),
            d.get("clients", {}),
        )


def run_loop(prompt: str, clients: LoopClients, max_iters: int = DEFAULT_MAX_ITERS) -> LoopTrace:
    """Iterate until the detector reports no mismatch or ``max_iters`` detections.

    Each non-empty detection is followed by an edit instruction and an edit.
    A client failure stops the loop; the trace keeps everything recorded so far.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    trace = LoopTrace(prompt, clients=clients.versions())
    stage = "t2i"
    try:
        image = clients.t2i.generate(prompt)
        for _ in range(max_iters):
            it = Iteration(image)
            trace.iterations.append(it)
            stage = "detector"
            it.detected = clients.detector.detect(image, prompt)
            if not it.detected:
                trace.termination = Termination.ALIGNED
                return trace
            stage = "prompt_gen"
            it.instruction = clients.prompt_gen.instruction(prompt, it.detected)
            stage = "editor"
            it.edited_image = clients.editor.edit(image, it.instruction)
            image = it.edited_image
        trace.termination = Termination.BUDGET_EXHAUSTED
    except ClientError as exc:
        trace.termination = Termination.CLIENT_ERROR
        trace.error = {"client": exc.client or stage, "message": exc.message}
    finally:
        trace.clients = clients.versions()
    return trace


def replay_transport(trace: LoopTrace):
    """A scripted transport that answers exactly as recorded in ``trace``."""
    from itmeval.clients import ScriptedTransport

    entries = []
    its = trace.iterations
    if its:
        entries.append({"client": "t2i", "response": {"image": its[0].image}})
    for it in its:
        if it.detected is not None:
            entries.append({"client": "detector", "response": {"triplets": it.detected.to_list()}})
        if it.instruction is not None:
            entries.append({"client": "prompt_gen", "response": {"text": it.instruction}})
        if it.edited_image is not None:
            entries.append({"client": "editor", "response": {"image": it.edited_image}})
    if trace.error is not None:
        entries.append({"client": trace.error["client"], "error": trace.error["message"]})
    return ScriptedTransport(entries, name="replay")
