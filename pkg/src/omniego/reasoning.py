"""Staged reasoning over the evidence.

A decomposed protocol runs perception -> dynamics -> verification, each stage
seeing the earlier stages' raw outputs verbatim under labeled headings. An
expert protocol makes one compact verification call. Every call is recorded
as a :class:`StageTranscript`.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from string import Template
from typing import Any, Callable, Sequence

from .backend import (
    Backend,
    BackendError,
    ChatRequest,
    GenerationParams,
    ImagePart,
    Part,
    RateLimited,
    TextPart,
    Transport,
    VisualBudget,
    apply_visual_budget,
    render_parts,
)
from .evidence import Evidence, format_timestamp, render_observation_rule
from .router import ReasoningProtocol
from .samples import OptionSet
from .stages import PRIOR_HEADINGS, PathKind, StageId, StageSpec

log = logging.getLogger(__name__)

ANSWER_INSTRUCTION = (
    "Choose the single best option. End your reply with exactly one line of the form\n"
    "FINAL ANSWER: <letter>\n"
    "where <letter> is one of A, B, C, D.\n"
)

_OBSERVING_STAGES = (StageId.PERCEPTION, StageId.EXPERT, StageId.DIRECT)


class StageFailure(RuntimeError):
    def __init__(self, stage_id: StageId, cause: BaseException, completed: Sequence["StageTranscript"] = ()):
        super().__init__(f"stage {stage_id.value} failed: {cause}")
        self.stage_id = stage_id
        self.cause = cause
        self.completed = list(completed)


class MissingPrior(ValueError):
    pass


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 2
    base_delay: float = 0.5
    max_delay: float = 8.0
    sleep: Callable[[float], None] = field(default=time.sleep, compare=False, repr=False)

    def delay(self, attempt: int, exc: BaseException) -> float:
        d = min(self.max_delay, self.base_delay * (2**attempt))
        if isinstance(exc, RateLimited) and exc.retry_after is not None:
            d = max(d, exc.retry_after)
        return d


@dataclass(frozen=True)
class StageTranscript:
    stage_id: StageId
    rendered_prompt: str
    raw_output: str
    backend_meta: dict[str, Any]
    prompt_digest: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "stage_id": self.stage_id.value,
            "prompt_digest": self.prompt_digest,
            "backend_meta": self.backend_meta,
            "rendered_prompt": self.rendered_prompt,
            "raw_output": self.raw_output,
        }


@dataclass(frozen=True)
class ReasoningTrace:
    path_taken: PathKind
    transcripts: tuple[StageTranscript, ...]

    @property
    def final(self) -> StageTranscript:
        return self.transcripts[-1]

    def to_dict(self) -> dict[str, Any]:
        return {"path_taken": self.path_taken.value, "transcripts": [t.to_dict() for t in self.transcripts]}


def _merge_text(parts: list[Part]) -> list[Part]:
    out: list[Part] = []
    for p in parts:
        if isinstance(p, TextPart) and out and isinstance(out[-1], TextPart):
            out[-1] = TextPart(out[-1].text + p.text)
        else:
            out.append(p)
    return out


def evidence_parts(evidence: Evidence, budget: VisualBudget = VisualBudget(), high_res: bool = False) -> list[Part]:
    """Message parts for the evidence: timestamp labels interleaved with images."""
    parts: list[Part] = []

    def image(tf) -> ImagePart:
        f = tf.frame
        if f.has_dims:
            w, h = apply_visual_budget(f.width, f.height, budget, high_res)
            return ImagePart(f.uri, w, h)
        return ImagePart(f.uri)

    if evidence.timestamped:
        parts.append(TextPart("EVIDENCE FRAMES (global time in seconds):\n"))
        multi = len(evidence.segments) > 1
        for k, seg in enumerate(evidence.segments, start=1):
            if multi:
                parts.append(TextPart(f"Segment {k} (global frame offset {seg.segment_offset}):\n"))
            for tf in seg.frames:
                parts.append(TextPart(f"{format_timestamp(tf.timestamp)}\n"))
                parts.append(image(tf))
    else:
        parts.append(TextPart("FRAMES:\n"))
        for tf in evidence.frames:
            parts.append(image(tf))
    parts.append(TextPart("\n"))
    return _merge_text(parts)


def evidence_block(evidence: Evidence, budget: VisualBudget = VisualBudget(), high_res: bool = False) -> str:
    return render_parts(evidence_parts(evidence, budget, high_res))


def render_options(options: OptionSet) -> str:
    return "".join(f"({o.label}) {o.text}\n" for o in options)


def render_context(protocol: ReasoningProtocol | None) -> str:
    if protocol is None or protocol.basis is None:
        return ""
    lines = [f"DOMAIN GRAMMAR ({protocol.basis.domain.value}): {protocol.basis.grammar}"]
    if protocol.operator is not None:
        lines.append(f"CAPABILITY: {protocol.capability.value.replace('_', ' ')}")
        lines.append(f"EVIDENCE BOUNDARY: {protocol.operator.evidence_boundary}")
        lines.append(f"VERIFICATION RULE: {protocol.operator.verification_rule}")
    return "\n".join(lines) + "\n\n"


def render_priors(spec: StageSpec, priors: Sequence[StageTranscript]) -> str:
    by_id = {t.stage_id: t for t in priors}
    chunks = []
    for sid in spec.include_priors:
        if sid not in by_id:
            raise MissingPrior(f"{spec.stage_id.value} needs the {sid.value} output")
        chunks.append(f"{PRIOR_HEADINGS[sid]}\n{by_id[sid].raw_output}\n\n")
    return "".join(chunks)


def build_request(
    model_id: str,
    evidence: Evidence,
    priors: Sequence[StageTranscript],
    spec: StageSpec,
    question: str,
    options: OptionSet,
    *,
    protocol: ReasoningProtocol | None = None,
    decision: str = ANSWER_INSTRUCTION,
    params: GenerationParams = GenerationParams(),
    budget: VisualBudget = VisualBudget(),
    high_res: bool = False,
) -> ChatRequest:
    observation = ""
    if evidence.observation_rule is not None and spec.stage_id in _OBSERVING_STAGES:
        observation = render_observation_rule(evidence.observation_rule) + "\n"
    body = Template(spec.instruction_template).substitute(
        observation=observation,
        context=render_context(protocol),
        priors=render_priors(spec, priors),
        question=question,
        options=render_options(options),
        decision=decision,
    )
    parts = _merge_text(evidence_parts(evidence, budget, high_res) + [TextPart(body)])
    return ChatRequest(
        model_id=model_id,
        parts=tuple(parts),
        max_new_tokens=params.max_new_tokens,
        repetition_penalty=params.repetition_penalty,
        temperature=params.temperature,
    )


def run_stage(
    backend: Backend,
    evidence: Evidence,
    priors: Sequence[StageTranscript],
    spec: StageSpec,
    question: str,
    options: OptionSet,
    *,
    retry: RetryPolicy = RetryPolicy(),
    **request_kw: Any,
) -> StageTranscript:
    """Render one stage prompt, call the backend with retries, record the exchange."""
    req = build_request(backend.model_id, evidence, priors, spec, question, options, **request_kw)
    attempt = 0
    while True:
        try:
            resp = backend.complete(req)
            if resp.finish_reason == "error":
                raise Transport("backend reported finish_reason=error")
            break
        except BackendError as exc:
            if not exc.retryable or attempt >= retry.max_retries:
                raise StageFailure(spec.stage_id, exc) from exc
            delay = retry.delay(attempt, exc)
            log.info("stage %s attempt %d failed (%s); retrying in %.2fs", spec.stage_id.value, attempt + 1, exc, delay)
            retry.sleep(delay)
            attempt += 1
        except MissingPrior:
            raise
        except Exception as exc:
            raise StageFailure(spec.stage_id, exc) from exc
    meta = {
        "model_id": backend.model_id,
        "finish_reason": resp.finish_reason,
        "usage": dict(resp.usage),
        "latency_ms": resp.latency_ms,
        "retries": attempt,
    }
    return StageTranscript(spec.stage_id, req.rendered_text(), resp.text, meta, req.digest)


def select_reasoning_path(protocol: ReasoningProtocol) -> PathKind:
    log.debug("reasoning path %s (capability=%s)", protocol.path_hint.value,
              protocol.capability.value if protocol.capability else None)
    return protocol.path_hint


def run_reasoning(
    backend: Backend,
    evidence: Evidence,
    protocol: ReasoningProtocol,
    question: str,
    options: OptionSet,
    **stage_kw: Any,
) -> ReasoningTrace:
    """Run the protocol's stages in order, threading outputs into later stages.

    On failure the raised :class:`StageFailure` carries the transcripts that
    completed before it.
    """
    path = select_reasoning_path(protocol)
    done: list[StageTranscript] = []
    for spec in protocol.stage_specs:
        try:
            t = run_stage(backend, evidence, done, spec, question, options, protocol=protocol, **stage_kw)
        except StageFailure as exc:
            exc.completed = list(done)
            raise
        done.append(t)
    return ReasoningTrace(path, tuple(done))
