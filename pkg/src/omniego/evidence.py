"""Temporal evidence normalization.

Frames become globally timestamped units ``tau_i = (i + i0) / r`` with exact
rational arithmetic, long sequences are cut into offset-aware segments, and
the frame-reliability preference is expressed as instruction text for the
observation stage (nothing is scored numerically).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple, Sequence

from ._util import fraction_to_str, round_half_up
from .samples import FrameRef, SampleMetadata

DEFAULT_MAX_PER_SEGMENT = 32


class InvalidRate(ValueError):
    pass


class InvalidSegmentSize(ValueError):
    pass


class TimestampedFrame(NamedTuple):
    # a named tuple rather than a frozen dataclass: one is built per frame per call
    frame: FrameRef
    timestamp: Fraction


@dataclass(frozen=True)
class Segment:
    segment_offset: int
    frames: tuple[TimestampedFrame, ...]


@dataclass(frozen=True)
class ReliabilityRule:
    relevance_clause: str
    degradation_clause: str
    transition_exception: str

    def __post_init__(self):
        for name in ("relevance_clause", "degradation_clause", "transition_exception"):
            if not getattr(self, name).strip():
                raise ValueError(f"{name} must be non-empty")


DEFAULT_RULE = ReliabilityRule(
    relevance_clause=(
        "Prefer frames that show the objects, agents, or actions named in the question "
        "and in the answer options; a frame that bears on the options is stronger evidence "
        "than one that does not."
    ),
    degradation_clause=(
        "Discount frames degraded by motion blur, abrupt camera movement, occlusion, "
        "or irrelevant clutter; a sharp, stable frame outranks a degraded one."
    ),
    transition_exception=(
        "Keep a blurred or unstable frame only when it marks a transition between states, "
        "such as the moment an action starts or a direction changes."
    ),
)


@dataclass(frozen=True)
class Evidence:
    segments: tuple[Segment, ...]
    observation_rule: ReliabilityRule | None = DEFAULT_RULE
    timestamped: bool = True

    @property
    def frames(self) -> list[TimestampedFrame]:
        return [tf for seg in self.segments for tf in seg.frames]

    def __len__(self) -> int:
        return sum(len(seg.frames) for seg in self.segments)


def _check_rate(rate) -> Fraction:
    try:
        r = Fraction(rate)
    except (TypeError, ValueError):
        raise InvalidRate(f"sampling rate must be a positive number, got {rate!r}") from None
    if r <= 0:
        raise InvalidRate(f"sampling rate must be positive, got {rate!r}")
    return r


def timestamp_frames(frames: Sequence[FrameRef], offset: int, rate) -> list[TimestampedFrame]:
    """Attach ``(i + offset) / rate`` seconds to the i-th frame (0-based)."""
    return _stamp(frames, offset, _check_rate(rate))


def _stamp(frames: Sequence[FrameRef], offset: int, rate: Fraction) -> list[TimestampedFrame]:
    # (i + offset) / (p / q) == (i + offset) * q / p
    q, p = rate.denominator, rate.numerator
    return [TimestampedFrame(f, Fraction((i + offset) * q, p)) for i, f in enumerate(frames)]


def segment_evidence(
    frames: Sequence[FrameRef],
    metadata: SampleMetadata,
    max_per_segment: int = DEFAULT_MAX_PER_SEGMENT,
    rule: ReliabilityRule = DEFAULT_RULE,
) -> Evidence:
    if not isinstance(max_per_segment, int) or max_per_segment < 1:
        raise InvalidSegmentSize(f"max_per_segment must be >= 1, got {max_per_segment!r}")
    # a frame's time depends only on its global index, so stamp once and cut;
    # each segment records the global index of its first frame
    offset = metadata.sequence_offset
    stamped = _stamp(frames, offset, _check_rate(metadata.sampling_rate))
    segments = tuple(
        Segment(offset + start, tuple(stamped[start : start + max_per_segment]))
        for start in range(0, len(stamped), max_per_segment)
    )
    return Evidence(segments, rule, timestamped=True)


def untimed_evidence(frames: Sequence[FrameRef], metadata: SampleMetadata) -> Evidence:
    """Evidence for the no-normalization ablation: one plain ordered list."""
    chunk = timestamp_frames(frames, metadata.sequence_offset, metadata.sampling_rate)
    return Evidence((Segment(metadata.sequence_offset, tuple(chunk)),), None, timestamped=False)


def format_timestamp(t: Fraction) -> str:
    """Render as ``t=SS.ss s``: at least two integer digits, two decimals, half-up."""
    d = round_half_up(t, 2)
    whole, _, frac = f"{d:.2f}".partition(".")
    return f"t={whole.zfill(2)}.{frac} s"


def render_observation_rule(rule: ReliabilityRule) -> str:
    return (
        "OBSERVATION RULE (frame reliability):\n"
        f"- Relevance: {rule.relevance_clause}\n"
        f"- Degradation: {rule.degradation_clause}\n"
        f"- Exception: {rule.transition_exception}\n"
        "Treat stable, relevant frames as primary support.\n"
    )


def evidence_to_dict(ev: Evidence) -> dict:
    return {
        "timestamped": ev.timestamped,
        "segments": [
            {
                "offset": seg.segment_offset,
                "frames": [
                    {"uri": tf.frame.uri, "index": tf.frame.index, "timestamp": fraction_to_str(tf.timestamp)}
                    for tf in seg.frames
                ],
            }
            for seg in ev.segments
        ],
    }
