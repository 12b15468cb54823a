"""QA sample representation and line-delimited JSON ingestion.

Record format, one JSON object per line::

    {"id": "surg-0001",
     "frames": [{"uri": "frames/0001/000.jpg", "index": 0, "width": 1920, "height": 1080}, ...],
     "question": "Which instrument is the surgeon holding?",
     "options": [{"label": "A", "text": "grasper"}, ...],
     "domain": "surgery",
     "rate": 1,
     "offset": 0,
     "gold": "B"}

``frames`` entries may also be bare URI strings (index = position).
``options`` entries may be bare strings (labels assigned A-D in order).
``rate`` is an int, a decimal, or an exact ``"n/d"`` string. ``offset`` and
``gold`` are optional.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import IO, Any, Iterable

from ._util import fraction_to_str, parse_fraction

log = logging.getLogger(__name__)

LABELS = ("A", "B", "C", "D")


class Domain(str, Enum):
    SURGERY = "surgery"
    INDUSTRY = "industry"
    XSPORTS = "xsports"
    ANIMAL = "animal"


@dataclass(frozen=True)
class FrameRef:
    uri: str
    index: int
    width: int | None = None
    height: int | None = None

    @property
    def has_dims(self) -> bool:
        return self.width is not None and self.height is not None


@dataclass(frozen=True)
class Option:
    label: str
    text: str


@dataclass(frozen=True)
class OptionSet:
    options: tuple[Option, ...]

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "OptionSet":
        return cls(tuple(Option(lbl, t) for lbl, t in zip(LABELS, texts)))

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(o.label for o in self.options)

    def text(self, label: str) -> str:
        for o in self.options:
            if o.label == label:
                return o.text
        raise KeyError(label)

    def __iter__(self):
        return iter(self.options)

    def __len__(self) -> int:
        return len(self.options)


@dataclass(frozen=True)
class SampleMetadata:
    domain: Domain
    sampling_rate: Fraction
    sequence_offset: int = 0
    sample_id: str = ""


@dataclass(frozen=True)
class Sample:
    id: str
    frames: tuple[FrameRef, ...]
    question: str
    options: OptionSet
    metadata: SampleMetadata
    gold_label: str | None = None


class MalformedRecord(ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class ParsedDataset(list):
    """A list of samples that also carries the records it rejected."""

    def __init__(self, samples: Iterable[Sample] = (), errors: list[MalformedRecord] | None = None):
        list.__init__(self, samples)
        self.errors = errors or []


def validate_sample(s: Sample) -> list[str]:
    """Return the names of every violated invariant; an empty list means valid."""
    v: list[str] = []
    if not s.frames:
        v.append("frames non-empty")
    indices = [f.index for f in s.frames]
    if any(not isinstance(i, int) or isinstance(i, bool) or i < 0 for i in indices):
        v.append("frame index non-negative integer")
    elif any(b <= a for a, b in zip(indices, indices[1:])):
        v.append("frame indices strictly increasing")
    for f in s.frames:
        if (f.width is None) != (f.height is None):
            v.append("width/height both present or both absent")
            break
    for f in s.frames:
        if f.has_dims and not (f.width > 0 and f.height > 0):
            v.append("width/height positive")
            break
    if not isinstance(s.question, str) or not s.question.strip():
        v.append("question non-empty")
    opts = s.options.options
    if len(opts) != 4:
        v.append("option count ≠ 4")
    labels = [o.label for o in opts]
    if len(set(labels)) != len(labels) or any(lbl not in LABELS for lbl in labels):
        v.append("option labels distinct and in A-D")
    if any(not isinstance(o.text, str) or not o.text.strip() for o in opts):
        v.append("option text non-empty")
    m = s.metadata
    if not isinstance(m.domain, Domain):
        v.append("domain known")
    if not m.sampling_rate > 0:
        v.append("sampling_rate > 0")
    if not m.sequence_offset >= 0:
        v.append("sequence_offset ≥ 0")
    if s.gold_label is not None and s.gold_label not in LABELS:
        v.append("gold_label in A-D")
    return v


def _frame_from_record(i: int, raw: Any) -> FrameRef:
    if isinstance(raw, str):
        return FrameRef(uri=raw, index=i)
    if not isinstance(raw, dict):
        raise ValueError(f"frame {i} is neither a string nor an object")
    uri = raw.get("uri")
    if not isinstance(uri, str) or not uri:
        raise ValueError(f"frame {i} has no uri")
    index = raw.get("index", i)
    width, height = raw.get("width"), raw.get("height")
    for name, val in (("index", index), ("width", width), ("height", height)):
        if val is not None and (not isinstance(val, int) or isinstance(val, bool)):
            raise ValueError(f"frame {i} {name} is not an integer")
    return FrameRef(uri=uri, index=index, width=width, height=height)


def sample_from_record(rec: Any) -> Sample:
    """Build a Sample from one decoded record; raises ValueError with a reason."""
    if not isinstance(rec, dict):
        raise ValueError("record is not an object")
    for key in ("id", "frames", "question", "options", "domain", "rate"):
        if key not in rec:
            raise ValueError(f"missing field {key!r}")
    sid = rec["id"]
    if not isinstance(sid, (str, int)) or isinstance(sid, bool):
        raise ValueError("id must be a string")
    sid = str(sid)
    if not isinstance(rec["frames"], list):
        raise ValueError("frames must be a list")
    frames = tuple(_frame_from_record(i, f) for i, f in enumerate(rec["frames"]))

    raw_opts = rec["options"]
    if not isinstance(raw_opts, list):
        raise ValueError("options must be a list")
    if len(raw_opts) != 4:
        raise ValueError("option count ≠ 4")
    opts = []
    for lbl, o in zip(LABELS, raw_opts):
        if isinstance(o, str):
            opts.append(Option(lbl, o))
        elif isinstance(o, dict) and isinstance(o.get("text"), str):
            opts.append(Option(str(o.get("label", lbl)), o["text"]))
        else:
            raise ValueError(f"option {lbl} is malformed")

    try:
        domain = Domain(str(rec["domain"]).lower())
    except ValueError:
        raise ValueError(f"unknown domain {rec['domain']!r}") from None
    try:
        rate = parse_fraction(rec["rate"])
    except (ValueError, ZeroDivisionError, TypeError):
        raise ValueError(f"bad rate {rec['rate']!r}") from None
    offset = rec.get("offset", 0)
    if not isinstance(offset, int) or isinstance(offset, bool):
        raise ValueError("offset must be an integer")
    gold = rec.get("gold")
    if gold is not None and not isinstance(gold, str):
        raise ValueError("gold must be a label string")
    question = rec["question"]
    if not isinstance(question, str):
        raise ValueError("question must be a string")

    return Sample(
        id=sid,
        frames=frames,
        question=question,
        options=OptionSet(tuple(opts)),
        metadata=SampleMetadata(domain=domain, sampling_rate=rate, sequence_offset=offset, sample_id=sid),
        gold_label=gold,
    )


def sample_to_record(s: Sample) -> dict[str, Any]:
    frames = []
    for f in s.frames:
        d: dict[str, Any] = {"uri": f.uri, "index": f.index}
        if f.has_dims:
            d["width"], d["height"] = f.width, f.height
        frames.append(d)
    rec: dict[str, Any] = {
        "id": s.id,
        "frames": frames,
        "question": s.question,
        "options": [{"label": o.label, "text": o.text} for o in s.options],
        "domain": s.metadata.domain.value,
        "rate": fraction_to_str(s.metadata.sampling_rate)
        if s.metadata.sampling_rate.denominator != 1
        else s.metadata.sampling_rate.numerator,
        "offset": s.metadata.sequence_offset,
    }
    if s.gold_label is not None:
        rec["gold"] = s.gold_label
    return rec


def serialize_dataset(samples: Iterable[Sample]) -> bytes:
    lines = [json.dumps(sample_to_record(s), ensure_ascii=False) for s in samples]
    return "".join(line + "\n" for line in lines).encode("utf-8")


def parse_dataset(stream: IO[bytes] | bytes, *, strict: bool = False) -> ParsedDataset:
    """Parse line-delimited JSON records into validated samples.

    In lenient mode (the default) bad lines are collected on ``.errors`` of the
    returned list and skipped. With ``strict=True`` the first bad line raises
    :class:`MalformedRecord`.
    """
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(bytes(stream))
    out = ParsedDataset()
    for lineno, raw in enumerate(stream, start=1):
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            err = MalformedRecord(lineno, f"invalid UTF-8: {exc.reason}")
        else:
            if not text.strip():
                continue
            err = None
            try:
                sample = sample_from_record(json.loads(text))
            except json.JSONDecodeError as exc:
                err = MalformedRecord(lineno, f"invalid JSON: {exc.msg}")
            except (ValueError, RecursionError) as exc:
                err = MalformedRecord(lineno, str(exc))
            else:
                violations = validate_sample(sample)
                if violations:
                    err = MalformedRecord(lineno, "; ".join(violations))
                else:
                    out.append(sample)
        if err is not None:
            if strict:
                raise err
            out.errors.append(err)
    if out.errors:
        log.warning("skipped %d malformed record(s): lines %s", len(out.errors), [e.line for e in out.errors])
    return out


def load_dataset(path: str | Path, *, strict: bool = False) -> ParsedDataset:
    with open(path, "rb") as fh:
        return parse_dataset(fh, strict=strict)
