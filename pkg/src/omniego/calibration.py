"""Deterministic recovery of an option label from any model reply.

Tiers, first hit wins:

1. ``structured`` - a line ``FINAL ANSWER: <L>``; the last such line counts.
2. ``recovered_mention`` - isolated option mentions, ranked
   (a) ``(C)`` / ``option C`` / ``answer is C`` forms, cue-words first, latest first;
   (b) a letter alone on its own line, latest first;
   (c) the full text of exactly one option;
   (d) a bare capital letter token inline, latest first.
3. ``fallback`` - the configured fallback label.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

from ._util import sha256_text
from .samples import LABELS, OptionSet

DEFAULT_FALLBACK = "A"


class Tier(str, Enum):
    STRUCTURED = "structured"
    RECOVERED_MENTION = "recovered_mention"
    FALLBACK = "fallback"


@dataclass(frozen=True)
class Prediction:
    label: str
    tier: Tier
    source_span: tuple[int, int] | None = None
    raw_digest: str = ""

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")
        if (self.tier is Tier.FALLBACK) != (self.source_span is None):
            raise ValueError("fallback predictions, and only they, have no source span")

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "tier": self.tier.value,
            "source_span": list(self.source_span) if self.source_span else None,
            "raw_digest": self.raw_digest,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Prediction":
        span = d.get("source_span")
        return cls(d["label"], Tier(d["tier"]), tuple(span) if span else None, d.get("raw_digest", ""))


_STRUCTURED = re.compile(
    r"^[ \t>*#_\-]*FINAL[ \t]+ANSWER[ \t]*[*_]*[ \t]*[:：][ \t]*[*_]*[ \t]*[(\[]?[ \t]*([A-Da-d])(?![A-Za-z0-9])",
    re.IGNORECASE | re.MULTILINE,
)

_NOT_WORD = r"(?![A-Za-z0-9_])"
_CUE = r"(?:answer(?:\s+is)?|correct\s+(?:option|choice)\s+is|(?:I\s+)?(?:choose|chose|pick|select(?:ed)?|go\s+with)|best\s+(?:option|choice|answer)\s+is)"
_PAREN = re.compile(r"[(\[]([A-D])[)\]]")
_OPTION_WORD = re.compile(r"(?<![A-Za-z])(?i:option|choice)\s*[:#]?\s*[(\[]?([A-Da-d])[)\]]?" + _NOT_WORD)
_CUED = re.compile(r"(?i:" + _CUE + r")\s*[:\-]?\s*[*_]*[(\[]?([A-D])[)\]]?[*_]*" + _NOT_WORD)
_OWN_LINE = re.compile(r"^[ \t>*_\-]*[(\[]?([A-D])[)\].:]?[*_]*[ \t]*$", re.MULTILINE)
_INLINE = re.compile(r"(?<![A-Za-z0-9_'’\-=])([A-D])(?![A-Za-z0-9_'’\-])")
_CUE_BEFORE = re.compile(_CUE + r"[\s:\-*_]*(?:the\s+)?$", re.IGNORECASE)
# words that may follow a bare "A" when it is a label rather than the article
_LABEL_VERBS = re.compile(
    r"\s+(?:is|was|seems|looks|appears|matches|fits|best|correct|wins|holds|remains)\b", re.IGNORECASE
)


def _article_a(text: str, m: re.Match) -> bool:
    if m.group(1) != "A":
        return False
    rest = text[m.end():]
    return bool(re.match(r"\s+[a-z]", rest)) and not _LABEL_VERBS.match(rest)


def _norm(s: str) -> str:
    return " ".join(s.split()).lower()


def _option_text_hit(raw: str, options: OptionSet | None) -> tuple[str, tuple[int, int]] | None:
    if options is None:
        return None
    hits: dict[str, list[tuple[int, int]]] = {}
    for opt in options:
        text = _norm(opt.text)
        if not text:
            continue
        words = [re.escape(w) for w in text.split()]
        rx = re.compile(r"(?<![A-Za-z0-9])" + r"\s+".join(words) + r"(?![A-Za-z0-9])", re.IGNORECASE)
        spans = [m.span() for m in rx.finditer(raw)]
        if spans:
            hits[opt.label] = spans
    # drop occurrences nested inside a longer option's occurrence ("forceps" inside "bipolar forceps")
    surviving = {}
    for lbl, spans in hits.items():
        keep = [
            (s, e)
            for s, e in spans
            if not any(
                o != lbl and any(os_ <= s and e <= oe and (oe - os_) > (e - s) for os_, oe in ospans)
                for o, ospans in hits.items()
            )
        ]
        if keep:
            surviving[lbl] = keep
    if len(surviving) != 1:
        return None
    (lbl, spans), = surviving.items()
    return lbl, spans[-1]


def _mention(raw: str, options: OptionSet | None) -> tuple[str, tuple[int, int]] | None:
    # rank (a): cue-word forms beat bare parenthesized / "option L" forms; latest wins within each
    # a letter right after a cue word is a label even when it reads like the article
    cued = [m for m in _CUED.finditer(raw)]
    for m in list(_PAREN.finditer(raw)) + list(_OPTION_WORD.finditer(raw)):
        if _CUE_BEFORE.search(raw[max(0, m.start() - 40) : m.start()]):
            cued.append(m)
    if cued:
        m = max(cued, key=lambda m: m.start(1))
        return m.group(1).upper(), m.span(1)
    plain = list(_PAREN.finditer(raw)) + list(_OPTION_WORD.finditer(raw))
    if plain:
        m = max(plain, key=lambda m: m.start(1))
        return m.group(1).upper(), m.span(1)
    # rank (b)
    own = list(_OWN_LINE.finditer(raw))
    if own:
        m = own[-1]
        return m.group(1), m.span(1)
    # rank (c)
    hit = _option_text_hit(raw, options)
    if hit:
        return hit
    # rank (d)
    inline = [m for m in _INLINE.finditer(raw) if not _article_a(raw, m)]
    if inline:
        m = inline[-1]
        return m.group(1), m.span(1)
    return None


def calibrate(
    raw: str | bytes,
    options: OptionSet | None = None,
    *,
    fallback: str = DEFAULT_FALLBACK,
    recovery: bool = True,
) -> Prediction:
    """Map any reply to a label in A-D. Never raises for any input text.

    With ``recovery=False`` only the structured field is honoured; anything
    else falls straight through to ``fallback``.
    """
    if fallback not in LABELS:
        raise ValueError(f"fallback must be one of {LABELS}")
    if isinstance(raw, (bytes, bytearray)):
        raw = bytes(raw).decode("utf-8", errors="replace")
    elif not isinstance(raw, str):
        raw = str(raw)
    digest = sha256_text(raw)

    last = None
    for last in _STRUCTURED.finditer(raw):
        pass
    if last is not None:
        return Prediction(last.group(1).upper(), Tier.STRUCTURED, last.span(1), digest)
    if recovery:
        found = _mention(raw, options)
        if found:
            return Prediction(found[0], Tier.RECOVERED_MENTION, found[1], digest)
    return Prediction(fallback, Tier.FALLBACK, None, digest)


def canonical_render(p: Prediction) -> str:
    return f"FINAL ANSWER: {p.label}"
