"""Option-wise hypothesis checking.

Each option is judged on four elicited fields: visual support, granularity
consistency, temporal compatibility, and hard contradiction. An option
passes when ``support and granularity and temporal and not contradiction``.
The verifier reply uses a fixed block grammar (schema ``omniego-bov/1``)::

    [OPTION A]
    SUPPORT: yes
    GRANULARITY: yes
    TEMPORAL: no
    CONTRADICTION: no
    EVIDENCE: t=03.00 s; t=04.50 s
    ASSUMPTIONS: the tool is still held off-screen; lighting is unchanged
    RATIONALE: free text
    ...
    FINAL ANSWER: B

``EVIDENCE`` lists cited frame times (``none`` allowed); their distinct count
is the support count. ``ASSUMPTIONS`` lists unsupported assumptions separated
by ``;`` or as ``-`` bullets on following lines (``none`` allowed).
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from operator import attrgetter
from decimal import Decimal
from enum import Enum
from typing import Iterable, Sequence

from .router import Capability, ReasoningProtocol
from .samples import LABELS, OptionSet
from .stages import PRIOR_HEADINGS, StageId

log = logging.getLogger(__name__)
_label_of = attrgetter("label")

SCHEMA_VERSION = "omniego-bov/1"


class SelectionReason(str, Enum):
    UNIQUE_PASS = "unique_pass"
    TIEBREAK_SUPPORT = "tiebreak_support"
    TIEBREAK_ASSUMPTIONS = "tiebreak_assumptions"
    LEAST_VIOLATING_FALLBACK = "least_violating_fallback"


@dataclass(frozen=True, slots=True)
class VerificationRecord:
    label: str
    support: bool
    granularity_ok: bool
    temporal_ok: bool
    contradiction: bool
    support_count: int = 0
    assumption_count: int = 0
    rationale: str = ""

    @property
    def verdict(self) -> bool:
        return self.support and self.granularity_ok and self.temporal_ok and not self.contradiction

    @property
    def violations(self) -> int:
        return (not self.support) + (not self.granularity_ok) + (not self.temporal_ok) + self.contradiction

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "support": self.support,
            "granularity_ok": self.granularity_ok,
            "temporal_ok": self.temporal_ok,
            "contradiction": self.contradiction,
            "support_count": self.support_count,
            "assumption_count": self.assumption_count,
            "verdict": self.verdict,
            "rationale": self.rationale,
        }


@dataclass(frozen=True, slots=True)
class VerificationOutcome:
    records: tuple[VerificationRecord, ...]
    chosen: str
    reason: SelectionReason

    def to_dict(self) -> dict:
        return {
            "chosen": self.chosen,
            "reason": self.reason.value,
            "records": [r.to_dict() for r in self.records],
        }


class IncompleteVerification(ValueError):
    def __init__(self, missing: Iterable[str], duplicates: Iterable[str] = ()):
        self.missing = frozenset(missing)
        self.duplicates = frozenset(duplicates)
        super().__init__(f"verification blocks missing for {sorted(self.missing)}")


_CAPABILITY_REQUIREMENTS = {
    Capability.NOT_VISIBLE: (
        "A not-visible option passes only on complete absence: the item must be absent "
        "throughout the whole evidence set, in every frame."
    ),
    Capability.TEMPORAL_LOCALIZATION: (
        "A temporal option passes only if it aligns with the inactive-active boundary; "
        "prefer the closest timestamp to that transition."
    ),
    Capability.PREDICTION: (
        "A next-state option passes only if it agrees with the final observed trajectory "
        "(next-state consistency)."
    ),
    Capability.COUNTING: "A count passes only if it obeys the granularity the question names.",
    Capability.SPATIAL_LOCALIZATION: "A spatial option passes only if the target-anchor relation matches.",
    Capability.IDENTIFICATION: "Eliminate every option whose attributes mismatch the evidence.",
}


def build_verification_instruction(
    protocol: ReasoningProtocol,
    priors: Sequence[StageId] = (),
    options: OptionSet | None = None,
) -> str:
    lines = [f"OPTION VERIFICATION (schema {SCHEMA_VERSION})"]
    sources = ["the frames"] + [PRIOR_HEADINGS[p].rstrip(":").lower() for p in priors if p in PRIOR_HEADINGS]
    lines.append(
        "Treat each option as a hypothesis and test it against " + " and ".join(sources) + ". For every option decide:"
    )
    lines += [
        "- SUPPORT: is the option directly supported by visible evidence?",
        "- GRANULARITY: does it match the semantic granularity the question asks for (exact category, grouping level)?",
        "- TEMPORAL: is it compatible with when things happen in the evidence?",
        "- CONTRADICTION: is it contradicted outright by any frame?",
    ]
    if protocol.operator is not None:
        lines.append(f"Evidence boundary: {protocol.operator.evidence_boundary}")
        lines.append(f"Verification rule: {protocol.operator.verification_rule}")
        lines.append(_CAPABILITY_REQUIREMENTS[protocol.capability])
    labels = options.labels if options is not None else LABELS
    lines.append("")
    lines.append("Write exactly one block per option (" + ", ".join(labels) + ") in this format:")
    lines += [
        "[OPTION <letter>]",
        "SUPPORT: yes|no",
        "GRANULARITY: yes|no",
        "TEMPORAL: yes|no",
        "CONTRADICTION: yes|no",
        "EVIDENCE: frame times you rely on, e.g. t=03.00 s; t=04.50 s (or none)",
        "ASSUMPTIONS: unsupported assumptions separated by ; (or none)",
        "RATIONALE: one or two sentences",
        "",
        "Choose the option that passes all four checks. If several pass, prefer the one with the "
        "strongest direct evidence and the fewest unsupported assumptions.",
        "End with exactly one line: FINAL ANSWER: <letter>",
    ]
    return "\n".join(lines) + "\n"


_HEADER = re.compile(r"^[ \t]*[*#>]*[ \t]*\[?[ \t]*OPTION[ \t]+\(?([A-Da-d])\)?[ \t]*\]?[ \t]*:?[ \t]*[*]*[ \t]*$",
                     re.IGNORECASE | re.MULTILINE)
_STOP = re.compile(r"^[ \t]*[*#]*[ \t]*(FINAL ANSWER|\[END)", re.IGNORECASE | re.MULTILINE)
_FIELD = re.compile(
    r"^[ \t]*[-*]*[ \t]*\**(SUPPORT|GRANULARITY|TEMPORAL|CONTRADICTION|EVIDENCE|ASSUMPTIONS|RATIONALE)\**[ \t]*:[ \t]*(.*)$",
    re.IGNORECASE,
)
_BULLET = re.compile(r"^[ \t]*[-*•][ \t]+(.+)$")
_TIME = re.compile(r"t\s*=\s*(\d+(?:\.\d+)?)", re.IGNORECASE)
_YES = {"yes", "y", "true", "1", "pass", "passed"}
_NO = {"no", "n", "false", "0", "fail", "failed"}
_NONE = {"", "none", "n/a", "na", "-", "nil", "no"}


def _bool(value: str | None, missing: bool) -> bool:
    if value is None:
        return missing
    word = value.strip().strip("*.").split()
    word = word[0].lower().rstrip(",;.") if word else ""
    if word in _YES:
        return True
    if word in _NO:
        return False
    return missing


def _parse_block(label: str, body: str) -> VerificationRecord:
    fields: dict[str, str] = {}
    assumptions: list[str] = []
    current = None
    for line in body.splitlines():
        m = _FIELD.match(line)
        if m:
            current = m.group(1).upper()
            fields[current] = m.group(2).strip()
            if current == "ASSUMPTIONS":
                assumptions = [a.strip() for a in fields[current].split(";") if a.strip().lower() not in _NONE]
            continue
        b = _BULLET.match(line)
        if b and current == "ASSUMPTIONS":
            assumptions.append(b.group(1).strip())
        elif current == "RATIONALE" and line.strip():
            fields["RATIONALE"] += " " + line.strip()
    times = {Decimal(t).normalize() for t in _TIME.findall(fields.get("EVIDENCE", ""))}
    # an unstated check is treated as failed: unestablished support does not count
    return VerificationRecord(
        label=label,
        support=_bool(fields.get("SUPPORT"), False),
        granularity_ok=_bool(fields.get("GRANULARITY"), False),
        temporal_ok=_bool(fields.get("TEMPORAL"), False),
        contradiction=_bool(fields.get("CONTRADICTION"), True),
        support_count=len(times),
        assumption_count=len(assumptions),
        rationale=fields.get("RATIONALE", ""),
    )


def verification_span(raw: str) -> tuple[int, int] | None:
    """Character range covering the option blocks, or None if there are none."""
    headers = list(_HEADER.finditer(raw))
    if not headers:
        return None
    stop = _STOP.search(raw, headers[-1].end())
    return headers[0].start(), stop.start() if stop else len(raw)


def parse_verification(raw: str) -> list[VerificationRecord]:
    """Extract one record per label A-D, in label order.

    Raises :class:`IncompleteVerification` when a label has no block. When a
    label appears twice the later block wins.
    """
    headers = list(_HEADER.finditer(raw))
    blocks: dict[str, VerificationRecord] = {}
    dupes = set()
    for i, h in enumerate(headers):
        end = headers[i + 1].start() if i + 1 < len(headers) else len(raw)
        stop = _STOP.search(raw, h.end(), end)
        body = raw[h.end() : stop.start() if stop else end]
        label = h.group(1).upper()
        if label in blocks:
            dupes.add(label)
        blocks[label] = _parse_block(label, body)
    if dupes:
        log.warning("duplicate verification blocks for %s; later blocks kept", sorted(dupes))
    missing = [lbl for lbl in LABELS if lbl not in blocks]
    if missing:
        raise IncompleteVerification(missing, dupes)
    return [blocks[lbl] for lbl in LABELS]


def _fallback_key(r: VerificationRecord) -> tuple[int, int, int, str]:
    return (r.violations, -r.support_count, r.assumption_count, r.label)


def select_candidate(records: Sequence[VerificationRecord]) -> VerificationOutcome:
    """Pick the surviving option.

    One passing option wins outright. Several passing options are ranked by
    cited support (more is better), then unsupported assumptions (fewer is
    better), then label order. With no passing option, the fewest violated
    checks wins, ties broken the same way.
    """
    ordered = tuple(sorted(records, key=_label_of))
    if len(ordered) != 4 or (ordered[0].label, ordered[1].label, ordered[2].label, ordered[3].label) != LABELS:
        raise ValueError("select_candidate needs exactly one record per label A-D")
    passing = [r for r in ordered if r.support and r.granularity_ok and r.temporal_ok and not r.contradiction]
    if len(passing) == 1:
        return VerificationOutcome(ordered, passing[0].label, SelectionReason.UNIQUE_PASS)
    if passing:
        # label order is already ascending, so the first strict improvement wins ties
        best = passing[0]
        tied_support = 1
        for r in passing[1:]:
            if r.support_count > best.support_count:
                best, tied_support = r, 1
            elif r.support_count == best.support_count:
                tied_support += 1
                if r.assumption_count < best.assumption_count:
                    best = r
        reason = SelectionReason.TIEBREAK_SUPPORT if tied_support == 1 else SelectionReason.TIEBREAK_ASSUMPTIONS
        return VerificationOutcome(ordered, best.label, reason)
    best = min(ordered, key=_fallback_key)
    return VerificationOutcome(ordered, best.label, SelectionReason.LEAST_VIOLATING_FALLBACK)
