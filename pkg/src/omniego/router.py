"""Capability routing and protocol compilation.

A question is grounded into one of six capabilities by a first-match keyword
rule table, paired with the semantic basis of its domain, and compiled into a
:class:`ReasoningProtocol`: the capability's evidence boundary and
verification rule, the domain's visual grammar, a reasoning-path hint and the
stage specs to run.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from .samples import Domain, OptionSet, SampleMetadata
from .stages import DEFAULT_STAGE_SPECS, PATH_STAGES, PathKind, StageId, StageSpec


class Capability(str, Enum):
    IDENTIFICATION = "identification"
    COUNTING = "counting"
    SPATIAL_LOCALIZATION = "spatial_localization"
    TEMPORAL_LOCALIZATION = "temporal_localization"
    PREDICTION = "prediction"
    NOT_VISIBLE = "not_visible"


@dataclass(frozen=True)
class SemanticBasis:
    domain: Domain
    grammar: str


@dataclass(frozen=True)
class CapabilityOperator:
    capability: Capability
    boundary: str  # short name of the evidence boundary
    rule: str  # short name of the verification rule
    evidence_boundary: str
    verification_rule: str


SEMANTIC_BASES: dict[Domain, SemanticBasis] = {
    Domain.SURGERY: SemanticBasis(
        Domain.SURGERY,
        "Surgical scene, tool-centric reasoning: read the evidence through the instruments "
        "(which tool is held, by which hand, where its tip is), tool-tissue contact, and the "
        "anatomy the tool acts on. Phases begin when a tool starts acting on tissue.",
    ),
    Domain.INDUSTRY: SemanticBasis(
        Domain.INDUSTRY,
        "Industrial workbench, object-centric procedural reasoning: read the evidence through "
        "components, small parts and tools, the procedure step being performed, and the "
        "exact part names. Count parts by the grouping the question names.",
    ),
    Domain.XSPORTS: SemanticBasis(
        Domain.XSPORTS,
        "Extreme-sports footage, physics-centric embodied reasoning: read the evidence through "
        "the wearer's body motion, trajectory, speed, horizon tilt and terrain, and how the "
        "camera's motion reveals direction changes.",
    ),
    Domain.ANIMAL: SemanticBasis(
        Domain.ANIMAL,
        "Animal-perspective footage, self-other behavioral reasoning: distinguish the camera-"
        "wearing animal's own actions from those of other animals or people, and read "
        "interactions through approach, contact and reaction.",
    ),
}


OPERATORS: dict[Capability, CapabilityOperator] = {
    op.capability: op
    for op in (
        CapabilityOperator(
            Capability.IDENTIFICATION,
            "attributes",
            "eliminate mismatch",
            "attributes: the decisive evidence is the visible attributes of the target "
            "(shape, color, category, function).",
            "eliminate mismatch: reject every option whose attributes contradict what is seen; "
            "keep the option whose attributes all match.",
        ),
        CapabilityOperator(
            Capability.COUNTING,
            "stable instances",
            "obey granularity",
            "stable instances: count only instances that are clearly and stably visible, "
            "each counted once across frames.",
            "obey granularity: count at exactly the grouping level the question names; "
            "do not split or merge instances differently.",
        ),
        CapabilityOperator(
            Capability.SPATIAL_LOCALIZATION,
            "target-anchor pair",
            "match relation",
            "target-anchor pair: the decisive evidence is the target object together with "
            "the anchor it is located relative to.",
            "match relation: accept only the option whose spatial relation between target "
            "and anchor matches what is seen.",
        ),
        CapabilityOperator(
            Capability.TEMPORAL_LOCALIZATION,
            "state transition",
            "closest timestamp",
            "state transition: the decisive evidence is the frame where the relevant state "
            "changes from inactive to active.",
            "closest timestamp: choose the option whose time is closest to the observed "
            "inactive-active boundary.",
        ),
        CapabilityOperator(
            Capability.PREDICTION,
            "final trajectory",
            "next-state consistency",
            "final trajectory: the decisive evidence is the motion and state in the last "
            "frames of the sequence.",
            "next-state consistency: accept only the option that agrees with the final "
            "observed trajectory.",
        ),
        CapabilityOperator(
            Capability.NOT_VISIBLE,
            "full-frame coverage",
            "complete absence",
            "full-frame coverage: inspect every frame, including its borders, before "
            "declaring anything absent.",
            "complete absence: an item counts as not visible only if it is absent "
            "throughout the whole evidence set.",
        ),
    )
}


class RuleScope(str, Enum):
    QUESTION = "question"
    OPTIONS = "options"
    BOTH = "both"


def _phrase_regex(phrase: str) -> re.Pattern:
    words = [re.escape(w) for w in phrase.split()]
    return re.compile(r"(?<!\w)" + r"\s+".join(words) + r"(?!\w)", re.IGNORECASE)


@dataclass(frozen=True)
class RoutingRule:
    id: str
    capability: Capability
    patterns: tuple[str, ...]
    scope: RuleScope = RuleScope.QUESTION
    domains: frozenset[Domain] | None = None
    _compiled: tuple[re.Pattern, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_compiled", tuple(_phrase_regex(p) for p in self.patterns))

    def matches(self, question: str, options: OptionSet, domain: Domain) -> bool:
        if self.domains is not None and domain not in self.domains:
            return False
        texts = []
        if self.scope in (RuleScope.QUESTION, RuleScope.BOTH):
            texts.append(question)
        if self.scope in (RuleScope.OPTIONS, RuleScope.BOTH):
            texts.extend(o.text for o in options)
        return any(rx.search(t) for rx in self._compiled for t in texts)


@dataclass(frozen=True)
class RoutingRuleTable:
    rules: tuple[RoutingRule, ...]
    default: Capability = Capability.IDENTIFICATION

    def __post_init__(self):
        ids = [r.id for r in self.rules]
        if len(set(ids)) != len(ids):
            raise ValueError("routing rule ids must be unique")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "RoutingRuleTable":
        rules = []
        for r in doc.get("rules", []):
            domains = r.get("domains")
            rules.append(
                RoutingRule(
                    id=r["id"],
                    capability=Capability(r["capability"]),
                    patterns=tuple(r["patterns"]),
                    scope=RuleScope(r.get("scope", "question")),
                    domains=frozenset(Domain(d) for d in domains) if domains else None,
                )
            )
        return cls(tuple(rules), Capability(doc.get("default", "identification")))

    @classmethod
    def load(cls, path: str | Path | None = None) -> "RoutingRuleTable":
        if path is None:
            raw = resources.files("omniego").joinpath("data/routing_rules.json").read_text(encoding="utf-8")
        else:
            raw = Path(path).read_text(encoding="utf-8")
        return cls.from_dict(json.loads(raw))

    def to_dict(self) -> dict[str, Any]:
        return {
            "default": self.default.value,
            "rules": [
                {
                    "id": r.id,
                    "capability": r.capability.value,
                    "patterns": list(r.patterns),
                    "scope": r.scope.value,
                    **({"domains": sorted(d.value for d in r.domains)} if r.domains else {}),
                }
                for r in self.rules
            ],
        }


DEFAULT_RULES = RoutingRuleTable.load()


@dataclass(frozen=True)
class PathMatrix:
    default: PathKind = PathKind.DECOMPOSED
    entries: Mapping[tuple[Capability, Domain], PathKind] = field(default_factory=dict)

    def lookup(self, capability: Capability, domain: Domain) -> PathKind:
        return self.entries.get((capability, domain), self.default)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "PathMatrix":
        entries = {}
        for cap, row in doc.get("entries", {}).items():
            for dom, kind in row.items():
                k = PathKind(kind)
                if k not in (PathKind.DECOMPOSED, PathKind.EXPERT):
                    raise ValueError(f"path matrix entries must be decomposed or expert, got {kind!r}")
                entries[(Capability(cap), Domain(dom))] = k
        return cls(PathKind(doc.get("default", "decomposed")), entries)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "PathMatrix":
        if path is None:
            raw = resources.files("omniego").joinpath("data/path_matrix.json").read_text(encoding="utf-8")
        else:
            raw = Path(path).read_text(encoding="utf-8")
        return cls.from_dict(json.loads(raw))

    def to_dict(self) -> dict[str, Any]:
        rows: dict[str, dict[str, str]] = {}
        for (cap, dom), kind in sorted(self.entries.items(), key=lambda kv: (kv[0][0].value, kv[0][1].value)):
            rows.setdefault(cap.value, {})[dom.value] = kind.value
        return {"default": self.default.value, "entries": rows}


DEFAULT_PATH_MATRIX = PathMatrix.load()


@dataclass(frozen=True)
class Route:
    capability: Capability
    basis: SemanticBasis
    rule_id: str  # "default" when no rule matched


@dataclass(frozen=True)
class ReasoningProtocol:
    capability: Capability | None
    basis: SemanticBasis | None
    operator: CapabilityOperator | None
    path_hint: PathKind
    stage_specs: tuple[StageSpec, ...]

    def __post_init__(self):
        if not self.stage_specs:
            raise ValueError("protocol needs at least one stage")
        if self.stage_specs[-1].stage_id not in (StageId.VERIFICATION, StageId.EXPERT, StageId.DIRECT):
            raise ValueError("the last stage must be a verification-oriented stage")

    def to_dict(self) -> dict[str, Any]:
        return {
            "capability": self.capability.value if self.capability else None,
            "domain": self.basis.domain.value if self.basis else None,
            "path_hint": self.path_hint.value,
            "stages": [s.stage_id.value for s in self.stage_specs],
            "evidence_boundary": self.operator.boundary if self.operator else None,
            "verification_rule": self.operator.rule if self.operator else None,
        }


def route(
    question: str,
    options: OptionSet,
    metadata: SampleMetadata,
    rules: RoutingRuleTable = DEFAULT_RULES,
) -> Route:
    basis = SEMANTIC_BASES[metadata.domain]
    for rule in rules.rules:
        if rule.matches(question, options, metadata.domain):
            return Route(rule.capability, basis, rule.id)
    return Route(rules.default, basis, "default")


def _stages_for(path: PathKind, specs: Mapping[StageId, StageSpec]) -> tuple[StageSpec, ...]:
    return tuple(specs[s] for s in PATH_STAGES[path])


def compile_protocol(
    capability: Capability,
    basis: SemanticBasis,
    question: str,
    options: OptionSet,
    *,
    path_matrix: PathMatrix = DEFAULT_PATH_MATRIX,
    stage_specs: Mapping[StageId, StageSpec] = DEFAULT_STAGE_SPECS,
) -> ReasoningProtocol:
    # question/options are accepted for interface parity; the default compiler
    # does not specialise on their wording
    path = path_matrix.lookup(capability, basis.domain)
    return ReasoningProtocol(capability, basis, OPERATORS[capability], path, _stages_for(path, stage_specs))


def generic_protocol(
    path: PathKind = PathKind.DECOMPOSED,
    stage_specs: Mapping[StageId, StageSpec] = DEFAULT_STAGE_SPECS,
) -> ReasoningProtocol:
    """Protocol used when routing is disabled: no basis grammar, no operator."""
    return ReasoningProtocol(None, None, None, path, _stages_for(path, stage_specs))


def with_path(protocol: ReasoningProtocol, path: PathKind,
              stage_specs: Mapping[StageId, StageSpec] = DEFAULT_STAGE_SPECS) -> ReasoningProtocol:
    return ReasoningProtocol(protocol.capability, protocol.basis, protocol.operator, path, _stages_for(path, stage_specs))
