"""Stage specifications and the editable instruction templates behind them."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path


class StageId(str, Enum):
    PERCEPTION = "perception"
    DYNAMICS = "dynamics"
    VERIFICATION = "verification"
    EXPERT = "expert"
    DIRECT = "direct"


class PathKind(str, Enum):
    DECOMPOSED = "decomposed"
    EXPERT = "expert"
    DIRECT = "direct"


# the prior sets each stage is allowed to declare
_REQUIRED_PRIORS = {
    StageId.PERCEPTION: (),
    StageId.DYNAMICS: (StageId.PERCEPTION,),
    StageId.VERIFICATION: (StageId.PERCEPTION, StageId.DYNAMICS),
    StageId.EXPERT: (),
    StageId.DIRECT: (),
}

PATH_STAGES = {
    PathKind.DECOMPOSED: (StageId.PERCEPTION, StageId.DYNAMICS, StageId.VERIFICATION),
    PathKind.EXPERT: (StageId.EXPERT,),
    PathKind.DIRECT: (StageId.DIRECT,),
}

PRIOR_HEADINGS = {
    StageId.PERCEPTION: "PERCEPTION NOTES:",
    StageId.DYNAMICS: "DYNAMICS NOTES:",
}


@dataclass(frozen=True)
class StageSpec:
    stage_id: StageId
    instruction_template: str
    include_priors: tuple[StageId, ...] = ()

    def __post_init__(self):
        if tuple(self.include_priors) != _REQUIRED_PRIORS[self.stage_id]:
            raise ValueError(
                f"{self.stage_id.value} must include priors "
                f"{[p.value for p in _REQUIRED_PRIORS[self.stage_id]]}, got {[p.value for p in self.include_priors]}"
            )


def load_stage_templates(path: str | Path | None = None) -> dict[StageId, StageSpec]:
    if path is None:
        raw = resources.files("omniego").joinpath("data/stage_templates.json").read_text(encoding="utf-8")
    else:
        raw = Path(path).read_text(encoding="utf-8")
    doc = json.loads(raw)
    specs = {}
    for name, entry in doc["stages"].items():
        sid = StageId(name)
        specs[sid] = StageSpec(sid, entry["template"], tuple(StageId(p) for p in entry.get("include_priors", [])))
    missing = set(StageId) - set(specs)
    if missing:
        raise ValueError(f"template file lacks stages: {sorted(m.value for m in missing)}")
    return specs


DEFAULT_STAGE_SPECS = load_stage_templates()
