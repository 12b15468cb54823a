"""Per-sample pipeline, batch runner, accuracy aggregation and reports.

The pipeline is normalize -> route -> reason -> verify -> calibrate, with
each step switchable for ablations. A disabled step is replaced by its
identity behaviour, never skipped:

* normalization off: frames go in as a plain ordered list, no timestamps, no
  observation rule;
* routing off: a generic protocol with no domain grammar and no operator;
* staged reasoning off: one direct question-answer call;
* option verification off: the last stage's reply goes straight to calibration;
* recovery off: only the structured ``FINAL ANSWER`` line is read, anything
  else becomes the fallback label.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from ._util import digest_of, round_half_up, sha256_text
from .backend import Backend, GenerationParams, VisualBudget
from .calibration import DEFAULT_FALLBACK, Prediction, Tier, calibrate
from .evidence import DEFAULT_MAX_PER_SEGMENT, evidence_to_dict, segment_evidence, untimed_evidence
from .reasoning import ANSWER_INSTRUCTION, RetryPolicy, StageFailure, run_reasoning
from .router import (
    DEFAULT_PATH_MATRIX,
    DEFAULT_RULES,
    PathMatrix,
    RoutingRuleTable,
    compile_protocol,
    generic_protocol,
    route,
    with_path,
)
from .samples import Domain, Sample, validate_sample
from .stages import DEFAULT_STAGE_SPECS, PathKind, StageId, StageSpec
from .verifier import IncompleteVerification, parse_verification, select_candidate, verification_span, \
    build_verification_instruction

log = logging.getLogger(__name__)

TRACE_SCHEMA = "omniego-trace/1"
RESULT_SCHEMA = "omniego-result/1"
REPORT_SCHEMA = "omniego-report/1"

DOMAIN_COLUMNS = (
    (Domain.ANIMAL, "Animal"),
    (Domain.XSPORTS, "XSports"),
    (Domain.INDUSTRY, "Industry"),
    (Domain.SURGERY, "Surgery"),
)
REPORT_HEADER = ("Animal", "XSports", "Industry", "Surgery", "Overall")


@dataclass(frozen=True)
class AblationConfig:
    enable_ten: bool = True
    enable_cor: bool = True
    enable_rdr: bool = True
    enable_bov: bool = True
    enable_dac_recovery: bool = True
    high_res_industry: bool = True

    def to_dict(self) -> dict[str, bool]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def all_combinations(cls) -> list["AblationConfig"]:
        names = [f.name for f in fields(cls)]
        return [cls(**dict(zip(names, bits))) for bits in itertools.product((False, True), repeat=len(names))]


ALL_OFF = AblationConfig(False, False, False, False, False, False)

LADDER: tuple[tuple[str, AblationConfig], ...] = (
    ("Baseline (Direct MLLM)", ALL_OFF),
    ("+ TEN", replace(ALL_OFF, enable_ten=True)),
    ("+ COR & semantic bases", replace(ALL_OFF, enable_ten=True, enable_cor=True)),
    ("+ RDR", replace(ALL_OFF, enable_ten=True, enable_cor=True, enable_rdr=True)),
    ("+ BOV, DAC & high-res (full)", AblationConfig()),
)


@dataclass(frozen=True)
class PipelineConfig:
    ablation: AblationConfig = AblationConfig()
    params: GenerationParams = GenerationParams()
    # per-domain repetition penalty; domains not listed use params.repetition_penalty
    domain_penalty: Mapping[Domain, float] = field(default_factory=dict)
    budget: VisualBudget = VisualBudget()
    max_per_segment: int = DEFAULT_MAX_PER_SEGMENT
    fallback_label: str = DEFAULT_FALLBACK
    rules: RoutingRuleTable = DEFAULT_RULES
    path_matrix: PathMatrix = DEFAULT_PATH_MATRIX
    stage_specs: Mapping[StageId, StageSpec] = field(default_factory=lambda: dict(DEFAULT_STAGE_SPECS))
    retry: RetryPolicy = RetryPolicy()

    def params_for(self, domain: Domain) -> GenerationParams:
        if domain in self.domain_penalty:
            return replace(self.params, repetition_penalty=float(self.domain_penalty[domain]))
        return self.params

    def snapshot(self, model_id: str = "") -> dict[str, Any]:
        return {
            "model_id": model_id,
            "ablation": self.ablation.to_dict(),
            "params": {
                "max_new_tokens": self.params.max_new_tokens,
                "repetition_penalty": self.params.repetition_penalty,
                "temperature": self.params.temperature,
            },
            "domain_penalty": {d.value: p for d, p in sorted(self.domain_penalty.items(), key=lambda kv: kv[0].value)},
            "budget": {"max_pixels": self.budget.max_pixels, "high_res_pixels": self.budget.high_res_pixels},
            "max_per_segment": self.max_per_segment,
            "fallback_label": self.fallback_label,
            "rules_digest": digest_of(self.rules.to_dict()),
            "path_matrix_digest": digest_of(self.path_matrix.to_dict()),
            "templates_digest": digest_of(
                {s.value: spec.instruction_template for s, spec in sorted(self.stage_specs.items(), key=lambda kv: kv[0].value)}
            ),
        }

    def digest(self, model_id: str = "") -> str:
        return digest_of(self.snapshot(model_id))


@dataclass
class SampleResult:
    sample_id: str
    domain: str
    capability: str | None
    predicted: Prediction
    gold: str | None
    correct: bool | None
    trace_path: str | None = None
    usage: dict[str, int] = field(default_factory=dict)
    elapsed_ms: float = 0.0
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": RESULT_SCHEMA,
            "sample_id": self.sample_id,
            "domain": self.domain,
            "capability": self.capability,
            "predicted": self.predicted.to_dict(),
            "gold": self.gold,
            "correct": self.correct,
            "trace_path": self.trace_path,
            "usage": self.usage,
            "elapsed_ms": self.elapsed_ms,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SampleResult":
        return cls(
            sample_id=d["sample_id"],
            domain=d["domain"],
            capability=d.get("capability"),
            predicted=Prediction.from_dict(d["predicted"]),
            gold=d.get("gold"),
            correct=d.get("correct"),
            trace_path=d.get("trace_path"),
            usage=dict(d.get("usage") or {}),
            elapsed_ms=d.get("elapsed_ms", 0.0),
            error=d.get("error"),
        )


class SampleFailed(RuntimeError):
    def __init__(self, sample_id: str, cause: BaseException, trace_path: str | None = None):
        super().__init__(f"sample {sample_id} failed: {cause}")
        self.sample_id = sample_id
        self.cause = cause
        self.trace_path = trace_path


def _safe_name(sample_id: str) -> str:
    stem = re.sub(r"[^A-Za-z0-9._-]+", "_", sample_id)[:80] or "sample"
    return f"{stem}-{sha256_text(sample_id)[:8]}"


def artifact_name(sample_id: str, config_digest: str, kind: str) -> str:
    return f"{_safe_name(sample_id)}__{config_digest[:12]}.{kind}.json"


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _dump(doc: Any) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def run_pipeline(
    sample: Sample,
    config: PipelineConfig,
    backend: Backend,
    trace_dir: str | Path | None = None,
) -> SampleResult:
    """Run the full program on one sample and optionally persist its trace."""
    violations = validate_sample(sample)
    if violations:
        raise ValueError(f"sample {sample.id} is invalid: {violations}")
    ab = config.ablation
    cfg_digest = config.digest(backend.model_id)
    md = sample.metadata
    started = time.perf_counter()

    evidence = (
        segment_evidence(sample.frames, md, config.max_per_segment) if ab.enable_ten
        else untimed_evidence(sample.frames, md)
    )

    routed = None
    if ab.enable_cor:
        routed = route(sample.question, sample.options, md, config.rules)
        protocol = compile_protocol(
            routed.capability, routed.basis, sample.question, sample.options,
            path_matrix=config.path_matrix, stage_specs=config.stage_specs,
        )
        if not ab.enable_rdr:
            protocol = with_path(protocol, PathKind.DIRECT, config.stage_specs)
    else:
        protocol = generic_protocol(PathKind.DECOMPOSED if ab.enable_rdr else PathKind.DIRECT, config.stage_specs)

    final_spec = protocol.stage_specs[-1]
    decision = (
        build_verification_instruction(protocol, final_spec.include_priors, sample.options)
        if ab.enable_bov else ANSWER_INSTRUCTION
    )
    high_res = ab.high_res_industry and md.domain is Domain.INDUSTRY

    doc: dict[str, Any] = {
        "schema": TRACE_SCHEMA,
        "sample_id": sample.id,
        "config_digest": cfg_digest,
        "ablation": ab.to_dict(),
        "route": {"capability": routed.capability.value, "rule_id": routed.rule_id, "domain": md.domain.value}
        if routed else None,
        "protocol": protocol.to_dict(),
        "evidence": evidence_to_dict(evidence),
        "high_res": high_res,
    }
    trace_path = None
    if trace_dir is not None:
        trace_path = artifact_name(sample.id, cfg_digest, "trace")

    try:
        trace = run_reasoning(
            backend, evidence, protocol, sample.question, sample.options,
            decision=decision, params=config.params_for(md.domain), budget=config.budget,
            high_res=high_res, retry=config.retry,
        )
    except StageFailure as exc:
        doc["reasoning"] = {
            "path_taken": protocol.path_hint.value,
            "transcripts": [t.to_dict() for t in exc.completed],
            "failed_stage": exc.stage_id.value,
            "error": str(exc.cause),
        }
        if trace_dir is not None:
            _write_atomic(Path(trace_dir) / trace_path, _dump(doc))
        raise SampleFailed(sample.id, exc, trace_path) from exc
    doc["reasoning"] = trace.to_dict()

    raw = trace.final.raw_output
    outcome = None
    if ab.enable_bov:
        try:
            outcome = select_candidate(parse_verification(raw))
        except IncompleteVerification as exc:
            doc["verification_error"] = f"missing blocks {sorted(exc.missing)}"
    doc["verification"] = outcome.to_dict() if outcome else None

    if outcome is not None:
        pred = Prediction(outcome.chosen, Tier.STRUCTURED, verification_span(raw), sha256_text(raw))
    else:
        pred = calibrate(raw, sample.options, fallback=config.fallback_label, recovery=ab.enable_dac_recovery)
    doc["prediction"] = pred.to_dict()

    if trace_dir is not None:
        _write_atomic(Path(trace_dir) / trace_path, _dump(doc))

    usage: dict[str, int] = {}
    for t in trace.transcripts:
        for k, v in t.backend_meta.get("usage", {}).items():
            usage[k] = usage.get(k, 0) + v
    gold = sample.gold_label
    return SampleResult(
        sample_id=sample.id,
        domain=md.domain.value,
        capability=routed.capability.value if routed else None,
        predicted=pred,
        gold=gold,
        correct=None if gold is None else pred.label == gold,
        trace_path=trace_path,
        usage=usage,
        elapsed_ms=(time.perf_counter() - started) * 1000.0,
    )


def _failed_result(sample: Sample, config: PipelineConfig, exc: BaseException) -> SampleResult:
    pred = Prediction(config.fallback_label, Tier.FALLBACK, None, "")
    gold = sample.gold_label
    return SampleResult(
        sample_id=sample.id,
        domain=sample.metadata.domain.value,
        capability=None,
        predicted=pred,
        gold=gold,
        correct=None if gold is None else pred.label == gold,
        trace_path=getattr(exc, "trace_path", None),
        error=str(exc),
    )


def run_batch(
    samples: Sequence[Sample],
    config: PipelineConfig,
    backend: Backend,
    parallelism: int = 4,
    out_dir: str | Path | None = None,
) -> list[SampleResult]:
    """Run every sample with at most ``parallelism`` in flight; output keeps input order.

    With ``out_dir`` each finished sample is written to
    ``out_dir/results/<id>__<config digest>.result.json`` and its trace to
    ``out_dir/traces/``; existing result files are reused on a rerun. Failed
    samples are recorded with a fallback prediction and retried next time.
    """
    if not isinstance(parallelism, int) or parallelism < 1:
        raise ValueError(f"parallelism must be a positive integer, got {parallelism!r}")
    cfg_digest = config.digest(backend.model_id)
    results_dir = trace_dir = None
    if out_dir is not None:
        out = Path(out_dir)
        results_dir, trace_dir = out / "results", out / "traces"
        results_dir.mkdir(parents=True, exist_ok=True)
        _write_atomic(out / "run.json", _dump({"config_digest": cfg_digest, "config": config.snapshot(backend.model_id)}))

    def one(sample: Sample) -> SampleResult:
        path = results_dir / artifact_name(sample.id, cfg_digest, "result") if results_dir else None
        if path is not None and path.exists():
            return SampleResult.from_dict(json.loads(path.read_text(encoding="utf-8")))
        try:
            res = run_pipeline(sample, config, backend, trace_dir)
        except Exception as exc:  # one bad sample must not stop the batch
            log.warning("%s", exc)
            return _failed_result(sample, config, exc)
        if path is not None:
            _write_atomic(path, _dump(res.to_dict()))
        return res

    if parallelism == 1:
        return [one(s) for s in samples]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, samples))


def load_results(out_dir: str | Path, config_digest: str | None = None) -> list[SampleResult]:
    out = Path(out_dir)
    if config_digest is None and (out / "run.json").exists():
        config_digest = json.loads((out / "run.json").read_text(encoding="utf-8"))["config_digest"]
    pattern = f"*__{config_digest[:12]}.result.json" if config_digest else "*.result.json"
    return [
        SampleResult.from_dict(json.loads(p.read_text(encoding="utf-8")))
        for p in sorted((out / "results").glob(pattern))
    ]


# -- aggregation ----------------------------------------------------------

@dataclass
class EvalReport:
    domain_counts: dict[str, tuple[int, int]]  # domain -> (correct, total with gold)
    capability_counts: dict[str, tuple[int, int]]
    fallback_count: int
    prediction_count: int
    predictions: list[tuple[str, str]]
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def overall_counts(self) -> tuple[int, int]:
        c = sum(v[0] for v in self.domain_counts.values())
        t = sum(v[1] for v in self.domain_counts.values())
        return c, t

    def domain_accuracy(self, domain: str) -> Fraction | None:
        c, t = self.domain_counts.get(domain, (0, 0))
        return Fraction(100 * c, t) if t else None

    @property
    def overall_accuracy(self) -> Fraction | None:
        c, t = self.overall_counts
        return Fraction(100 * c, t) if t else None

    @property
    def fallback_rate(self) -> Fraction | None:
        return Fraction(100 * self.fallback_count, self.prediction_count) if self.prediction_count else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": REPORT_SCHEMA,
            "columns": list(REPORT_HEADER),
            "accuracy": {
                **{name: format_pct(self.domain_accuracy(d.value)) for d, name in DOMAIN_COLUMNS},
                "Overall": format_pct(self.overall_accuracy),
            },
            "domain_counts": {k: list(v) for k, v in self.domain_counts.items()},
            "capability_counts": {k: list(v) for k, v in sorted(self.capability_counts.items())},
            "fallback_count": self.fallback_count,
            "prediction_count": self.prediction_count,
            "fallback_rate": format_pct(self.fallback_rate),
            "predictions": [list(p) for p in self.predictions],
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EvalReport":
        return cls(
            domain_counts={k: tuple(v) for k, v in d["domain_counts"].items()},
            capability_counts={k: tuple(v) for k, v in d["capability_counts"].items()},
            fallback_count=d["fallback_count"],
            prediction_count=d["prediction_count"],
            predictions=[tuple(p) for p in d["predictions"]],
            config=dict(d.get("config") or {}),
        )


def format_pct(value: Fraction | None) -> str:
    return "—" if value is None else f"{round_half_up(value, 2):.2f}"


def aggregate(results: Iterable[SampleResult], config: Mapping[str, Any] | None = None) -> EvalReport:
    """Count correct/total per domain and capability; percentages derive from counts."""
    domains = {d.value: [0, 0] for d, _ in DOMAIN_COLUMNS}
    caps: dict[str, list[int]] = {}
    fallbacks = n = 0
    preds = []
    for r in results:
        n += 1
        preds.append((r.sample_id, r.predicted.label))
        if r.predicted.tier is Tier.FALLBACK:
            fallbacks += 1
        if r.gold is None:
            continue
        hit = int(r.predicted.label == r.gold)
        bucket = domains.setdefault(r.domain, [0, 0])
        bucket[0] += hit
        bucket[1] += 1
        cap = caps.setdefault(r.capability or "unrouted", [0, 0])
        cap[0] += hit
        cap[1] += 1
    return EvalReport(
        domain_counts={k: (v[0], v[1]) for k, v in domains.items()},
        capability_counts={k: (v[0], v[1]) for k, v in caps.items()},
        fallback_count=fallbacks,
        prediction_count=n,
        predictions=preds,
        config=dict(config or {}),
    )


def _table_row(cells: Sequence[str], widths: Sequence[int]) -> str:
    return " | ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()


def render_table(report: EvalReport) -> str:
    values = [format_pct(report.domain_accuracy(d.value)) for d, _ in DOMAIN_COLUMNS]
    values.append(format_pct(report.overall_accuracy))
    widths = [max(len(h), len(v)) for h, v in zip(REPORT_HEADER, values)]
    lines = [_table_row(REPORT_HEADER, widths), _table_row(values, widths)]
    c, t = report.overall_counts
    lines.append("")
    lines.append(f"correct/total: {c}/{t}")
    lines.append(f"fallback rate: {format_pct(report.fallback_rate)}% ({report.fallback_count}/{report.prediction_count})")
    if report.capability_counts:
        lines.append("per capability:")
        for cap, (cc, ct) in sorted(report.capability_counts.items()):
            lines.append(f"  {cap}: {format_pct(Fraction(100 * cc, ct) if ct else None)} ({cc}/{ct})")
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, fmt: str = "table_text") -> bytes:
    if fmt == "table_text":
        return render_table(report).encode("utf-8")
    if fmt == "json":
        return _dump(report.to_dict()).encode("utf-8")
    if fmt == "csv_predictions":
        rows = ["id,answer"] + [f"{_csv_cell(sid)},{label}" for sid, label in report.predictions]
        return ("\n".join(rows) + "\n").encode("utf-8")
    raise ValueError(f"unknown report format {fmt!r}")


def _csv_cell(value: str) -> str:
    if any(ch in value for ch in ',"\n\r'):
        return '"' + value.replace('"', '""') + '"'
    return value


def parse_report(data: bytes | str) -> EvalReport:
    return EvalReport.from_dict(json.loads(data))


# -- ablation ladder ------------------------------------------------------

def run_ladder(
    samples: Sequence[Sample],
    backend: Backend,
    base: PipelineConfig = PipelineConfig(),
    parallelism: int = 4,
    out_dir: str | Path | None = None,
) -> list[tuple[str, EvalReport]]:
    rows = []
    for name, ab in LADDER:
        cfg = replace(base, ablation=ab)
        results = run_batch(samples, cfg, backend, parallelism, out_dir)
        rows.append((name, aggregate(results, cfg.snapshot(backend.model_id))))
    return rows


def render_ladder(rows: Sequence[tuple[str, EvalReport]]) -> str:
    header = ("Model Variant",) + REPORT_HEADER + ("Δ Overall",)
    base = rows[0][1].overall_accuracy if rows else None
    body = []
    for i, (name, rep) in enumerate(rows):
        cells = [name] + [format_pct(rep.domain_accuracy(d.value)) for d, _ in DOMAIN_COLUMNS]
        overall = rep.overall_accuracy
        cells.append(format_pct(overall))
        if i == 0 or overall is None or base is None:
            cells.append("--")
        else:
            # difference of the rendered values, so every row checks by eye
            delta = round_half_up(overall, 2) - round_half_up(base, 2)
            cells.append(f"{'+' if delta >= 0 else ''}{delta:.2f}")
        body.append(cells)
    widths = [max(len(r[k]) for r in [list(header)] + body) for k in range(len(header))]
    lines = [_table_row(header, widths)] + [_table_row(r, widths) for r in body]
    return "\n".join(lines) + "\n"


# -- replay ---------------------------------------------------------------

def render_trace(doc: Mapping[str, Any]) -> str:
    """Human-readable rendering of a persisted trace document."""
    out = [f"sample {doc['sample_id']}  config {doc['config_digest'][:12]}"]
    if doc.get("route"):
        r = doc["route"]
        out.append(f"route: {r['capability']} via rule {r['rule_id']} ({r['domain']})")
    p = doc["protocol"]
    out.append(f"path: {p['path_hint']}  stages: {', '.join(p['stages'])}")
    for t in doc["reasoning"]["transcripts"]:
        out.append(f"--- {t['stage_id']} [{t['prompt_digest'][:12]}] ---")
        out.append(t["raw_output"].rstrip())
    if doc["reasoning"].get("failed_stage"):
        out.append(f"!!! failed at {doc['reasoning']['failed_stage']}: {doc['reasoning']['error']}")
    if doc.get("verification"):
        v = doc["verification"]
        flags = " ".join(f"{r['label']}:{'pass' if r['verdict'] else 'fail'}" for r in v["records"])
        out.append(f"verification: {flags} -> {v['chosen']} ({v['reason']})")
    if doc.get("prediction"):
        out.append(f"prediction: {doc['prediction']['label']} [{doc['prediction']['tier']}]")
    return "\n".join(out) + "\n"
