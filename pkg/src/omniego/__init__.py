"""Routed test-time reasoning for multiple-choice egocentric video QA."""

from .backend import (
    CachingBackend,
    ChatRequest,
    ChatResponse,
    GenerationParams,
    RemoteBackend,
    ScriptedBackend,
    VisualBudget,
    apply_visual_budget,
    default_generation_params,
)
from .calibration import Prediction, Tier, calibrate, canonical_render
from .evidence import Evidence, ReliabilityRule, segment_evidence, timestamp_frames
from .harness import (
    LADDER,
    AblationConfig,
    EvalReport,
    PipelineConfig,
    SampleResult,
    aggregate,
    emit_report,
    render_ladder,
    run_batch,
    run_ladder,
    run_pipeline,
)
from .reasoning import ReasoningTrace, StageTranscript, run_reasoning, run_stage
from .router import Capability, ReasoningProtocol, compile_protocol, route
from .samples import Domain, FrameRef, OptionSet, Sample, SampleMetadata, load_dataset, parse_dataset
from .verifier import VerificationRecord, parse_verification, select_candidate

__version__ = "0.1.0"

__all__ = [
    "AblationConfig",
    "CachingBackend",
    "Capability",
    "ChatRequest",
    "ChatResponse",
    "Domain",
    "EvalReport",
    "Evidence",
    "FrameRef",
    "GenerationParams",
    "LADDER",
    "OptionSet",
    "PipelineConfig",
    "Prediction",
    "ReasoningProtocol",
    "ReasoningTrace",
    "ReliabilityRule",
    "RemoteBackend",
    "Sample",
    "SampleMetadata",
    "SampleResult",
    "ScriptedBackend",
    "StageTranscript",
    "Tier",
    "VerificationRecord",
    "VisualBudget",
    "aggregate",
    "apply_visual_budget",
    "calibrate",
    "canonical_render",
    "compile_protocol",
    "default_generation_params",
    "emit_report",
    "load_dataset",
    "parse_dataset",
    "parse_verification",
    "render_ladder",
    "route",
    "run_batch",
    "run_ladder",
    "run_pipeline",
    "run_reasoning",
    "run_stage",
    "segment_evidence",
    "select_candidate",
    "timestamp_frames",
]
