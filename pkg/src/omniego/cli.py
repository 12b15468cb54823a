"""Command line: ``omniego run | report | replay``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .backend import (
    CachingBackend,
    RemoteBackend,
    ScriptedBackend,
    VisualBudget,
    default_generation_params,
)
from .harness import (
    LADDER,
    AblationConfig,
    PipelineConfig,
    aggregate,
    emit_report,
    load_results,
    render_ladder,
    render_trace,
    run_batch,
    run_ladder,
)
from .router import PathMatrix, RoutingRuleTable
from .samples import Domain, load_dataset
from .stages import load_stage_templates

log = logging.getLogger("omniego")

_FORMATS = {"table": "table_text", "json": "json", "csv": "csv_predictions"}


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _pick(args, cfg: dict, name: str, default=None):
    val = getattr(args, name, None)
    if val is not None:
        return val
    return cfg.get(name, default)


def build_pipeline_config(args, cfg: dict) -> PipelineConfig:
    params = default_generation_params(
        _pick(args, cfg, "max_new_tokens"),
        _pick(args, cfg, "repetition_penalty"),
        force=bool(_pick(args, cfg, "force_penalty", False)),
    )
    domain_penalty = {}
    for dom, pen in (cfg.get("domain_penalty") or {}).items():
        domain_penalty[Domain(dom)] = default_generation_params(
            repetition_penalty=pen, force=bool(cfg.get("force_penalty", False))
        ).repetition_penalty
    budget = VisualBudget(
        _pick(args, cfg, "max_pixels", VisualBudget().max_pixels),
        _pick(args, cfg, "high_res_pixels", VisualBudget().high_res_pixels),
    )
    ablation = AblationConfig(
        enable_ten=not args.no_ten,
        enable_cor=not args.no_cor,
        enable_rdr=not args.no_rdr,
        enable_bov=not args.no_bov,
        enable_dac_recovery=not args.no_dac_recovery,
        high_res_industry=not args.no_high_res,
    )
    kw = {}
    if _pick(args, cfg, "rules"):
        kw["rules"] = RoutingRuleTable.load(_pick(args, cfg, "rules"))
    if _pick(args, cfg, "path_matrix"):
        kw["path_matrix"] = PathMatrix.load(_pick(args, cfg, "path_matrix"))
    if _pick(args, cfg, "templates"):
        kw["stage_specs"] = load_stage_templates(_pick(args, cfg, "templates"))
    return PipelineConfig(
        ablation=ablation,
        params=params,
        domain_penalty=domain_penalty,
        budget=budget,
        max_per_segment=_pick(args, cfg, "max_per_segment", 32),
        fallback_label=_pick(args, cfg, "fallback_label", "A"),
        **kw,
    )


def build_backend(args, cfg: dict):
    script = _pick(args, cfg, "script")
    if script:
        backend = ScriptedBackend.from_file(script, model_id=_pick(args, cfg, "model", "scripted"))
    else:
        endpoint = _pick(args, cfg, "endpoint")
        model = _pick(args, cfg, "model")
        if not endpoint or not model:
            raise SystemExit("run needs --endpoint and --model (or --script for a scripted backend)")
        backend = RemoteBackend(
            endpoint,
            model,
            path=_pick(args, cfg, "api_path", "/v1/chat/completions"),
            token_env=_pick(args, cfg, "token_env", "OMNIEGO_API_KEY"),
            timeout=float(_pick(args, cfg, "timeout", 120.0)),
            max_in_flight=int(_pick(args, cfg, "max_in_flight", 4)),
        )
    cache_dir = _pick(args, cfg, "cache_dir")
    return CachingBackend(backend, cache_dir) if cache_dir else backend


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    dataset = load_dataset(args.dataset, strict=args.strict)
    if dataset.errors:
        print(f"skipped {len(dataset.errors)} malformed record(s)", file=sys.stderr)
        for err in dataset.errors[:20]:
            print(f"  {err}", file=sys.stderr)
    pipeline = build_pipeline_config(args, cfg)
    backend = build_backend(args, cfg)
    parallelism = int(_pick(args, cfg, "parallelism", 4))
    if args.ladder:
        rows = run_ladder(dataset, backend, pipeline, parallelism, args.out)
        text = render_ladder(rows)
        Path(args.out, "ladder.txt").write_text(text, encoding="utf-8")
        sys.stdout.write(text)
        return 0
    results = run_batch(dataset, pipeline, backend, parallelism, args.out)
    report = aggregate(results, pipeline.snapshot(backend.model_id))
    Path(args.out, "report.json").write_bytes(emit_report(report, "json"))
    Path(args.out, "predictions.csv").write_bytes(emit_report(report, "csv_predictions"))
    sys.stdout.write(emit_report(report, "table_text").decode("utf-8"))
    failed = sum(1 for r in results if r.error)
    if failed:
        print(f"{failed} sample(s) failed; rerun to retry them", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    out = Path(args.results)
    results = load_results(out, args.config_digest)
    config = {}
    if (out / "run.json").exists():
        config = json.loads((out / "run.json").read_text(encoding="utf-8")).get("config", {})
    report = aggregate(results, config)
    sys.stdout.buffer.write(emit_report(report, _FORMATS[args.format]))
    return 0


def cmd_replay(args) -> int:
    traces = sorted(Path(args.results, "traces").glob("*.trace.json"))
    shown = 0
    for path in traces:
        doc = json.loads(path.read_text(encoding="utf-8"))
        if args.sample and doc["sample_id"] != args.sample:
            continue
        sys.stdout.write(render_trace(doc) + "\n")
        shown += 1
    if not shown:
        print("no matching traces", file=sys.stderr)
        return 1
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="omniego", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the pipeline over a dataset")
    r.add_argument("--dataset", required=True, help="line-delimited JSON records")
    r.add_argument("--out", required=True, help="output directory (results, traces, reports)")
    r.add_argument("--config", help="JSON config file; flags override it")
    r.add_argument("--endpoint", help="base URL of a chat-completions server")
    r.add_argument("--api-path", dest="api_path")
    r.add_argument("--model")
    r.add_argument("--token-env", dest="token_env", help="env var holding the bearer token")
    r.add_argument("--timeout", type=float)
    r.add_argument("--max-in-flight", dest="max_in_flight", type=int)
    r.add_argument("--script", help="JSON script for a scripted backend instead of an endpoint")
    r.add_argument("--cache-dir", dest="cache_dir")
    r.add_argument("--parallelism", type=int)
    r.add_argument("--strict", action="store_true", help="abort on the first malformed record")
    r.add_argument("--rules", help="routing rule table JSON")
    r.add_argument("--path-matrix", dest="path_matrix")
    r.add_argument("--templates", help="stage template JSON")
    r.add_argument("--max-new-tokens", dest="max_new_tokens", type=int)
    r.add_argument("--repetition-penalty", dest="repetition_penalty", type=float)
    r.add_argument("--force-penalty", dest="force_penalty", action="store_true", default=None)
    r.add_argument("--max-pixels", dest="max_pixels", type=int)
    r.add_argument("--high-res-pixels", dest="high_res_pixels", type=int)
    r.add_argument("--max-per-segment", dest="max_per_segment", type=int)
    r.add_argument("--fallback-label", dest="fallback_label", choices=list("ABCD"))
    for flag in ("ten", "cor", "rdr", "bov", "dac-recovery", "high-res"):
        r.add_argument(f"--no-{flag}", dest=f"no_{flag.replace('-', '_')}", action="store_true")
    r.add_argument("--ladder", action="store_true",
                   help=f"run the {len(LADDER)}-step ablation ladder instead of one configuration")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="aggregate a results directory")
    rep.add_argument("results")
    rep.add_argument("--format", choices=sorted(_FORMATS), default="table")
    rep.add_argument("--config-digest", dest="config_digest")
    rep.set_defaults(func=cmd_report)

    rp = sub.add_parser("replay", help="re-render persisted traces")
    rp.add_argument("results")
    rp.add_argument("--sample")
    rp.set_defaults(func=cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
