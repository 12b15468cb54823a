"""Acceptance suite: one test per release criterion, each at its stated tolerance.

Run alone with ``pytest tests/test_acceptance.py -v``; the terminal summary
prints one PASS/FAIL line per criterion.
"""

import json
import random
import string
import time
from dataclasses import replace
from fractions import Fraction

import pytest

from omniego.backend import ScriptedBackend, VisualBudget, apply_visual_budget
from omniego.calibration import Prediction, Tier, calibrate, canonical_render
from omniego.evidence import segment_evidence, timestamp_frames
from omniego.harness import (
    LADDER,
    REPORT_HEADER,
    AblationConfig,
    PipelineConfig,
    SampleResult,
    aggregate,
    emit_report,
    render_ladder,
    run_batch,
    run_ladder,
)
from omniego.reasoning import RetryPolicy
from omniego.router import OPERATORS, Capability, route
from omniego.samples import LABELS, Domain, FrameRef, OptionSet, SampleMetadata
from omniego.verifier import select_candidate

from conftest import CountingBackend, oracle_responder, prose_responder, question_of, synthetic_dataset
from oracles import exhaustive_selection_cases, pct_string, reference_aggregate, reference_from_facts

pytestmark = pytest.mark.acceptance

FAST = PipelineConfig(retry=RetryPolicy(sleep=lambda s: None))
CORPUS_PATH = "tests/data/malformed_corpus.jsonl"


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.2f}s, budget {self.seconds}s"


@pytest.mark.criterion(1, "timestamp algebra: exact times, segmentation-invariant, 1000 cases < 5 s")
def test_timestamp_algebra():
    rng = random.Random(20261016)
    cases = []
    for _ in range(1000):
        n = rng.randint(0, 500)
        offset = rng.randint(0, 10**4)
        rate = rng.choice([1, 2, 5, 30])
        cases.append(([FrameRef(f"f{i}.jpg", i) for i in range(n)], offset, rate))
    with Budget(5.0):
        for frames, offset, rate in cases:
            base = timestamp_frames(frames, offset, rate)
            # tau * r - i - i0 == 0, checked on numerator/denominator with integers only
            for i, tf in enumerate(base):
                assert tf.timestamp.numerator * rate == (i + offset) * tf.timestamp.denominator
            md = SampleMetadata(Domain.ANIMAL, Fraction(rate), offset, "c")
            for m in (1, 3, 32):
                assert segment_evidence(frames, md, m).frames == base


def fuzz_question(rng):
    words = ["how", "many", "which", "when", "where", "will", "next", "not visible", "left of", "turn",
             "direction", "time", "tool", "the", "is", "HOW MANY", "first time", "closest to", "?", "…", "é",
             "", "\n", "\t", "predict", "identify", "holding", "Wh1ch", "count"]
    kind = rng.random()
    if kind < 0.5:
        return " ".join(rng.choice(words) for _ in range(rng.randint(0, 12)))
    if kind < 0.8:
        alphabet = string.printable + "éßø漢字"
        return "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 80)))
    return "".join(chr(rng.randint(0, 0x2FFF)) for _ in range(rng.randint(0, 40)))


@pytest.mark.criterion(2, "router totality and determinism over 10,000 fuzzed questions; 6 operator rows")
def test_router_totality():
    rng = random.Random(2)
    domains = list(Domain)
    for _ in range(10_000):
        q = fuzz_question(rng)
        opts = OptionSet.from_texts([fuzz_question(rng) or "x" for _ in range(4)])
        md = SampleMetadata(rng.choice(domains), Fraction(1), 0, "f")
        a = route(q, opts, md)
        b = route(q, opts, md)
        assert isinstance(a.capability, Capability)
        assert (a.capability, a.basis, a.rule_id) == (b.capability, b.basis, b.rule_id)
    assert len(OPERATORS) == 6 and set(OPERATORS) == set(Capability)
    assert {(o.boundary, o.rule) for o in OPERATORS.values()} == {
        ("attributes", "eliminate mismatch"),
        ("stable instances", "obey granularity"),
        ("target-anchor pair", "match relation"),
        ("state transition", "closest timestamp"),
        ("final trajectory", "next-state consistency"),
        ("full-frame coverage", "complete absence"),
    }


@pytest.mark.criterion(3, "selection matches brute-force reference over the exhaustive grid < 10 s")
def test_selection_oracle():
    checked = 0
    with Budget(10.0):
        for records, facts in exhaustive_selection_cases():
            out = select_candidate(records)
            assert (out.chosen, out.reason) == reference_from_facts(facts), records
            checked += 1
    # 16 verdict patterns x 4^8 count assignments, plus 16^4 joint booleans x 3 layouts
    assert checked == 16 * 4**8 + 3 * 16**4


def fuzz_bytes(rng):
    frags = [b"FINAL ANSWER: ", b"final answer:", b"(B)", b"[C]", b"option D", b"answer is ", b"A", b"D\n",
             b"\n", b"grasper", b"clip applier", b"\xff\xfe", b"**", b" the ", b"E", b"(", b")", b"\r\n", b"\x00"]
    if rng.random() < 0.5:
        return rng.randbytes(rng.randint(0, 160))
    return b"".join(rng.choice(frags) for _ in range(rng.randint(0, 14)))


def load_corpus():
    with open(CORPUS_PATH, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


@pytest.mark.criterion(4, "calibration totality on 100,000 fuzzed inputs, idempotence, corpus recovery")
def test_calibration_totality_and_corpus():
    rng = random.Random(4)
    opts = OptionSet.from_texts(["grasper", "hook", "clip applier", "irrigator"])
    for _ in range(100_000):
        p = calibrate(fuzz_bytes(rng), opts)
        assert p.label in LABELS
        assert (p.tier is Tier.FALLBACK) == (p.source_span is None)
    for label in LABELS:
        for tier in Tier:
            p = Prediction(label, tier, None if tier is Tier.FALLBACK else (0, 1))
            back = calibrate(canonical_render(p))
            assert (back.label, back.tier) == (label, Tier.STRUCTURED)

    corpus = load_corpus()
    assert len(corpus) >= 200
    recoverable = [c for c in corpus if c["expected"] != "fallback"]
    recovered = wrong_unique = 0
    for c in recoverable:
        p = calibrate(c["raw"], OptionSet.from_texts(c["options"]))
        if p.tier is not Tier.FALLBACK:
            recovered += 1
            if c["unique_mention"] and p.label != c["expected"]:
                wrong_unique += 1
    rate = recovered / len(recoverable)
    assert rate >= 0.95, f"non-fallback rate {rate:.3f}"
    assert wrong_unique == 0


@pytest.mark.criterion(5, "visual budget: 1920x1080 -> 800x450 within 360000 px, idempotent, no upscale")
def test_visual_budget():
    w, h = apply_visual_budget(1920, 1080, 360_000)
    assert (w, h) == (800, 450)
    assert w * h <= 360_000
    assert abs(w / h - 1920 / 1080) / (1920 / 1080) <= 0.01
    assert apply_visual_budget(w, h, 360_000) == (w, h)
    assert apply_visual_budget(1920, 1080, VisualBudget()) == (800, 450)
    rng = random.Random(5)
    for _ in range(2000):
        sw, sh, b = rng.randint(1, 6000), rng.randint(1, 6000), rng.randint(1, 4_000_000)
        tw, th = apply_visual_budget(sw, sh, b)
        assert tw <= sw and th <= sh and tw * th <= max(b, 1)
        assert apply_visual_budget(tw, th, b) == (tw, th)


@pytest.mark.criterion(6, "scripted oracle scores 100.00 under all 64 toggles; prose needs recovery; < 60 s")
def test_end_to_end_oracle():
    samples = synthetic_dataset(64, seed=6)
    with Budget(60.0):
        oracle = ScriptedBackend(oracle_responder(samples))
        combos = AblationConfig.all_combinations()
        assert len(combos) == 64
        for ab in combos:
            results = run_batch(samples, replace(FAST, ablation=ab), oracle, parallelism=4)
            assert len(results) == 64
            assert aggregate(results).to_dict()["accuracy"]["Overall"] == "100.00", ab

        prose = ScriptedBackend(prose_responder(samples))
        baseline = sum(s.gold_label == FAST.fallback_label for s in samples)
        for ab in combos:
            report = aggregate(run_batch(samples, replace(FAST, ablation=ab), prose, parallelism=4))
            correct, total = report.overall_counts
            if ab.enable_dac_recovery:
                assert correct / total >= 0.95, ab
            else:
                assert report.fallback_count == 64
                assert correct == baseline, ab


def random_results(rng, n):
    domains = [d.value for d in Domain]
    out = []
    for i in range(n):
        gold = rng.choice([None, "A", "B", "C", "D"]) if rng.random() < 0.3 else rng.choice(LABELS)
        pred = rng.choice(LABELS)
        tier = rng.choice(list(Tier))
        out.append(SampleResult(f"r{i}", rng.choice(domains), rng.choice(["counting", "prediction", None]),
                                Prediction(pred, tier, None if tier is Tier.FALLBACK else (0, 1)), gold,
                                None if gold is None else pred == gold))
    return out


@pytest.mark.criterion(7, "aggregation matches an independent recount on 1,000 result sets; 66.67 witness")
def test_aggregation_recount():
    rng = random.Random(7)
    for _ in range(1000):
        rs = random_results(rng, rng.randint(0, 80))
        report = aggregate(rs)
        ref = reference_aggregate((r.domain, r.capability, r.predicted.label, r.gold) for r in rs if r.gold is not None)
        acc = report.to_dict()["accuracy"]
        assert report.overall_counts == ref["overall"]
        assert acc["Overall"] == pct_string(*ref["overall"])
        for d, name in zip(("animal", "xsports", "industry", "surgery"), REPORT_HEADER):
            c, t = ref["domains"].get(d, (0, 0))
            assert report.domain_counts[d] == (c, t)
            assert acc[name] == pct_string(c, t)
    witness = [
        SampleResult(f"w{i}", dom, None, Prediction("A", Tier.STRUCTURED, (0, 1)), gold, gold == "A")
        for i, (dom, gold) in enumerate(
            [("animal", "A"), ("animal", "A"), ("animal", "A"), ("animal", "B"), ("xsports", "A"), ("xsports", "B")]
        )
    ]
    assert aggregate(witness).to_dict()["accuracy"]["Overall"] == "66.67"


def snapshot_dir(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted((root / "traces").glob("*.json"))}


@pytest.mark.criterion(8, "replay determinism (byte-identical traces and reports) and zero re-execution on resume")
def test_replay_and_resume(tmp_path):
    samples = synthetic_dataset(12, seed=8)
    reports = []
    for name in ("first", "second"):
        out = tmp_path / name
        backend = ScriptedBackend(oracle_responder(samples))
        results = run_batch(samples, FAST, backend, parallelism=3, out_dir=out)
        report = aggregate(results, FAST.snapshot(backend.model_id))
        reports.append((emit_report(report, "json"), emit_report(report, "table_text"), emit_report(report, "csv_predictions")))
    a, b = snapshot_dir(tmp_path / "first"), snapshot_dir(tmp_path / "second")
    assert len(a) == 12 and a == b
    assert reports[0] == reports[1]

    out = tmp_path / "resume"
    cut = samples[4].question
    first = CountingBackend(samples, interrupt_on=cut)
    with pytest.raises(KeyboardInterrupt):
        run_batch(samples, FAST, first, parallelism=1, out_dir=out)
    second = CountingBackend(samples)
    results = run_batch(samples, FAST, second, parallelism=2, out_dir=out)
    assert not any(s.question in second.counts for s in samples[:4])
    assert all(s.question in second.counts for s in samples[4:])
    third = CountingBackend(samples)
    run_batch(samples, FAST, third, parallelism=2, out_dir=out)
    assert sum(third.counts.values()) == 0
    assert emit_report(aggregate(results), "json") == emit_report(aggregate(run_batch(samples, FAST, third, 2, out)), "json")


def feature_responder(samples):
    """Answers correctly more often the more pipeline features the prompt shows."""
    gold = {s.question: s.gold_label for s in samples}

    def reply(req):
        text = req.rendered_text()
        q = question_of(req)
        features = sum(
            (
                "t=00" in text or "t=0" in text,
                "DOMAIN GRAMMAR" in text,
                "PERCEPTION NOTES:" in text or "ROLE: expert" in text,
                "[OPTION <letter>]" in text,
            )
        )
        right = int(q.split("(case ")[1].rstrip(")?")) % 5 < features + 1
        label = gold[q] if right else LABELS[(LABELS.index(gold[q]) + 1) % 4]
        return f"FINAL ANSWER: {label}"

    return reply


@pytest.mark.criterion(9, "five-row ladder with Animal/XSports/Industry/Surgery/Overall columns")
def test_ladder_report(tmp_path):
    samples = synthetic_dataset(40, seed=9)
    rows = run_ladder(samples, ScriptedBackend(feature_responder(samples)), FAST, parallelism=4)
    assert [name for name, _ in rows] == [name for name, _ in LADDER]
    assert len(rows) == 5
    text = render_ladder(rows)
    lines = text.splitlines()
    assert len(lines) == 6
    header = [c.strip() for c in lines[0].split("|")]
    assert header == ["Model Variant", "Animal", "XSports", "Industry", "Surgery", "Overall", "Δ Overall"]
    for line, (name, report) in zip(lines[1:], rows):
        cells = [c.strip() for c in line.split("|")]
        assert cells[0] == name
        assert cells[5] == report.to_dict()["accuracy"]["Overall"]
    overall = [Fraction(r.to_dict()["accuracy"]["Overall"]) for _, r in rows]
    assert overall == sorted(overall) and overall[0] < overall[-1]
    print("\n" + text)
