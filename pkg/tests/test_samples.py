import json
from dataclasses import replace
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from omniego.samples import (
    Domain,
    FrameRef,
    MalformedRecord,
    OptionSet,
    Sample,
    SampleMetadata,
    parse_dataset,
    serialize_dataset,
    validate_sample,
)

from conftest import make_sample


def record(**over):
    rec = {
        "id": "surg-1",
        "frames": [{"uri": f"f{i}.jpg", "index": i} for i in range(4)],
        "question": "Which instrument is the surgeon holding?",
        "options": ["grasper", "hook", "scissors", "clipper"],
        "domain": "surgery",
        "rate": 1,
    }
    rec.update(over)
    return rec


def lines(*recs) -> bytes:
    return b"".join(json.dumps(r).encode() + b"\n" for r in recs)


def test_single_valid_record():
    out = parse_dataset(lines(record()))
    assert len(out) == 1 and not out.errors
    s = out[0]
    assert s.metadata.domain is Domain.SURGERY
    assert len(s.frames) == 4 and s.options.labels == ("A", "B", "C", "D")
    assert s.gold_label is None


def test_empty_stream():
    assert parse_dataset(b"") == []


def test_missing_option_d():
    out = parse_dataset(lines(record(options=["a", "b", "c"])))
    assert out == []
    assert out.errors[0].line == 1
    assert out.errors[0].reason == "option count ≠ 4"


def test_strict_aborts_on_first_bad_line():
    data = lines(record(), record(options=["a"]), record(id="x"))
    with pytest.raises(MalformedRecord) as exc:
        parse_dataset(data, strict=True)
    assert exc.value.line == 2


def test_lenient_reports_line_numbers_and_keeps_order():
    data = lines(record(id="a")) + b"\n" + b"{not json\n" + lines(record(id="b", rate=0), record(id="c"))
    out = parse_dataset(data)
    assert [s.id for s in out] == ["a", "c"]
    assert [e.line for e in out.errors] == [3, 4]
    assert "sampling_rate > 0" in out.errors[1].reason


def test_rational_rate_and_bare_frames():
    out = parse_dataset(lines(record(frames=["x.jpg", "y.jpg"], rate="30000/1001", offset=7, gold="C")))
    s = out[0]
    assert s.metadata.sampling_rate == Fraction(30000, 1001)
    assert [f.index for f in s.frames] == [0, 1]
    assert s.metadata.sequence_offset == 7 and s.gold_label == "C"


def test_validate_ok(sample):
    assert validate_sample(sample) == []


def test_validate_duplicate_index(sample):
    frames = sample.frames[:2] + (FrameRef("dup.jpg", 7), FrameRef("dup2.jpg", 7))
    assert "frame indices strictly increasing" in validate_sample(replace(sample, frames=frames))


def test_validate_zero_rate(sample):
    bad = replace(sample, metadata=replace(sample.metadata, sampling_rate=Fraction(0)))
    assert validate_sample(bad) == ["sampling_rate > 0"]


def test_validate_collects_every_violation(sample):
    bad = replace(
        sample,
        frames=(FrameRef("a", 0, 10, None),),
        question=" ",
        metadata=replace(sample.metadata, sequence_offset=-1),
        gold_label="E",
    )
    assert set(validate_sample(bad)) == {
        "width/height both present or both absent",
        "question non-empty",
        "sequence_offset ≥ 0",
        "gold_label in A-D",
    }


# -- properties -----------------------------------------------------------

text = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=20).filter(lambda t: t.strip())


@st.composite
def samples(draw):
    n = draw(st.integers(1, 6))
    idx = sorted(draw(st.sets(st.integers(0, 10_000), min_size=n, max_size=n)))
    dims = draw(st.one_of(st.none(), st.tuples(st.integers(1, 4000), st.integers(1, 4000))))
    frames = tuple(FrameRef(f"frame{i}.png", i, *(dims or (None, None))) for i in idx)
    rate = Fraction(draw(st.integers(1, 10**6)), draw(st.integers(1, 10**4)))
    sid = draw(text)
    return Sample(
        id=sid,
        frames=frames,
        question=draw(text),
        options=OptionSet.from_texts(draw(st.lists(text, min_size=4, max_size=4))),
        metadata=SampleMetadata(draw(st.sampled_from(list(Domain))), rate, draw(st.integers(0, 10**5)), sid),
        gold_label=draw(st.one_of(st.none(), st.sampled_from("ABCD"))),
    )


@given(st.lists(samples(), max_size=5))
def test_round_trip(ss):
    assert list(parse_dataset(serialize_dataset(ss))) == ss


@settings(max_examples=300)
@given(st.binary(max_size=400))
def test_fuzz_never_yields_invalid(data):
    for s in parse_dataset(data):
        assert validate_sample(s) == []


@settings(max_examples=200)
@given(st.lists(st.one_of(st.just(json.dumps(record())), st.text(max_size=60)), max_size=6))
def test_fuzz_mixed_lines(chunks):
    data = "\n".join(c.replace("\n", " ") for c in chunks).encode("utf-8", "surrogatepass")
    out = parse_dataset(data)
    for s in out:
        assert validate_sample(s) == []


def test_make_sample_valid():
    assert validate_sample(make_sample()) == []
