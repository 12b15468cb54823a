from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from omniego.evidence import (
    DEFAULT_RULE,
    InvalidRate,
    InvalidSegmentSize,
    ReliabilityRule,
    format_timestamp,
    render_observation_rule,
    segment_evidence,
    timestamp_frames,
)
from omniego.samples import Domain, FrameRef, SampleMetadata


def frames(n):
    return [FrameRef(f"f{i}.jpg", i) for i in range(n)]


def meta(rate=1, offset=0):
    return SampleMetadata(Domain.XSPORTS, Fraction(rate), offset, "m")


def pairs(ev):
    return [(tf.frame, tf.timestamp) for tf in ev.frames]


def test_unit_rate():
    assert [t.timestamp for t in timestamp_frames(frames(4), 0, 1)] == [0, 1, 2, 3]


def test_offset_and_rate():
    ts = [t.timestamp for t in timestamp_frames(frames(3), 10, 2)]
    assert ts == [Fraction(5), Fraction(11, 2), Fraction(6)]


def test_empty():
    assert timestamp_frames([], 3, 5) == []


@pytest.mark.parametrize("rate", [0, -1, Fraction(-1, 2)])
def test_invalid_rate(rate):
    with pytest.raises(InvalidRate):
        timestamp_frames(frames(2), 0, rate)


def test_segments_10_by_4():
    ev = segment_evidence(frames(10), meta(), 4)
    assert [len(s.frames) for s in ev.segments] == [4, 4, 2]
    assert [s.segment_offset for s in ev.segments] == [0, 4, 8]
    # oracle: the unsegmented timestamping of the same frames
    assert pairs(ev) == [(t.frame, t.timestamp) for t in timestamp_frames(frames(10), 0, 1)]
    assert [t for _, t in pairs(ev)] == list(range(10))


def test_no_split_needed():
    ev = segment_evidence(frames(3), meta(), 8)
    assert len(ev.segments) == 1
    assert pairs(ev) == [(t.frame, t.timestamp) for t in timestamp_frames(frames(3), 0, 1)]


def test_invalid_segment_size():
    with pytest.raises(InvalidSegmentSize):
        segment_evidence(frames(3), meta(), 0)


def test_segment_offsets_include_sequence_offset():
    ev = segment_evidence(frames(5), meta(rate=2, offset=100), 2)
    assert [s.segment_offset for s in ev.segments] == [100, 102, 104]
    assert ev.frames[0].timestamp == 50


@given(
    st.integers(0, 200),
    st.integers(0, 10_000),
    st.fractions(min_value=Fraction(1, 1000), max_value=1000),
    st.integers(1, 50),
    st.integers(1, 50),
)
def test_resegmentation_invariance_and_exactness(n, offset, rate, m1, m2):
    md = meta(rate, offset)
    a, b = segment_evidence(frames(n), md, m1), segment_evidence(frames(n), md, m2)
    assert pairs(a) == pairs(b)
    assert len(a) == n
    ts = [t for _, t in pairs(a)]
    assert all(x < y for x, y in zip(ts, ts[1:]))
    assert all(t * rate - i - offset == 0 for i, t in enumerate(ts))


def test_format_timestamp():
    assert format_timestamp(Fraction(0)) == "t=00.00 s"
    assert format_timestamp(Fraction(11, 2)) == "t=05.50 s"
    assert format_timestamp(Fraction(1001, 30000)) == "t=00.03 s"
    assert format_timestamp(Fraction(1, 200)) == "t=00.01 s"  # half-up
    assert format_timestamp(Fraction(12345, 10)) == "t=1234.50 s"


def test_observation_rule_text():
    text = render_observation_rule(DEFAULT_RULE)
    for clause in (DEFAULT_RULE.relevance_clause, DEFAULT_RULE.degradation_clause, DEFAULT_RULE.transition_exception):
        assert clause in text
    assert render_observation_rule(DEFAULT_RULE) == text


def test_empty_clause_rejected():
    with pytest.raises(ValueError):
        ReliabilityRule("relevance", "", "exception")
