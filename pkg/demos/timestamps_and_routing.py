"""
Timestamps, segments and routing
================================

One surgical sample goes through the first two steps of the pipeline: its
frames get exact global timestamps, and its question is routed to a
capability and compiled into a reasoning protocol.
"""

from fractions import Fraction

from omniego.evidence import format_timestamp, segment_evidence
from omniego.router import compile_protocol, route
from omniego.samples import Domain, FrameRef, OptionSet, Sample, SampleMetadata

# Ten frames sampled at 29.97 fps, starting 120 frames into the clip
rate = Fraction(30000, 1001)
frames = tuple(FrameRef(f"clip/{i:04d}.jpg", i, 1920, 1080) for i in range(10))
sample = Sample(
    id="demo-surgery-1",
    frames=frames,
    question="When does the hook first touch the tissue?",
    options=OptionSet.from_texts(["t=4.0 s", "t=4.2 s", "t=4.4 s", "t=4.6 s"]),
    metadata=SampleMetadata(Domain.SURGERY, rate, 120, "demo-surgery-1"),
)

# Cut into segments of four; timestamps stay global
evidence = segment_evidence(sample.frames, sample.metadata, max_per_segment=4)
for seg in evidence.segments:
    stamps = ", ".join(format_timestamp(tf.timestamp) for tf in seg.frames)
    print(f"segment @ frame {seg.segment_offset}: {stamps}")

# The exact value behind the first label
print("first frame at", evidence.frames[0].timestamp, "seconds")

# Route the question and compile the protocol
r = route(sample.question, sample.options, sample.metadata)
protocol = compile_protocol(r.capability, r.basis, sample.question, sample.options)
print(f"capability: {r.capability.value} (rule {r.rule_id})")
print(f"path: {protocol.path_hint.value}, stages: {[s.stage_id.value for s in protocol.stage_specs]}")
print(f"verification rule: {protocol.operator.verification_rule}")

# Counting in an industrial clip goes to the single-call expert path instead
md = SampleMetadata(Domain.INDUSTRY, Fraction(1), 0, "demo-industry-1")
r = route("How many screws are on the tray?", sample.options, md)
print(r.capability.value, "->", compile_protocol(r.capability, r.basis, "", sample.options).path_hint.value)
