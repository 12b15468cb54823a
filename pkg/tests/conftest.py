from __future__ import annotations

import random
import re
import threading
import time
from fractions import Fraction

import pytest

from omniego.backend import ChatResponse
from omniego.samples import LABELS, Domain, FrameRef, OptionSet, Sample, SampleMetadata

QUESTION_RE = re.compile(r"^QUESTION: (.+)$", re.MULTILINE)

# question stems that route to each capability under the shipped rule table
STEMS = [
    "Which instrument is held in the left hand",
    "How many screws are on the tray",
    "When does the dog start sniffing the ball",
    "What will the rider do next",
    "Where is the wrench relative to the box",
    "Which object is not visible in the clip",
]
DOMAINS = [Domain.ANIMAL, Domain.XSPORTS, Domain.INDUSTRY, Domain.SURGERY]


def make_sample(
    sid: str = "s0",
    *,
    domain: Domain = Domain.SURGERY,
    question: str = "Which instrument is the surgeon holding?",
    options=("grasper", "hook", "scissors", "clipper"),
    gold: str | None = "B",
    n_frames: int = 4,
    rate=1,
    offset: int = 0,
    dims: tuple[int, int] | None = (1920, 1080),
) -> Sample:
    w, h = dims if dims else (None, None)
    frames = tuple(FrameRef(f"frames/{sid}/{i:03d}.jpg", i, w, h) for i in range(n_frames))
    return Sample(
        id=sid,
        frames=frames,
        question=question,
        options=OptionSet.from_texts(options),
        metadata=SampleMetadata(domain, Fraction(rate), offset, sid),
        gold_label=gold,
    )


def synthetic_dataset(n: int, *, seed: int = 0, with_gold: bool = True) -> list[Sample]:
    import random

    rng = random.Random(seed)
    out = []
    for i in range(n):
        stem = STEMS[i % len(STEMS)]
        out.append(
            make_sample(
                f"syn-{i:04d}",
                domain=DOMAINS[i % len(DOMAINS)],
                question=f"{stem} (case {i})?",
                options=(f"alpha {i}", f"bravo {i}", f"charlie {i}", f"delta {i}"),
                gold=rng.choice(LABELS) if with_gold else None,
                n_frames=rng.randint(1, 40),
                rate=rng.choice([1, 2, 5, 30]),
                offset=rng.randint(0, 100),
            )
        )
    return out


def question_of(req) -> str:
    m = QUESTION_RE.search(req.rendered_text())
    assert m, "every stage prompt carries the question"
    return m.group(1)


def oracle_responder(samples):
    gold = {s.question: s.gold_label for s in samples}

    def reply(req):
        return f"Looking at the frames.\nFINAL ANSWER: {gold[question_of(req)]}"

    return reply


PROSE = [
    "After weighing the evidence, the best choice is option ({L}).",
    "The answer is {L}.",
    "I would go with {L} here because it matches the frames.",
    "Considering everything, option {L} fits best.",
]


def prose_responder(samples):
    gold = {s.question: (i, s.gold_label) for i, s in enumerate(samples)}

    def reply(req):
        i, lbl = gold[question_of(req)]
        return PROSE[i % len(PROSE)].format(L=lbl)

    return reply


@pytest.fixture
def sample():
    return make_sample()


def write_oracle_script(samples, path, *, prose: bool = False):
    """Script file whose rules answer each sample's question with its gold label."""
    import json

    rules = []
    for i, s in enumerate(samples):
        reply = PROSE[i % len(PROSE)].format(L=s.gold_label) if prose else f"FINAL ANSWER: {s.gold_label}"
        rules.append({"pattern": "(?m)^QUESTION: " + re.escape(s.question) + "$", "reply": reply})
    path.write_text(json.dumps({"rules": rules}), encoding="utf-8")
    return path


class CountingBackend:
    """Scripted oracle that counts calls per sample question and can stall."""

    model_id = "counting"

    def __init__(self, samples, interrupt_on=None, jitter=False):
        self.reply = oracle_responder(samples)
        self.counts = {}
        self.interrupt_on = interrupt_on
        self.jitter = jitter
        self.lock = threading.Lock()
        self.in_flight = self.max_in_flight = 0

    def complete(self, req):
        q = question_of(req)
        with self.lock:
            self.counts[q] = self.counts.get(q, 0) + 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
        try:
            if self.interrupt_on is not None and self.interrupt_on in q:
                raise KeyboardInterrupt
            if self.jitter:
                time.sleep(random.random() / 200)
            return ChatResponse(self.reply(req))
        finally:
            with self.lock:
                self.in_flight -= 1


# -- acceptance reporting -------------------------------------------------

_CRITERIA: list[tuple[int, str, bool, float]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _CRITERIA.append((marker.args[0], marker.args[1], rep.passed, rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, duration in sorted(_CRITERIA):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {number}. {title}  ({duration:.2f}s)")
