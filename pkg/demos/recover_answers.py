"""
Recovering labels from messy replies
====================================

Small models do not always end with the requested answer line. The
calibrator reads the structured field if there is one, otherwise the most
reliable option mention, otherwise the fallback label.
"""

from omniego.calibration import calibrate, canonical_render
from omniego.samples import OptionSet

options = OptionSet.from_texts(["grasper", "hook", "clip applier", "irrigator"])

replies = [
    "FINAL ANSWER: B",
    "After weighing the evidence, the best choice is option (C).",
    "Option A looks plausible, but on closer inspection option D is right.",
    "The surgeon is plainly using the clip applier.",
    "### Final Answer\nB",
    "I cannot tell from these frames.",
    "",
]

for raw in replies:
    p = calibrate(raw, options)
    shown = raw.replace("\n", " / ") or "<empty>"
    print(f"{p.label}  {p.tier.value:<17}  {shown}")

# With recovery off only the structured line counts
print(calibrate("The answer is (C).", options, recovery=False))

# Rendering a prediction and reading it back gives the same label
p = calibrate("I would go with D here.", options)
print(canonical_render(p), "->", calibrate(canonical_render(p)).label)
