"""
Checking every option
=====================

The verification stage answers in a fixed block format, one block per option.
Here a reply is parsed and the surviving option is picked.
"""

from omniego.verifier import parse_verification, select_candidate

reply = """
[OPTION A]
SUPPORT: yes
GRANULARITY: yes
TEMPORAL: yes
CONTRADICTION: no
EVIDENCE: t=03.00 s
ASSUMPTIONS: the tool stays in the left hand off-screen
RATIONALE: the grasper is visible early on

[OPTION B]
SUPPORT: yes
GRANULARITY: yes
TEMPORAL: yes
CONTRADICTION: no
EVIDENCE: t=03.00 s; t=03.50 s; t=04.00 s
ASSUMPTIONS: none
RATIONALE: the hook is in contact across three frames

[OPTION C]
SUPPORT: no
GRANULARITY: yes
TEMPORAL: yes
CONTRADICTION: yes
EVIDENCE: none
ASSUMPTIONS: none
RATIONALE: no clip applier appears

[OPTION D]
SUPPORT: no
GRANULARITY: no
TEMPORAL: yes
CONTRADICTION: no
EVIDENCE: none
ASSUMPTIONS: none
RATIONALE: irrigation happens later

FINAL ANSWER: B
"""

records = parse_verification(reply)
for r in records:
    print(f"{r.label}: pass={r.verdict} support={r.support_count} assumptions={r.assumption_count}")

# A and B both pass; B cites more evidence
outcome = select_candidate(records)
print("chosen:", outcome.chosen, f"({outcome.reason.value})")
