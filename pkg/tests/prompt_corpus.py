"""Shared fixture corpus of synthetic preference completions."""

from coalitions.preferences import Verdict


def completion_corpus() -> list[tuple[str, Verdict]]:
    """Fifty well-formed completions covering case/whitespace/format variants."""
    cases = []
    verdicts = [
        ("CURRENT", Verdict.PREFER_CURRENT),
        ("CANDIDATE", Verdict.PREFER_CANDIDATE),
        ("INDIFFERENT", Verdict.INDIFFERENT),
    ]
    preambles = [
        "Step 1: members listed.\nStep 5 follows.\n",
        "## Step 5: Final Preference\n",
        "After weighing coverage against cost...\n\n",
        "I prefer: [CURRENT / CANDIDATE / INDIFFERENT]\nMy answer:\n",  # echoed menu
        "",
    ]
    formats = [
        "I prefer: {v}",
        "I prefer:{v}",
        "i prefer : {v}",
        "I PREFER: [{v}]",
        "I prefer:   {v}  ",
    ]
    confidences = ["\nConfidence: high", "\nconfidence: [medium]", "\nConfidence:low", ""]
    i = 0
    while len(cases) < 50:
        verdict_name, verdict = verdicts[i % 3]
        pre = preambles[i % 5]
        fmt = formats[(i // 3) % 5]
        conf = confidences[(i // 15) % 4]
        text = pre + fmt.format(v=verdict_name if i % 2 else verdict_name.lower()) + conf
        cases.append((text, verdict))
        i += 1
    return cases
