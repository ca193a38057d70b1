"""Character error rate with explicit substitution/deletion/insertion
counts, plus the line-delimited evaluation report format."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

__all__ = ["CerReport", "cer", "write_eval_report", "read_eval_report"]


@dataclass(frozen=True)
class CerReport:
    """Edit operation counts from reference to hypothesis and their rate."""

    substitutions: int
    deletions: int
    insertions: int
    ref_len: int
    cer: float


def cer(reference, hypothesis) -> CerReport:
    """Minimum-edit-distance error rate (S + D + I) / N with deterministic
    tie-breaking: substitution is preferred over a delete+insert pair, and
    deletion over insertion.

    The rate is not clamped, so hypotheses much longer than the reference
    can exceed 1. An empty reference is an error.
    """
    ref = list(reference)
    hyp = list(hypothesis)
    n, h = len(ref), len(hyp)
    if n < 1:
        raise ValueError("reference must be nonempty")

    d = [[0] * (h + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        d[i][0] = i
    for j in range(1, h + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        ri = ref[i - 1]
        for j in range(1, h + 1):
            sub = d[i - 1][j - 1] + (ri != hyp[j - 1])
            dele = d[i - 1][j] + 1
            ins = d[i][j - 1] + 1
            d[i][j] = min(sub, dele, ins)

    subs = dels = inss = 0
    i, j = n, h
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] != hyp[j - 1]:
                subs += 1
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            inss += 1
            j -= 1

    return CerReport(
        substitutions=subs,
        deletions=dels,
        insertions=inss,
        ref_len=n,
        cer=(subs + dels + inss) / n,
    )


def write_eval_report(path, records, summary):
    """One JSON record per utterance followed by a summary record."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({"kind": "utterance", **rec}, ensure_ascii=False))
            fh.write("\n")
        fh.write(json.dumps({"kind": "summary", **summary}, ensure_ascii=False))
        fh.write("\n")


def read_eval_report(path):
    records, summary = [], None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.pop("kind") == "summary":
                summary = rec
            else:
                records.append(rec)
    return records, summary


def report_record(utt_id, activation, reference, hypothesis, report: CerReport,
                  branch_frames=None):
    rec = {
        "id": utt_id,
        "activation": activation,
        "reference": list(reference),
        "hypothesis": list(hypothesis),
        **asdict(report),
    }
    if branch_frames:
        rec["branch_frames"] = branch_frames
    return rec
