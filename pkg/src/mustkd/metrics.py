"""Character error rate and the CSV/JSONL result files built from it."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from typing import Mapping, Sequence


@dataclass(frozen=True)
class EditCounts:
    distance: int
    substitutions: int
    deletions: int
    insertions: int


@dataclass(frozen=True)
class CerResult:
    substitutions: int
    deletions: int
    insertions: int
    reference_length: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def cer(self) -> float:
        return self.errors / self.reference_length


def edit_distance(hyp: str, ref: str) -> EditCounts:
    """Unit-cost Levenshtein distance with an S/D/I breakdown.

    Deletions are reference characters missing from the hypothesis and
    insertions are extra hypothesis characters. When several alignments are
    optimal the traceback prefers a match or substitution, then a deletion,
    then an insertion.
    """
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i][j] = min(
                d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]),
                d[i - 1][j] + 1,
                d[i][j - 1] + 1,
            )
    s = dl = ins = 0
    i, j = n, m
    while i or j:
        if i and j and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i and d[i][j] == d[i - 1][j] + 1:
            dl += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(d[n][m], s, dl, ins)


def cer(hyps: Sequence[str], refs: Sequence[str]) -> CerResult:
    """Corpus CER: edits pooled over all utterances divided by pooled reference length."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses for {len(refs)} references")
    total_ref = sum(len(r) for r in refs)
    if total_ref < 1:
        raise ValueError("references contain no characters")
    s = dl = ins = 0
    for h, r in zip(hyps, refs):
        e = edit_distance(h, r)
        s, dl, ins = s + e.substitutions, dl + e.deletions, ins + e.insertions
    return CerResult(s, dl, ins, total_ref)


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.6f}"


def table_csv(
    cells: Mapping[tuple[str, str], float],
    rows: Sequence[str] | None = None,
    columns: Sequence[str] | None = None,
    corner: str = "",
    avg: bool = True,
) -> str:
    """Render ``{(row, column): value}`` as CSV text; missing cells print as ``-``.

    The ``avg`` column is the mean of a row's present cells.
    """
    rows = list(rows) if rows is not None else sorted({r for r, _ in cells})
    columns = list(columns) if columns is not None else sorted({c for _, c in cells})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([corner, *columns, *(["avg"] if avg else [])])
    for r in rows:
        values = [cells.get((r, c)) for c in columns]
        present = [v for v in values if v is not None]
        tail = [_fmt(sum(present) / len(present) if present else None)] if avg else []
        w.writerow([r, *map(_fmt, values), *tail])
    return buf.getvalue()


def emit_report(
    path: str | os.PathLike,
    results: Mapping[tuple[str, str], float],
    rows: Sequence[str] | None = None,
    columns: Sequence[str] | None = None,
) -> None:
    """CER table: one row per strategy, one column per language, plus ``avg``."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(table_csv(results, rows, columns, corner="strategy"))


def emit_accuracy_table(path: str | os.PathLike, accuracies: Mapping[tuple[str, str], float], languages: Sequence[str]) -> None:
    """Mapping accuracies keyed ``(source, target)``; rows are sources, columns targets."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(table_csv(accuracies, languages, languages, corner="source", avg=False))


def write_utterance_log(path: str | os.PathLike, utt_ids: Sequence[str], hyps: Sequence[str], refs: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, h, r in zip(utt_ids, hyps, refs):
            e = edit_distance(h, r)
            rec = {"utt_id": u, "hyp": h, "ref": r, "S": e.substitutions, "D": e.deletions, "I": e.insertions}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
