"""VQA accuracy, pass@k and balanced accuracy."""

from __future__ import annotations

import json
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset_io import SUBSETS, VqaRecord, dump_jsonl_line
from .errors import (
    DuplicatePrediction,
    EmptyClass,
    EmptyClassWarning,
    InvalidArgs,
    RaggedAttempts,
    SchemaViolation,
    UnknownRecordId,
)


@dataclass(frozen=True)
class VqaPrediction:
    record_id: str
    attempt_index: int = 0
    answer_index: int | None = None
    error: str | None = None

    def __post_init__(self):
        if (self.answer_index is None) == (self.error is None):
            raise ValueError("exactly one of answer_index / error must be set")
        if self.attempt_index < 0:
            raise ValueError("attempt_index must be >= 0")

    def to_json(self) -> dict:
        return {"record_id": self.record_id, "attempt": self.attempt_index,
                "answer_index": self.answer_index, "error": self.error}


def load_predictions(path: str | Path) -> list[VqaPrediction]:
    preds = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                preds.append(VqaPrediction(str(d["record_id"]), int(d.get("attempt", 0)),
                                           d.get("answer_index"), d.get("error")))
            except (ValueError, KeyError, TypeError) as exc:
                raise SchemaViolation(str(exc), "$", lineno) from exc
    return preds


def write_predictions(path: str | Path, preds: Iterable[VqaPrediction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(dump_jsonl_line(p.to_json()))


@dataclass
class SubsetScore:
    n: int = 0
    correct: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.n if self.n else 0.0


@dataclass
class EvalReport:
    per_subset: dict[str, SubsetScore] = field(default_factory=dict)
    pass_at_k: dict[int, float] = field(default_factory=dict)
    confusion: list[list[int]] | None = None

    @property
    def n(self) -> int:
        return sum(s.n for s in self.per_subset.values())

    @property
    def correct(self) -> int:
        return sum(s.correct for s in self.per_subset.values())

    @property
    def overall(self) -> float:
        return self.correct / self.n if self.n else 0.0

    def to_json(self) -> dict:
        return {
            "per_subset": {k: {"n": v.n, "correct": v.correct, "accuracy": v.accuracy}
                           for k, v in self.per_subset.items()},
            "overall": {"n": self.n, "correct": self.correct, "accuracy": self.overall},
            "pass_at_k": {str(k): v for k, v in self.pass_at_k.items()},
            "confusion": self.confusion,
        }


def _ordered_subsets(names: Iterable[str]) -> list[str]:
    names = set(names)
    known = [s for s in SUBSETS if s in names]
    return known + sorted(names - set(SUBSETS))


def score_vqa(preds: Sequence[VqaPrediction], gold: Sequence[VqaRecord]) -> EvalReport:
    """Per-subset and pooled accuracy. Errors count as wrong; unpredicted records count as wrong."""
    by_id = {g.record_id: g for g in gold}
    seen: set[str] = set()
    hits: dict[str, bool] = {}
    for p in preds:
        if p.record_id not in by_id:
            raise UnknownRecordId(f"prediction for unknown record {p.record_id!r}")
        if p.record_id in seen:
            raise DuplicatePrediction(f"more than one prediction for {p.record_id!r}")
        seen.add(p.record_id)
        hits[p.record_id] = p.error is None and p.answer_index == by_id[p.record_id].answer_index
    report = EvalReport()
    for name in _ordered_subsets(g.subset for g in gold):
        report.per_subset[name] = SubsetScore()
    for g in gold:
        s = report.per_subset[g.subset]
        s.n += 1
        s.correct += int(hits.get(g.record_id, False))
    return report


def pass_at_k_exact(n: int, c: int, k: int) -> Fraction:
    """``1 - C(n-c, k) / C(n, k)`` as an exact fraction, via the product form."""
    for name, v in (("n", n), ("c", c), ("k", k)):
        if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
            raise InvalidArgs(f"{name} must be an integer")
    if not (0 <= c <= n and 1 <= k <= n):
        raise InvalidArgs(f"need 0 <= c <= n and 1 <= k <= n, got n={n} c={c} k={k}")
    if n - c < k:
        return Fraction(1)
    miss = Fraction(1)
    for i in range(n - c + 1, n + 1):
        miss *= Fraction(i - k, i)
    return 1 - miss


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased pass@k estimate from ``c`` correct out of ``n`` attempts."""
    return float(pass_at_k_exact(n, c, k))


def aggregate_pass_at_k(attempts: Sequence[VqaPrediction], gold: Sequence[VqaRecord],
                        ks: Sequence[int]) -> dict[int, float]:
    by_id = {g.record_id: g for g in gold}
    grouped: dict[str, dict[int, VqaPrediction]] = defaultdict(dict)
    for p in attempts:
        if p.record_id not in by_id:
            raise UnknownRecordId(f"attempt for unknown record {p.record_id!r}")
        if p.attempt_index in grouped[p.record_id]:
            raise DuplicatePrediction(f"{p.record_id!r} attempt {p.attempt_index} repeated")
        grouped[p.record_id][p.attempt_index] = p
    if not grouped:
        raise InvalidArgs("no attempts")
    counts = {len(v) for v in grouped.values()}
    if len(counts) != 1:
        raise RaggedAttempts(f"records have differing attempt counts {sorted(counts)}")
    n = counts.pop()
    for k in ks:
        if not 1 <= k <= n:
            raise InvalidArgs(f"k={k} outside [1, {n}]")
    correct = {
        rid: sum(p.error is None and p.answer_index == by_id[rid].answer_index for p in ps.values())
        for rid, ps in grouped.items()
    }
    out = {}
    for k in ks:
        total = sum((pass_at_k_exact(n, c, k) for c in correct.values()), Fraction(0))
        out[k] = float(total / len(correct))
    return out


def confusion_matrix(preds: Sequence[str], gold: Sequence[str], labels: Sequence[str]) -> list[list[int]]:
    """Rows are gold labels, columns predicted labels; predictions outside ``labels`` are dropped."""
    index = {lab: i for i, lab in enumerate(labels)}
    m = [[0] * len(labels) for _ in labels]
    for p, g in zip(preds, gold):
        if p in index:
            m[index[g]][index[p]] += 1
    return m


def balanced_accuracy(preds: Sequence[str], gold: Sequence[str], labels: Sequence[str]) -> float:
    """Mean per-class recall over the classes present in ``gold``.

    A declared label with no gold samples is excluded with an
    :class:`EmptyClassWarning`.
    """
    if len(preds) != len(gold):
        raise InvalidArgs(f"{len(preds)} predictions for {len(gold)} gold labels")
    labels = list(dict.fromkeys(labels))
    stray = set(gold) - set(labels)
    if stray:
        raise InvalidArgs(f"gold labels not declared: {sorted(map(str, stray))}")
    support = Counter(gold)
    hits = Counter(g for p, g in zip(preds, gold) if p == g)
    present = [lab for lab in labels if support[lab]]
    empty = [lab for lab in labels if not support[lab]]
    if empty:
        warnings.warn(f"classes absent from gold, excluded: {empty}", EmptyClassWarning, stacklevel=2)
    if not present:
        raise EmptyClass("no class has gold samples")
    return sum(hits[lab] / support[lab] for lab in present) / len(present)


# --------------------------------------------------------------------------
# rendering


def render_table(report: EvalReport, subsets: Sequence[str] | None = None, title: str = "") -> str:
    """Plain-text table: one column per subset plus Overall, counts in parentheses, accuracy in %."""
    names = list(subsets) if subsets is not None else list(report.per_subset)
    heads = names + ["Overall"]
    counts = [f"({report.per_subset[s].n if s in report.per_subset else 0})" for s in names]
    counts.append(f"({report.n})")
    accs = [f"{100 * report.per_subset[s].accuracy:.1f}" if s in report.per_subset else "-" for s in names]
    accs.append(f"{100 * report.overall:.1f}")
    label_w = max(len(title), 8)
    widths = [max(len(a), len(b), len(c)) for a, b, c in zip(heads, counts, accs)]

    def row(label: str, cells: list[str]) -> str:
        return " | ".join([label.ljust(label_w)] + [c.rjust(w) for c, w in zip(cells, widths)])

    lines = [row("", heads), row("", counts), "-+-".join(["-" * label_w] + ["-" * w for w in widths]),
             row(title or "accuracy", accs)]
    if report.pass_at_k:
        lines.append("")
        lines.extend(f"pass@{k}: {v:.4f}" for k, v in sorted(report.pass_at_k.items()))
    return "\n".join(lines) + "\n"


def report_from_json(data: Mapping) -> EvalReport:
    rep = EvalReport()
    for name, v in data["per_subset"].items():
        rep.per_subset[name] = SubsetScore(int(v["n"]), int(v["correct"]))
    rep.pass_at_k = {int(k): float(v) for k, v in data.get("pass_at_k", {}).items()}
    rep.confusion = data.get("confusion")
    return rep
