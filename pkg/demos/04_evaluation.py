"""Scoring VQA predictions, pass@k and balanced accuracy."""

from __future__ import annotations

import random
from fractions import Fraction

from pathagent.dataset_io import SUBSETS, VqaRecord
from pathagent.eval_harness import (
    VqaPrediction,
    aggregate_pass_at_k,
    balanced_accuracy,
    pass_at_k_exact,
    render_table,
    score_vqa,
)

# pass@k is computed exactly with rationals, then converted.
print("pass@2 with 4 of 8 correct:", pass_at_k_exact(8, 4, 2), "=", float(pass_at_k_exact(8, 4, 2)))
assert pass_at_k_exact(8, 4, 2) == Fraction(11, 14)

# %% A toy benchmark: 20 records per subset, eight attempts each.
rng = random.Random(0)
gold, attempts = [], []
for subset in SUBSETS:
    skill = rng.uniform(0.4, 0.9)
    for i in range(20):
        rec = VqaRecord(f"{subset}-{i}", "Which finding is present?", ("a", "b", "c", "d"), rng.randrange(4), subset)
        gold.append(rec)
        for a in range(8):
            guess = rec.answer_index if rng.random() < skill else rng.randrange(4)
            attempts.append(VqaPrediction(rec.record_id, a, guess))

report = score_vqa([p for p in attempts if p.attempt_index == 0], gold)
report.pass_at_k = aggregate_pass_at_k(attempts, gold, [1, 2, 4, 8])
print(render_table(report, SUBSETS, title="toy agent"))

# Balanced accuracy is the mean per-class recall, so a classifier that always
# says the majority class scores 1/3 on three classes however skewed they are.
labels = ["LUAD", "LUSC", "normal"]
gold_labels = ["LUAD"] * 80 + ["LUSC"] * 15 + ["normal"] * 5
print("always-LUAD balanced accuracy:", balanced_accuracy(["LUAD"] * 100, gold_labels, labels))
