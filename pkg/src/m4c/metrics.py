"""Answer metrics: edit distance, ANLS, 10-answer soft VQA accuracy, exact match."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import ValidationError

log = logging.getLogger(__name__)


def normalize_answer(text: str) -> str:
    """Lowercase and collapse whitespace runs to single spaces."""
    return " ".join(text.lower().split())


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def anls_similarity(pred: str, gt: str) -> float:
    pred, gt = normalize_answer(pred), normalize_answer(gt)
    longest = max(len(pred), len(gt))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(pred, gt) / longest


def anls(pred: str, gts, threshold=0.5) -> float:
    """Best normalized similarity over the ground truths, zeroed below ``threshold``."""
    if not gts:
        raise ValidationError("anls needs at least one ground-truth answer")
    best = max(anls_similarity(pred, gt) for gt in gts)
    return best if best >= threshold else 0.0


def vqa_soft_accuracy(pred: str, gts) -> float:
    """Mean over the 10 leave-one-out subsets of ``min(#matches / 3, 1)``."""
    if len(gts) != 10:
        raise ValidationError(f"soft VQA accuracy needs exactly 10 answers, got {len(gts)}")
    p = normalize_answer(pred)
    hits = [normalize_answer(g) == p for g in gts]
    total = Fraction(0)
    for i in range(10):
        matches = sum(hits) - hits[i]
        total += min(Fraction(matches, 3), Fraction(1))
    return float(total / 10)


def exact_match(pred: str, gts) -> float:
    p = normalize_answer(pred)
    return float(any(normalize_answer(g) == p for g in gts))


METRICS = {"anls": anls, "vqa": vqa_soft_accuracy, "exact": exact_match}


def get_metric(name):
    try:
        return METRICS[name]
    except KeyError:
        raise ValidationError(f"unknown metric {name!r}; choose from {sorted(METRICS)}") from None


@dataclass
class EvalReport:
    metric: str
    count: int = 0
    mean: float = 0.0
    missing: int = 0
    scores: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({"metric": self.metric, "count": self.count, "mean": self.mean, "missing": self.missing,
                           "scores": dict(sorted(self.scores.items()))}, indent=1)


def evaluate_set(predictions, scenes, metric="exact") -> EvalReport:
    """Score ``predictions`` (id -> answer string) against each scene's answers.

    A scene without a prediction scores 0 and is counted in ``missing``.
    """
    fn = get_metric(metric)
    report = EvalReport(metric=metric)
    for scene in scenes:
        if scene.id not in predictions:
            log.warning("no prediction for scene %s; scored 0", scene.id)
            report.missing += 1
            report.scores[scene.id] = 0.0
            continue
        report.scores[scene.id] = fn(predictions[scene.id], scene.answers)
    report.count = len(report.scores)
    report.mean = sum(report.scores[k] for k in sorted(report.scores)) / report.count if report.count else 0.0
    return report
