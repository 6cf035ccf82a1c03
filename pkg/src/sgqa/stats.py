"""Dataset statistics and bias auditing via a blind majority baseline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import StatsError
from .generate import QARecord
from .graph import ATTRIBUTE_NAMES, SceneGraph


@dataclass
class StatsReport:
    """Corpus-level statistics over records and their scenes."""

    total_questions: int
    total_scenes: int
    avg_questions_per_scene: float
    avg_question_length: float
    avg_instances_per_scene: float
    vocab_counts: dict[str, int]
    question_type_counts: dict[str, int]
    family_answer_hist: dict[str, dict[str, int]]

    def to_json_dict(self) -> dict:
        return {
            "total_questions": self.total_questions,
            "total_scenes": self.total_scenes,
            "avg_questions_per_scene": self.avg_questions_per_scene,
            "avg_question_length": self.avg_question_length,
            "avg_instances_per_scene": self.avg_instances_per_scene,
            "vocab_counts": dict(self.vocab_counts),
            "question_type_counts": dict(self.question_type_counts),
            "family_answer_hist": {k: dict(v) for k, v in self.family_answer_hist.items()},
        }


def compute_stats(records: Sequence[QARecord], scenes: Sequence[SceneGraph]) -> StatsReport:
    """Aggregate corpus statistics.

    Question length counts whitespace-separated tokens.  ``vocab_counts``
    reports distinct values observed in the scenes: attribute values and
    class labels over nodes, predicates over edges.
    """
    by_id = {g.scene_id: g for g in scenes}
    for r in records:
        if r.scene_id not in by_id:
            raise StatsError(f"record references missing scene '{r.scene_id}'")

    observed: dict[str, set[str]] = {name: set() for name in ATTRIBUTE_NAMES}
    observed["object"] = set()
    observed["relation"] = set()
    total_instances = 0
    for g in scenes:
        total_instances += len(g.nodes)
        for node in g.nodes:
            observed["object"].add(node.class_label)
            for name, value in node.attributes.items():
                observed[name].add(value)
        for edge in g.edges:
            observed["relation"].add(edge.predicate)

    type_counts: dict[str, int] = {}
    family_hist: dict[str, dict[str, int]] = {}
    total_tokens = 0
    for r in records:
        total_tokens += len(r.question.split())
        type_counts[r.question_type] = type_counts.get(r.question_type, 0) + 1
        fam = family_hist.setdefault(r.family_id, {})
        key = r.answer.key()
        fam[key] = fam.get(key, 0) + 1

    n_records = len(records)
    n_scenes = len(scenes)
    return StatsReport(
        total_questions=n_records,
        total_scenes=n_scenes,
        avg_questions_per_scene=n_records / n_scenes if n_scenes else 0.0,
        avg_question_length=total_tokens / n_records if n_records else 0.0,
        avg_instances_per_scene=total_instances / n_scenes if n_scenes else 0.0,
        vocab_counts={k: len(v) for k, v in sorted(observed.items())},
        question_type_counts=dict(sorted(type_counts.items())),
        family_answer_hist={k: dict(sorted(v.items())) for k, v in sorted(family_hist.items())},
    )


@dataclass
class FamilyBaseline:
    family_id: str
    majority_answer: str
    accuracy: float
    test_count: int
    train_count: int
    support: int  # distinct answers seen for the family across both splits


@dataclass
class BaselineReport:
    """Accuracy of the scene-blind majority-answer predictor.

    The predictor maps each family to its most frequent training answer
    (ties broken by the lexicographically smallest answer key); families
    unseen in training fall back to the global majority answer.  High
    per-family accuracy flags question-conditional bias.
    """

    overall_accuracy: float
    per_type_accuracy: dict[str, float]
    per_family: dict[str, FamilyBaseline] = field(default_factory=dict)
    global_majority: str = ""

    def to_json_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "per_type_accuracy": dict(self.per_type_accuracy),
            "global_majority": self.global_majority,
            "per_family": {
                fid: {
                    "majority_answer": fb.majority_answer,
                    "accuracy": fb.accuracy,
                    "test_count": fb.test_count,
                    "train_count": fb.train_count,
                    "support": fb.support,
                }
                for fid, fb in sorted(self.per_family.items())
            },
        }


def _majority(counts: Mapping[str, int]) -> str:
    return min(counts, key=lambda k: (-counts[k], k))


def blind_baseline(train: Sequence[QARecord], test: Sequence[QARecord]) -> BaselineReport:
    """Fit the per-family majority predictor on train, score it on test."""
    if not train or not test:
        raise StatsError("blind_baseline requires non-empty train and test splits")

    train_counts: dict[str, dict[str, int]] = {}
    global_counts: dict[str, int] = {}
    for r in train:
        key = r.answer.key()
        fam = train_counts.setdefault(r.family_id, {})
        fam[key] = fam.get(key, 0) + 1
        global_counts[key] = global_counts.get(key, 0) + 1
    global_majority = _majority(global_counts)
    predictions = {fid: _majority(counts) for fid, counts in train_counts.items()}

    support: dict[str, set[str]] = {}
    for r in list(train) + list(test):
        support.setdefault(r.family_id, set()).add(r.answer.key())

    correct_total = 0
    type_correct: dict[str, int] = {}
    type_total: dict[str, int] = {}
    fam_correct: dict[str, int] = {}
    fam_total: dict[str, int] = {}
    for r in test:
        predicted = predictions.get(r.family_id, global_majority)
        hit = predicted == r.answer.key()
        correct_total += hit
        type_total[r.question_type] = type_total.get(r.question_type, 0) + 1
        type_correct[r.question_type] = type_correct.get(r.question_type, 0) + hit
        fam_total[r.family_id] = fam_total.get(r.family_id, 0) + 1
        fam_correct[r.family_id] = fam_correct.get(r.family_id, 0) + hit

    per_family = {}
    for fid, n in fam_total.items():
        per_family[fid] = FamilyBaseline(
            family_id=fid,
            majority_answer=predictions.get(fid, global_majority),
            accuracy=fam_correct[fid] / n,
            test_count=n,
            train_count=sum(train_counts.get(fid, {}).values()),
            support=len(support.get(fid, set())),
        )

    return BaselineReport(
        overall_accuracy=correct_total / len(test),
        per_type_accuracy={t: type_correct[t] / type_total[t] for t in sorted(type_total)},
        per_family=per_family,
        global_majority=global_majority,
    )
