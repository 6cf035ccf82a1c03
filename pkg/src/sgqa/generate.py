"""Question sampling pipeline: per-scene synthesis with degeneracy
rejection, per-family answer flattening, global balancing, and scene splits.

Generation is deterministic for a fixed (scenes, registry, config) triple
regardless of thread count: every scene draws its candidates from an RNG
stream derived from (seed, scene_id), and the shared per-family answer
histogram is applied while merging scene results in ascending scene_id
order.

The flattening rule keeps every family's answer histogram flat by
construction: an answer's count may grow only while it stays within
``flatness_cap`` times the family's smallest admitted answer count (and
within ``flatness_slack`` of it in absolute terms, so mature families
converge toward uniform), and an unseen answer is admitted only while no
count exceeds the cap, which fixes the answer pool early, before any
answer can pull ahead.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from random import Random
from typing import Iterable, Mapping, Sequence

from . import __version__
from .errors import SgqaError, SplitError
from .families import FamilyRegistry, QuestionFamily, instantiate
from .graph import SceneGraph
from .programs import Answer, Degenerate, execute, parse_program, render_program

# Probability that an optional slot receives a value at all.
OPTIONAL_SLOT_PROB = 0.5

# Share of candidates whose slot values are anchored on actual scene
# content rather than drawn uniformly from the vocabularies.  Without
# grounding, conjunctive questions almost never hit their positive case
# and family supports collapse to the majority answer.
GROUNDED_PROB = 0.5

# Within a grounded draw, each slot still escapes to a vocabulary draw
# with this probability, so partially-grounded conjunctions occur too.
GROUNDED_SLOT_ESCAPE = 0.25

# The flatness guarantee is advertised for families holding at least
# SCOPE_MULTIPLIER x support records; a new answer is admitted only while
# the family can climb back under the cap before reaching that size.
FLATNESS_SCOPE_MULTIPLIER = 20


@dataclass(frozen=True)
class QARecord:
    """One generated sample; re-executing ``program`` on the named scene
    must reproduce ``answer`` exactly."""

    scene_id: str
    question: str
    program: str
    answer: Answer
    question_type: str
    family_id: str
    binding: Mapping[str, str]

    def to_json_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "question": self.question,
            "program": self.program,
            "answer": self.answer.to_json_dict(),
            "question_type": self.question_type,
            "family_id": self.family_id,
            "binding": dict(self.binding),
        }

    @staticmethod
    def from_json_dict(doc: Mapping) -> "QARecord":
        return QARecord(
            scene_id=doc["scene_id"],
            question=doc["question"],
            program=doc["program"],
            answer=Answer.from_json_dict(doc["answer"]),
            question_type=doc["question_type"],
            family_id=doc["family_id"],
            binding=dict(doc["binding"]),
        )


@dataclass
class GenerationConfig:
    """Knobs for the sampling pipeline.

    ``per_scene_target`` counts non-degenerate candidates drawn per scene;
    the attempt budget is ``max_attempts_per_question`` times the target.
    ``flatness_cap`` bounds the max/min answer-count ratio within each
    family (None disables flattening); ``flatness_slack`` is the absolute
    head start an answer may hold over the family minimum once counts are
    large.  Integer answers above ``count_cap`` are rejected outright to
    keep count supports finite.  ``balance_threshold`` drops every answer
    rarer than the threshold after generation (at full production scale the
    customary value is 100; the default suits desk-scale corpora).
    """

    seed: int = 0
    per_scene_target: int = 50
    max_attempts_per_question: int = 100
    flatness_cap: float | None = 2.0
    flatness_slack: int = 5
    balance_threshold: int = 20
    count_cap: int = 10
    family_weights: Mapping[str, float] | None = None
    balance_per_family: bool = False

    def validate(self) -> None:
        if self.per_scene_target <= 0 or self.max_attempts_per_question <= 0:
            raise SgqaError("per_scene_target and max_attempts_per_question must be positive")
        if self.flatness_cap is not None and self.flatness_cap < 1.0:
            raise SgqaError("flatness_cap must be >= 1 (or None to disable)")
        if self.flatness_slack < 1:
            raise SgqaError("flatness_slack must be >= 1")
        if self.balance_threshold < 0:
            raise SgqaError("balance_threshold must be >= 0")
        if self.count_cap < 0:
            raise SgqaError("count_cap must be >= 0")

    def canonical_dict(self) -> dict:
        return {
            "seed": self.seed,
            "per_scene_target": self.per_scene_target,
            "max_attempts_per_question": self.max_attempts_per_question,
            "flatness_cap": self.flatness_cap,
            "flatness_slack": self.flatness_slack,
            "balance_threshold": self.balance_threshold,
            "count_cap": self.count_cap,
            "family_weights": dict(self.family_weights) if self.family_weights else None,
            "balance_per_family": self.balance_per_family,
        }


class AnswerHistogram:
    """Running (family_id, answer) counts for emitted records."""

    def __init__(self) -> None:
        self._counts: dict[str, dict[str, int]] = {}

    def record(self, family_id: str, answer_key: str) -> None:
        fam = self._counts.setdefault(family_id, {})
        fam[answer_key] = fam.get(answer_key, 0) + 1

    def family_counts(self, family_id: str) -> Mapping[str, int]:
        return self._counts.get(family_id, {})

    def families(self) -> list[str]:
        return sorted(self._counts)

    def total(self, family_id: str) -> int:
        return sum(self._counts.get(family_id, {}).values())

    def support(self, family_id: str) -> int:
        return len(self._counts.get(family_id, {}))

    def grand_total(self) -> int:
        return sum(self.total(fid) for fid in self._counts)


def _flatness_accepts(counts: Mapping[str, int], answer_key: str,
                      cap: float | None, slack: int) -> bool:
    if cap is None:
        return True
    current = counts.get(answer_key, 0)
    if current == 0:
        if not counts:
            return True
        # A newcomer enters at count 1 and must climb to max/cap before the
        # ratio bound holds again; only its tier can grow meanwhile.  Admit
        # it only if that repair fits before the family reaches the size at
        # which the flatness guarantee is advertised.
        n = sum(counts.values())
        k = len(counts)
        repair = k * math.ceil(max(counts.values()) / cap)
        return n + 1 + repair <= FLATNESS_SCOPE_MULTIPLIER * (k + 1)
    cmin = min(counts.values())
    return current + 1 <= min(cap * cmin, cmin + slack)


@dataclass
class GenerationSummary:
    emitted: int = 0
    rejected_degenerate: int = 0
    rejected_flatness: int = 0
    removed_by_balance: int = 0

    def to_json_dict(self) -> dict:
        return {
            "emitted": self.emitted,
            "rejected_degenerate": self.rejected_degenerate,
            "rejected_flatness": self.rejected_flatness,
            "removed_by_balance": self.removed_by_balance,
        }


@dataclass(frozen=True)
class _Candidate:
    family_id: str
    question_type: str
    question: str
    program_text: str
    answer: Answer
    binding: Mapping[str, str]


@dataclass
class SceneResult:
    scene_id: str
    candidates: list[_Candidate] = field(default_factory=list)
    attempts: int = 0
    rejected_degenerate: int = 0
    rejected_count_cap: int = 0


def scene_rng(seed: int, scene_id: str) -> Random:
    """Deterministic per-scene RNG stream derived from (seed, scene_id)."""
    digest = hashlib.sha256(f"{seed}|{scene_id}".encode("utf-8")).digest()
    return Random(int.from_bytes(digest[:8], "big"))


def _uses_forward_relate(family: QuestionFamily) -> bool:
    def walk(node) -> bool:
        if node.function == "relate":
            return True
        return any(walk(a) for a in node.args if not isinstance(a, str)
                   and hasattr(a, "function"))

    return walk(family.skeleton)


def _draw_binding(family: QuestionFamily, graph: SceneGraph, vocabs: Mapping,
                  forward_relate: bool, rng: Random) -> dict[str, str]:
    """Sample one binding: vocabulary-uniform or anchored on scene content.

    A grounded draw picks anchor objects (and, for relation slots, an actual
    edge) and reads slot values off them.  Slot names ending in "2" refer to
    the reference side of a relation chain and ground to the anchor at that
    end of the edge; all other slots ground to the opposite anchor.
    """
    grounded = graph.nodes and rng.random() < GROUNDED_PROB
    anchor1 = anchor2 = None
    relation = None
    if grounded:
        has_relation_slot = any(s.kind == "relation" for s in family.slots)
        if has_relation_slot and graph.edges:
            edge = rng.choice(graph.edges)
            relation = edge.predicate
            subject = graph.node(edge.subject_id)
            obj = graph.node(edge.object_id)
            # relate_inverse chains make the "2" side the edge object;
            # forward relate chains make it the edge subject.
            anchor2, anchor1 = (subject, obj) if forward_relate else (obj, subject)
        else:
            anchor1 = rng.choice(graph.nodes)
            anchor2 = rng.choice(graph.nodes)
        if family.question_type in ("greater_than", "less_than") and rng.random() < 0.5:
            # Anchoring guarantees presence on side 1, which would make one
            # inequality direction nearly impossible; swap sides half the
            # time so both answers occur.
            anchor1, anchor2 = anchor2, anchor1

    binding: dict[str, str] = {}
    for slot in family.slots:
        if slot.optional and rng.random() >= OPTIONAL_SLOT_PROB:
            continue
        value = None
        if grounded and rng.random() >= GROUNDED_SLOT_ESCAPE:
            anchor = anchor2 if slot.name.endswith("2") else anchor1
            if slot.kind == "relation":
                value = relation
            elif slot.kind == "object":
                value = anchor.class_label
            else:
                value = anchor.attributes.get(slot.kind)
        if value is None:
            value = rng.choice(vocabs[slot.kind])
        binding[slot.name] = value
    return binding


def generate_for_scene(
    graph: SceneGraph,
    registry: FamilyRegistry,
    config: GenerationConfig,
    rng: Random | None = None,
) -> SceneResult:
    """Draw non-degenerate question candidates for one scene.

    Loops {pick a family (weighted), bind slots uniformly from the
    vocabularies, instantiate, execute} until ``per_scene_target``
    candidates are collected or the attempt budget runs out.  Flattening
    against the shared histogram happens later, at the deterministic merge.
    """
    if rng is None:
        rng = scene_rng(config.seed, graph.scene_id)
    result = SceneResult(scene_id=graph.scene_id)
    families = registry.families
    if not families:
        return result
    weights = None
    if config.family_weights:
        weights = [float(config.family_weights.get(f.family_id, 1.0)) for f in families]
    vocabs = {kind: registry.taxonomy.vocabulary(kind)
              for kind in ("color", "material", "shape", "size", "relation", "object")}
    forward = {f.family_id: _uses_forward_relate(f) for f in families}

    target = config.per_scene_target
    budget = config.max_attempts_per_question * target
    while len(result.candidates) < target and result.attempts < budget:
        result.attempts += 1
        family = rng.choices(families, weights=weights, k=1)[0]
        binding = _draw_binding(family, graph, vocabs, forward[family.family_id], rng)
        template_index = rng.randrange(len(family.templates))
        question, program = instantiate(family, binding, template_index)
        outcome = execute(program, graph)
        if isinstance(outcome, Degenerate):
            result.rejected_degenerate += 1
            continue
        if outcome.kind == "integer" and outcome.value > config.count_cap:
            result.rejected_count_cap += 1
            continue
        result.candidates.append(_Candidate(
            family_id=family.family_id,
            question_type=family.question_type,
            question=question,
            program_text=render_program(program),
            answer=outcome,
            binding=binding,
        ))
    return result


@dataclass
class GenerationResult:
    records: list[QARecord]
    emitted_records: list[QARecord]
    summary: GenerationSummary
    histogram: AnswerHistogram


def generate_dataset(
    scenes: Sequence[SceneGraph],
    registry: FamilyRegistry,
    config: GenerationConfig,
    threads: int = 1,
) -> GenerationResult:
    """Run the full pipeline over a scene collection.

    Scene candidate generation runs in parallel; flattening decisions are
    applied while merging scenes in ascending scene_id order, so the output
    is byte-identical for any thread count.  ``records`` is the balanced
    dataset, sorted by (scene_id, family_id, intra-scene acceptance index);
    ``emitted_records`` is the pre-balance corpus matching ``histogram``.
    """
    config.validate()
    ids = [g.scene_id for g in scenes]
    if len(set(ids)) != len(ids):
        raise SgqaError("duplicate scene_id in scene collection")

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(
                lambda g: generate_for_scene(g, registry, config), scenes))
    else:
        results = [generate_for_scene(g, registry, config) for g in scenes]
    by_scene = {r.scene_id: r for r in results}

    summary = GenerationSummary()
    hist = AnswerHistogram()
    emitted: list[QARecord] = []
    for scene_id in sorted(by_scene):
        res = by_scene[scene_id]
        summary.rejected_degenerate += res.rejected_degenerate
        summary.rejected_flatness += res.rejected_count_cap
        accepted: list[QARecord] = []
        for cand in res.candidates:
            key = cand.answer.key()
            counts = hist.family_counts(cand.family_id)
            if not _flatness_accepts(counts, key, config.flatness_cap, config.flatness_slack):
                summary.rejected_flatness += 1
                continue
            hist.record(cand.family_id, key)
            accepted.append(QARecord(
                scene_id=scene_id,
                question=cand.question,
                program=cand.program_text,
                answer=cand.answer,
                question_type=cand.question_type,
                family_id=cand.family_id,
                binding=cand.binding,
            ))
        accepted.sort(key=lambda r: r.family_id)  # stable: keeps acceptance order
        emitted.extend(accepted)

    summary.emitted = len(emitted)
    balanced = balance(emitted, config.balance_threshold, per_family=config.balance_per_family)
    summary.removed_by_balance = len(emitted) - len(balanced)
    return GenerationResult(records=balanced, emitted_records=emitted,
                            summary=summary, histogram=hist)


# ---------------------------------------------------------------------------
# Post-processing


@dataclass(frozen=True)
class FlatnessReport:
    family_id: str
    support: int
    total: int
    max_count: int
    min_count: int
    ratio: float
    normalized_entropy: float


def flatten_check(hist: AnswerHistogram, family_id: str) -> FlatnessReport:
    """Max/min nonzero answer-frequency ratio and normalized entropy."""
    counts = hist.family_counts(family_id)
    if not counts:
        raise SgqaError(f"unknown family '{family_id}' (no emitted answers)")
    values = list(counts.values())
    total = sum(values)
    max_count, min_count = max(values), min(values)
    if len(values) == 1:
        entropy = 1.0
    else:
        probs = [v / total for v in values]
        entropy = -sum(p * math.log(p) for p in probs) / math.log(len(values))
    return FlatnessReport(
        family_id=family_id,
        support=len(values),
        total=total,
        max_count=max_count,
        min_count=min_count,
        ratio=max_count / min_count,
        normalized_entropy=entropy,
    )


def balance(records: Sequence[QARecord], threshold: int,
            per_family: bool = False) -> list[QARecord]:
    """Drop every record whose answer is rarer than ``threshold``.

    Counting is global over the record list by default; with ``per_family``
    the cut applies within each family independently.  Surviving records
    keep their order.
    """
    if threshold <= 0:
        return list(records)
    counts: dict = {}
    for r in records:
        key = (r.family_id, r.answer.key()) if per_family else r.answer.key()
        counts[key] = counts.get(key, 0) + 1
    kept = []
    for r in records:
        key = (r.family_id, r.answer.key()) if per_family else r.answer.key()
        if counts[key] >= threshold:
            kept.append(r)
    return kept


def split(records: Sequence[QARecord],
          scene_split: Mapping[str, str]) -> tuple[list[QARecord], list[QARecord]]:
    """Partition records by scene according to a scene_id -> train/test map."""
    train: list[QARecord] = []
    test: list[QARecord] = []
    for r in records:
        side = scene_split.get(r.scene_id)
        if side is None:
            raise SplitError(f"scene '{r.scene_id}' missing from split map")
        if side == "train":
            train.append(r)
        elif side == "test":
            test.append(r)
        else:
            raise SplitError(f"scene '{r.scene_id}' has invalid split side '{side}'")
    return train, test


# ---------------------------------------------------------------------------
# Files

_JSON_KW = dict(sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def config_digest(config: GenerationConfig, registry: FamilyRegistry) -> str:
    doc = {
        "config": config.canonical_dict(),
        "families": registry.fingerprint(),
        "taxonomy": registry.taxonomy.fingerprint(),
    }
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def write_records(path: str | Path, records: Iterable[QARecord], *,
                  seed: int, digest: str) -> None:
    """Write a record file: one header line, then one record per line."""
    header = {"config_digest": digest, "seed": seed, "tool_version": __version__}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, **_JSON_KW))
        fh.write("\n")
        for r in records:
            fh.write(json.dumps(r.to_json_dict(), **_JSON_KW))
            fh.write("\n")


def read_records(path: str | Path) -> tuple[dict, list[QARecord]]:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.strip():
            raise SgqaError(f"{path}: empty record file")
        header = json.loads(first)
        if not isinstance(header, dict) or "tool_version" not in header:
            raise SgqaError(f"{path}: missing header line")
        records = []
        for line in fh:
            line = line.strip()
            if line:
                records.append(QARecord.from_json_dict(json.loads(line)))
    return header, records


def validate_records(records: Sequence[QARecord],
                     scenes_by_id: Mapping[str, SceneGraph]) -> list[str]:
    """Re-execute every record; return a description of each mismatch.

    Line numbers refer to record files written by write_records (the header
    is line 1, records start at line 2).
    """
    problems = []
    for i, record in enumerate(records):
        line_no = i + 2
        scene = scenes_by_id.get(record.scene_id)
        if scene is None:
            problems.append(f"line {line_no}: unknown scene '{record.scene_id}'")
            continue
        outcome = execute(parse_program(record.program), scene)
        if isinstance(outcome, Degenerate):
            problems.append(
                f"line {line_no}: program is degenerate ({outcome.reason}) on scene "
                f"'{record.scene_id}'")
        elif outcome != record.answer:
            problems.append(
                f"line {line_no}: answer mismatch on scene '{record.scene_id}': "
                f"recorded {record.answer.to_json_dict()}, "
                f"re-executed {outcome.to_json_dict()}")
    return problems
