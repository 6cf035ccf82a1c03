"""Question families: templated question texts paired with program skeletons.

A family document is a JSON list of entries::

    {"family_id": "count_01",
     "question_type": "count",
     "templates": ["How many <C> <M> <O> are there?"],
     "skeleton": "(count (filter_material (filter_color (filter_class (scene) O) C) M))",
     "slots": [{"name": "C", "kind": "color", "optional": true},
               {"name": "M", "kind": "material", "optional": true},
               {"name": "O", "kind": "object", "optional": false}]}

Skeletons are program text in which bare slot names stand for literals.
Binding a family substitutes slot values into both the chosen template and
the skeleton; an unbound optional slot elides its filter node from the
program and its placeholder (plus one adjacent space) from the text.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .errors import FamilyError, ProgramParseError, ProgramTypeError
from .graph import Taxonomy
from .programs import (
    LITERAL,
    SIGNATURES,
    ProgramNode,
    SlotRef,
    ValueType,
    parse_program,
    render_program,
    typecheck,
)

SLOT_KINDS = ("color", "material", "shape", "size", "relation", "object")

_PLACEHOLDER_RE = re.compile(r"<([A-Za-z][A-Za-z0-9]*)>")


@dataclass(frozen=True)
class SlotSpec:
    name: str
    kind: str
    optional: bool = False


@dataclass(frozen=True)
class QuestionFamily:
    """A parametrized question: paraphrase templates plus a program skeleton."""

    family_id: str
    question_type: str
    templates: tuple[str, ...]
    skeleton: ProgramNode
    slots: tuple[SlotSpec, ...]

    def slot(self, name: str) -> SlotSpec:
        for s in self.slots:
            if s.name == name:
                return s
        raise KeyError(name)


class FamilyRegistry:
    """Validated, immutable collection of question families."""

    def __init__(self, families: Sequence[QuestionFamily], taxonomy: Taxonomy):
        self.families = tuple(families)
        self.taxonomy = taxonomy
        self.by_id = {f.family_id: f for f in self.families}
        self.by_type: dict[str, tuple[QuestionFamily, ...]] = {}
        by_type: dict[str, list[QuestionFamily]] = {}
        for f in self.families:
            by_type.setdefault(f.question_type, []).append(f)
        self.by_type = {k: tuple(v) for k, v in by_type.items()}

    def __len__(self) -> int:
        return len(self.families)

    def __iter__(self):
        return iter(self.families)

    def mean_slot_count(self) -> float:
        if not self.families:
            return 0.0
        return sum(len(f.slots) for f in self.families) / len(self.families)

    def fingerprint(self) -> str:
        blob = json.dumps(
            [
                {
                    "family_id": f.family_id,
                    "question_type": f.question_type,
                    "templates": list(f.templates),
                    "skeleton": render_program(f.skeleton),
                    "slots": [[s.name, s.kind, s.optional] for s in f.slots],
                }
                for f in self.families
            ],
            sort_keys=True,
            separators=(",", ":"),
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _slot_refs(node: ProgramNode) -> list[SlotRef]:
    refs = []
    for arg in node.args:
        if isinstance(arg, SlotRef):
            refs.append(arg)
        elif isinstance(arg, ProgramNode):
            refs.extend(_slot_refs(arg))
    return refs


def _owner_elidable(node: ProgramNode, name: str) -> bool:
    """True if the node holding slot ``name`` can be dropped when unbound.

    The owner must be a two-argument set filter (one set child plus the slot
    literal) so that replacing it with its child keeps the program well typed.
    """
    for arg in node.args:
        if isinstance(arg, SlotRef) and arg.name == name:
            spec, ret = SIGNATURES[node.function]
            return (
                ret is ValueType.OBJECT_SET
                and spec == (ValueType.OBJECT_SET, LITERAL)
                and isinstance(node.args[0], ProgramNode)
            )
        if isinstance(arg, ProgramNode) and _owner_elidable(arg, name):
            return True
    return False


def _validate_family(entry: Mapping, taxonomy: Taxonomy) -> QuestionFamily:
    fid = entry.get("family_id")
    if not isinstance(fid, str) or not fid:
        raise FamilyError("family entry missing 'family_id'")

    def fail(msg: str) -> FamilyError:
        return FamilyError(f"family '{fid}': {msg}")

    qtype = entry.get("question_type")
    if not isinstance(qtype, str) or not qtype:
        raise fail("missing 'question_type'")
    templates = entry.get("templates")
    if not isinstance(templates, list) or not templates or not all(
            isinstance(t, str) and t for t in templates):
        raise fail("'templates' must be a non-empty list of strings")

    slots = []
    names = set()
    for s in entry.get("slots", []):
        name, kind = s.get("name"), s.get("kind")
        if not isinstance(name, str) or not name:
            raise fail("slot missing 'name'")
        if name in names:
            raise fail(f"duplicate slot name '{name}'")
        names.add(name)
        if kind not in SLOT_KINDS:
            raise fail(f"slot '{name}' has unknown kind '{kind}'")
        if not taxonomy.vocabulary(kind):
            raise fail(f"slot '{name}' uses empty vocabulary '{kind}'")
        slots.append(SlotSpec(name, kind, bool(s.get("optional", False))))

    for template in templates:
        for placeholder in _PLACEHOLDER_RE.findall(template):
            if placeholder not in names:
                raise fail(f"template references undeclared slot '{placeholder}'")

    try:
        skeleton = parse_program(entry.get("skeleton", ""), allow_slots=True)
    except ProgramParseError as exc:
        raise fail(f"skeleton does not parse: {exc}") from None
    refs = _slot_refs(skeleton)
    for ref in refs:
        if ref.name not in names:
            raise fail(f"skeleton references undeclared slot '{ref.name}'")
    try:
        typecheck(skeleton)
    except ProgramTypeError as exc:
        raise fail(f"skeleton does not typecheck: {exc}") from None

    ref_names = [r.name for r in refs]
    for slot in slots:
        if slot.optional:
            if ref_names.count(slot.name) != 1:
                raise fail(f"optional slot '{slot.name}' must appear exactly once in the skeleton")
            if not _owner_elidable(skeleton, slot.name):
                raise fail(f"optional slot '{slot.name}' sits in a position that cannot be elided")

    return QuestionFamily(fid, qtype, tuple(templates), skeleton, tuple(slots))


def load_families(document: str | bytes | Path | Sequence, taxonomy: Taxonomy) -> FamilyRegistry:
    """Load and validate a family document (path, JSON text, or a list)."""
    if isinstance(document, Path) or (
            isinstance(document, str) and "\n" not in document
            and not document.lstrip().startswith("[")):
        with open(document, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    elif isinstance(document, (str, bytes)):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise FamilyError(f"malformed family document: {exc}") from None
    else:
        doc = document
    if not isinstance(doc, list):
        raise FamilyError("family document must be a JSON list")

    families = []
    seen = set()
    for entry in doc:
        if not isinstance(entry, Mapping):
            raise FamilyError("family entries must be JSON objects")
        family = _validate_family(entry, taxonomy)
        if family.family_id in seen:
            raise FamilyError(f"duplicate family_id '{family.family_id}'")
        seen.add(family.family_id)
        families.append(family)
    return FamilyRegistry(families, taxonomy)


_ELIDE = object()


def _substitute(node: ProgramNode, binding: Mapping[str, str]) -> ProgramNode:
    new_args: list = []
    for arg in node.args:
        if isinstance(arg, ProgramNode):
            new_args.append(_substitute(arg, binding))
        elif isinstance(arg, SlotRef):
            new_args.append(binding.get(arg.name, _ELIDE))
        else:
            new_args.append(arg)
    if _ELIDE in new_args:
        # Unbound optional slot: drop this filter node, keep its set child.
        for arg in new_args:
            if isinstance(arg, ProgramNode):
                return arg
        raise FamilyError(f"cannot elide node '{node.function}' with no child expression")
    return ProgramNode(node.function, tuple(new_args))


def instantiate(
    family: QuestionFamily,
    binding: Mapping[str, str],
    template_index: int = 0,
) -> tuple[str, ProgramNode]:
    """Bind slot values into one template text and the program skeleton.

    Returns the rendered question and the bound program.  Unbound optional
    slots are elided from both; an unbound required slot is an error.
    """
    for name in binding:
        try:
            family.slot(name)
        except KeyError:
            raise FamilyError(
                f"family '{family.family_id}': binding names unknown slot '{name}'") from None
    for slot in family.slots:
        if not slot.optional and slot.name not in binding:
            raise FamilyError(
                f"family '{family.family_id}': required slot '{slot.name}' unbound")

    text = family.templates[template_index]
    for slot in family.slots:
        placeholder = f"<{slot.name}>"
        if slot.name in binding:
            text = text.replace(placeholder, binding[slot.name])
        elif placeholder + " " in text:
            text = text.replace(placeholder + " ", "", 1)
        elif " " + placeholder in text:
            text = text.replace(" " + placeholder, "", 1)
        else:
            text = text.replace(placeholder, "", 1)
    if "<" in text or ">" in text:
        raise FamilyError(
            f"family '{family.family_id}': unresolved placeholder in rendered text {text!r}")

    program = _substitute(family.skeleton, binding)
    return text, program
