"""Functional question programs: s-expression parsing, type checking, and
set-semantics evaluation against a scene graph.

Program text grammar::

    expr := "(" fname arg* ")"
    arg  := expr | '"' literal '"'

Function names are lowercase ASCII with underscores; whitespace between
tokens is insignificant.  Evaluation is pure: a program plus a scene graph
always yields the same outcome, and degeneracy (non-unique reference,
empty reference, missing attribute) is a value rather than an error.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Union

from .errors import ProgramParseError, ProgramTypeError
from .graph import SceneGraph


class ValueType(enum.Enum):
    OBJECT_SET = "ObjectSet"
    OBJECT_REF = "ObjectRef"
    INTEGER = "Integer"
    BOOLEAN = "Boolean"
    ATTRIBUTE_VALUE = "AttributeValue"
    CLASS_LABEL = "ClassLabel"


# Marker for a literal (double-quoted string) argument position.
LITERAL = "literal"

_SET = ValueType.OBJECT_SET
_REF = ValueType.OBJECT_REF
_INT = ValueType.INTEGER
_BOOL = ValueType.BOOLEAN
_ATTR = ValueType.ATTRIBUTE_VALUE
_CLASS = ValueType.CLASS_LABEL

# fname -> (argument spec, return type).  A spec entry is either a ValueType
# (an expression of that type) or LITERAL (a quoted string).
SIGNATURES: dict[str, tuple[tuple, ValueType]] = {
    "scene": ((), _SET),
    "filter_class": ((_SET, LITERAL), _SET),
    "filter_color": ((_SET, LITERAL), _SET),
    "filter_material": ((_SET, LITERAL), _SET),
    "filter_shape": ((_SET, LITERAL), _SET),
    "filter_size": ((_SET, LITERAL), _SET),
    "relate": ((_REF, LITERAL), _SET),
    "relate_inverse": ((_REF, LITERAL), _SET),
    "unique": ((_SET,), _REF),
    "count": ((_SET,), _INT),
    "exist": ((_SET,), _BOOL),
    "query_color": ((_REF,), _ATTR),
    "query_material": ((_REF,), _ATTR),
    "query_shape": ((_REF,), _ATTR),
    "query_size": ((_REF,), _ATTR),
    "query_class": ((_REF,), _CLASS),
    "equal_integer": ((_INT, _INT), _BOOL),
    "greater_than": ((_INT, _INT), _BOOL),
    "less_than": ((_INT, _INT), _BOOL),
    "equal_color": ((_ATTR, _ATTR), _BOOL),
    "equal_material": ((_ATTR, _ATTR), _BOOL),
    "equal_shape": ((_ATTR, _ATTR), _BOOL),
    "equal_size": ((_ATTR, _ATTR), _BOOL),
    "intersect": ((_SET, _SET), _SET),
    "union": ((_SET, _SET), _SET),
}

_FILTER_ATTR = {
    "filter_color": "color",
    "filter_material": "material",
    "filter_shape": "shape",
    "filter_size": "size",
}
_QUERY_ATTR = {
    "query_color": "color",
    "query_material": "material",
    "query_shape": "shape",
    "query_size": "size",
}

ANSWER_TYPES = (_INT, _BOOL, _ATTR, _CLASS)


@dataclass(frozen=True)
class SlotRef:
    """A bare identifier in a literal position; used by family skeletons."""

    name: str


Arg = Union["ProgramNode", str, SlotRef]


@dataclass(frozen=True)
class ProgramNode:
    """One node of a question program tree.

    ``args`` holds child nodes plus literal string arguments in call order.
    """

    function: str
    args: tuple[Arg, ...] = ()

    def depth(self) -> int:
        child_depths = [a.depth() for a in self.args if isinstance(a, ProgramNode)]
        return 1 + max(child_depths, default=0)


@dataclass(frozen=True)
class Answer:
    """A concrete ground-truth answer.

    ``kind`` is one of "boolean", "integer", "attribute", "class".
    """

    kind: str
    value: bool | int | str

    def key(self) -> str:
        """Canonical string form used for histogram keys and tie-breaking."""
        if self.kind == "boolean":
            return "yes" if self.value else "no"
        return str(self.value)

    def to_json_dict(self) -> dict:
        return {"type": self.kind, "value": self.value}

    @staticmethod
    def from_json_dict(doc: dict) -> "Answer":
        kind, value = doc["type"], doc["value"]
        if kind == "boolean":
            value = bool(value)
        elif kind == "integer":
            value = int(value)
        return Answer(kind, value)


@dataclass(frozen=True)
class Degenerate:
    """An ill-posed evaluation outcome; poisons the whole program."""

    reason: str  # non-unique-reference | empty-reference | missing-attribute


ExecOutcome = Union[Answer, Degenerate]


# ---------------------------------------------------------------------------
# Parsing


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ch == "(":
            tokens.append(("lparen", "(", i))
            i += 1
        elif ch == ")":
            tokens.append(("rparen", ")", i))
            i += 1
        elif ch == '"':
            end = text.find('"', i + 1)
            if end < 0:
                raise ProgramParseError("unterminated string literal", i)
            tokens.append(("string", text[i + 1:end], i))
            i = end + 1
        elif ch.isalpha() or ch == "_":
            j = i + 1
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(("atom", text[i:j], i))
            i = j
        else:
            raise ProgramParseError(f"unexpected character {ch!r}", i)
    return tokens


class _Parser:
    def __init__(self, tokens: list[tuple[str, str, int]], length: int, allow_slots: bool):
        self.tokens = tokens
        self.pos = 0
        self.length = length
        self.allow_slots = allow_slots

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def expr(self) -> ProgramNode:
        tok = self.peek()
        if tok is None:
            raise ProgramParseError("unbalanced parentheses: expected '('", self.length)
        kind, value, offset = tok
        if kind != "lparen":
            raise ProgramParseError("expected '('", offset)
        self.pos += 1
        head = self.peek()
        if head is None or head[0] != "atom":
            raise ProgramParseError("expected a function name",
                                    head[2] if head else self.length)
        fname, fname_offset = head[1], head[2]
        if fname not in SIGNATURES:
            raise ProgramParseError(f"unknown function '{fname}'", fname_offset)
        self.pos += 1

        args: list[tuple[Arg, int]] = []
        while True:
            tok = self.peek()
            if tok is None:
                raise ProgramParseError("unbalanced parentheses: missing ')'", self.length)
            kind, value, offset = tok
            if kind == "rparen":
                self.pos += 1
                close_offset = offset
                break
            if kind == "lparen":
                start = offset
                args.append((self.expr(), start))
            elif kind == "string":
                args.append((value, offset))
                self.pos += 1
            else:  # bare atom in argument position
                if self.allow_slots:
                    args.append((SlotRef(value), offset))
                    self.pos += 1
                else:
                    raise ProgramParseError(
                        f"bare identifier '{value}' is not a valid argument", offset)

        spec, _ = SIGNATURES[fname]
        if len(args) > len(spec):
            extra_offset = args[len(spec)][1]
            raise ProgramParseError(
                f"'{fname}' expects {len(spec)} argument(s), got {len(args)}", extra_offset)
        if len(args) < len(spec):
            raise ProgramParseError(
                f"'{fname}' expects {len(spec)} argument(s), got {len(args)}", close_offset)
        for (arg, offset), expected in zip(args, spec):
            if expected is LITERAL and isinstance(arg, ProgramNode):
                raise ProgramParseError(
                    f"argument of '{fname}' must be a quoted literal", offset)
            if expected is not LITERAL and not isinstance(arg, ProgramNode):
                raise ProgramParseError(
                    f"argument of '{fname}' must be an expression", offset)
        return ProgramNode(fname, tuple(a for a, _ in args))


def parse_program(text: str, *, allow_slots: bool = False) -> ProgramNode:
    """Parse program text into a tree.

    With ``allow_slots`` bare identifiers are accepted in literal positions
    and returned as SlotRef markers (used by question-family skeletons).
    Errors carry the character offset of the offending token.
    """
    tokens = _tokenize(text)
    parser = _Parser(tokens, len(text), allow_slots)
    node = parser.expr()
    trailing = parser.peek()
    if trailing is not None:
        raise ProgramParseError("trailing content after program", trailing[2])
    return node


def render_program(node: ProgramNode) -> str:
    """Canonical text form; parse_program(render_program(p)) == p."""
    parts = [node.function]
    for arg in node.args:
        if isinstance(arg, ProgramNode):
            parts.append(render_program(arg))
        elif isinstance(arg, SlotRef):
            parts.append(arg.name)
        else:
            parts.append(f'"{arg}"')
    return "(" + " ".join(parts) + ")"


# ---------------------------------------------------------------------------
# Type checking


def typecheck(node: ProgramNode) -> ValueType:
    """Return the program's value type or raise ProgramTypeError.

    Literal positions accept strings and SlotRef placeholders; expression
    positions are checked recursively against the signature table.
    """
    spec, ret = SIGNATURES[node.function]
    if len(node.args) != len(spec):
        raise ProgramTypeError(
            f"'{node.function}' expects {len(spec)} argument(s), got {len(node.args)}")
    for i, (arg, expected) in enumerate(zip(node.args, spec)):
        if expected is LITERAL:
            if isinstance(arg, ProgramNode):
                raise ProgramTypeError(
                    f"argument {i + 1} of '{node.function}' must be a literal")
            continue
        if not isinstance(arg, ProgramNode):
            raise ProgramTypeError(
                f"argument {i + 1} of '{node.function}' must be an expression")
        actual = typecheck(arg)
        if actual is not expected:
            raise ProgramTypeError(
                f"argument {i + 1} of '{node.function}' expects {expected.value}, "
                f"got {actual.value} from '{arg.function}'")
    return ret


def return_type(node: ProgramNode) -> ValueType:
    return SIGNATURES[node.function][1]


# ---------------------------------------------------------------------------
# Evaluation


def _literal(arg: Arg) -> str:
    if isinstance(arg, str):
        return arg
    raise ValueError(f"program contains an unbound slot {arg!r}")


def _eval(node: ProgramNode, g: SceneGraph):
    fn = node.function
    if fn == "scene":
        return g.node_ids

    if fn == "filter_class":
        s = _eval(node.args[0], g)  # type: ignore[arg-type]
        if isinstance(s, Degenerate):
            return s
        want = _literal(node.args[1])
        return frozenset(i for i in s if g.node(i).class_label == want)

    attr = _FILTER_ATTR.get(fn)
    if attr is not None:
        s = _eval(node.args[0], g)  # type: ignore[arg-type]
        if isinstance(s, Degenerate):
            return s
        want = _literal(node.args[1])
        return frozenset(i for i in s if g.node(i).attributes.get(attr) == want)

    if fn in ("relate", "relate_inverse"):
        ref = _eval(node.args[0], g)  # type: ignore[arg-type]
        if isinstance(ref, Degenerate):
            return ref
        predicate = _literal(node.args[1])
        if fn == "relate":
            edges = g.out_edges.get(ref, ())
            return frozenset(e.object_id for e in edges if e.predicate == predicate)
        edges = g.in_edges.get(ref, ())
        return frozenset(e.subject_id for e in edges if e.predicate == predicate)

    if fn == "unique":
        s = _eval(node.args[0], g)  # type: ignore[arg-type]
        if isinstance(s, Degenerate):
            return s
        if len(s) == 0:
            return Degenerate("empty-reference")
        if len(s) > 1:
            return Degenerate("non-unique-reference")
        return next(iter(s))

    if fn == "count":
        s = _eval(node.args[0], g)  # type: ignore[arg-type]
        return s if isinstance(s, Degenerate) else len(s)

    if fn == "exist":
        s = _eval(node.args[0], g)  # type: ignore[arg-type]
        return s if isinstance(s, Degenerate) else len(s) > 0

    attr = _QUERY_ATTR.get(fn)
    if attr is not None:
        ref = _eval(node.args[0], g)  # type: ignore[arg-type]
        if isinstance(ref, Degenerate):
            return ref
        value = g.node(ref).attributes.get(attr)
        if value is None:
            return Degenerate("missing-attribute")
        return value

    if fn == "query_class":
        ref = _eval(node.args[0], g)  # type: ignore[arg-type]
        if isinstance(ref, Degenerate):
            return ref
        return g.node(ref).class_label

    if fn in ("equal_integer", "greater_than", "less_than"):
        a = _eval(node.args[0], g)  # type: ignore[arg-type]
        if isinstance(a, Degenerate):
            return a
        b = _eval(node.args[1], g)  # type: ignore[arg-type]
        if isinstance(b, Degenerate):
            return b
        if fn == "equal_integer":
            return a == b
        if fn == "greater_than":
            return a > b
        return a < b

    if fn in ("equal_color", "equal_material", "equal_shape", "equal_size"):
        a = _eval(node.args[0], g)  # type: ignore[arg-type]
        if isinstance(a, Degenerate):
            return a
        b = _eval(node.args[1], g)  # type: ignore[arg-type]
        if isinstance(b, Degenerate):
            return b
        return a == b

    if fn in ("intersect", "union"):
        a = _eval(node.args[0], g)  # type: ignore[arg-type]
        if isinstance(a, Degenerate):
            return a
        b = _eval(node.args[1], g)  # type: ignore[arg-type]
        if isinstance(b, Degenerate):
            return b
        return a & b if fn == "intersect" else a | b

    raise ValueError(f"unknown function '{fn}'")


def execute(program: ProgramNode, graph: SceneGraph) -> ExecOutcome:
    """Evaluate a well-typed program against a scene graph.

    Arguments are evaluated left to right and the first degenerate subtree
    poisons the whole program.  The root must produce an answer value
    (integer, boolean, attribute, or class); set- or reference-valued roots
    are a usage error.
    """
    ret = return_type(program)
    if ret not in ANSWER_TYPES:
        raise ValueError(
            f"program root '{program.function}' yields {ret.value}, not an answer value")
    value = _eval(program, graph)
    if isinstance(value, Degenerate):
        return value
    if ret is _BOOL:
        return Answer("boolean", bool(value))
    if ret is _INT:
        return Answer("integer", int(value))
    if ret is _ATTR:
        return Answer("attribute", value)
    return Answer("class", value)
