from random import Random

import pytest

from sgqa.errors import ProgramParseError, ProgramTypeError
from sgqa.programs import (
    Answer,
    Degenerate,
    ProgramNode,
    ValueType,
    execute,
    parse_program,
    render_program,
    typecheck,
)

from oracles import execute_naive, random_program

COUNT_CHAIRS = '(count (filter_class (scene) "chair"))'


def test_parse_count_chairs():
    p = parse_program(COUNT_CHAIRS)
    assert p.function == "count"
    assert p.depth() == 3
    inner = p.args[0]
    assert inner.function == "filter_class"
    assert inner.args[1] == "chair"


def test_parse_arity_error_offset():
    text = "(count (scene) (scene))"
    with pytest.raises(ProgramParseError) as err:
        parse_program(text)
    # the surplus argument is reported at its own offset
    assert err.value.offset == text.index("(scene)", text.index("(scene)") + 1)


def test_parse_unknown_function_offset():
    text = '(tally (scene))'
    with pytest.raises(ProgramParseError, match="unknown function 'tally'") as err:
        parse_program(text)
    assert err.value.offset == 1


def test_parse_unbalanced():
    with pytest.raises(ProgramParseError, match="missing '\\)'"):
        parse_program("(count (scene)")


def test_parse_trailing_content():
    with pytest.raises(ProgramParseError, match="trailing"):
        parse_program("(scene) (scene)")


def test_parse_literal_position():
    with pytest.raises(ProgramParseError, match="quoted literal"):
        parse_program('(filter_class (scene) (scene))')
    with pytest.raises(ProgramParseError, match="expression"):
        parse_program('(count "chair")')


def test_parse_bare_atom_requires_slot_mode():
    with pytest.raises(ProgramParseError, match="bare identifier"):
        parse_program("(filter_class (scene) O)")
    p = parse_program("(filter_class (scene) O)", allow_slots=True)
    assert p.args[1].name == "O"


def test_render_parse_roundtrip(taxonomy):
    rng = Random(2024)
    for _ in range(500):
        p = random_program(rng, taxonomy)
        assert parse_program(render_program(p)) == p


def test_typecheck_basic():
    assert typecheck(parse_program('(exist (filter_color (scene) "white"))')) is ValueType.BOOLEAN
    assert typecheck(parse_program(COUNT_CHAIRS)) is ValueType.INTEGER


def test_typecheck_rejects_ref_for_set():
    with pytest.raises(ProgramTypeError, match="count"):
        typecheck(parse_program("(count (unique (scene)))"))


def test_typecheck_random_programs(taxonomy):
    rng = Random(7)
    for _ in range(200):
        p = random_program(rng, taxonomy)
        assert typecheck(p) is not None
        assert p.depth() <= 6


# ---------------------------------------------------------------------------
# execution semantics


def test_count_chairs(chairs_scene):
    # enumeration oracle: the fixture holds exactly ids 1..3 as chairs
    chairs = [n for n in chairs_scene.nodes if n.class_label == "chair"]
    assert len(chairs) == 3
    assert execute(parse_program(COUNT_CHAIRS), chairs_scene) == Answer("integer", 3)


def test_empty_scene(empty_scene):
    assert execute(parse_program("(exist (scene))"), empty_scene) == Answer("boolean", False)
    assert execute(parse_program("(count (scene))"), empty_scene) == Answer("integer", 0)


def test_unique_two_tables_degenerate(two_tables_scene):
    out = execute(parse_program('(query_color (unique (filter_class (scene) "table")))'),
                  two_tables_scene)
    assert out == Degenerate("non-unique-reference")


def test_unique_empty_degenerate(two_tables_scene):
    out = execute(parse_program('(query_color (unique (filter_class (scene) "sofa")))'),
                  two_tables_scene)
    assert out == Degenerate("empty-reference")


def test_missing_attribute_degenerate(two_tables_scene):
    out = execute(parse_program('(query_color (unique (filter_class (scene) "lamp")))'),
                  two_tables_scene)
    assert out == Degenerate("missing-attribute")


def test_relate_empty_is_legal(chairs_scene):
    out = execute(parse_program(
        '(exist (relate (unique (filter_class (scene) "table")) "standing on"))'),
        chairs_scene)
    assert out == Answer("boolean", False)


def test_relate_directions(chairs_scene):
    # table (id 4) has two "left of" in-edges and one "bigger than" out-edge
    n_left = execute(parse_program(
        '(count (relate_inverse (unique (filter_class (scene) "table")) "left of"))'),
        chairs_scene)
    assert n_left == Answer("integer", 2)
    bigger = execute(parse_program(
        '(query_color (unique (relate (unique (filter_class (scene) "table")) "bigger than")))'),
        chairs_scene)
    assert bigger == Answer("attribute", "red")


def test_degenerate_poisons_root(chairs_scene):
    out = execute(parse_program(
        '(equal_integer (count (scene)) (count (relate (unique (scene)) "left of")))'),
        chairs_scene)
    assert out == Degenerate("non-unique-reference")


def test_set_root_rejected():
    with pytest.raises(ValueError, match="answer value"):
        execute(parse_program("(scene)"), None)


def test_execute_unbound_slot_rejected(chairs_scene):
    p = parse_program("(count (filter_class (scene) O))", allow_slots=True)
    with pytest.raises(ValueError, match="unbound slot"):
        execute(p, chairs_scene)


# ---------------------------------------------------------------------------
# properties (seeded randomized checks)


def _random_scenes(taxonomy, count, rng):
    from sgqa.graph import synth_scene

    return [synth_scene(rng.randrange(10 ** 6), rng.randrange(11), taxonomy)
            for _ in range(count)]


def test_oracle_equivalence_sample(taxonomy):
    rng = Random(123)
    scenes = _random_scenes(taxonomy, 40, rng)
    for _ in range(2000):
        g = rng.choice(scenes)
        p = random_program(rng, taxonomy)
        assert execute(p, g) == execute_naive(p, g)


def test_filter_monotonic(taxonomy):
    from sgqa.programs import _eval

    rng = Random(5)
    scenes = _random_scenes(taxonomy, 20, rng)
    filters = ["filter_class", "filter_color", "filter_material", "filter_shape",
               "filter_size"]
    for _ in range(300):
        g = rng.choice(scenes)
        node = ProgramNode("scene")
        prev = _eval(node, g)
        for _ in range(rng.randrange(1, 4)):
            fn = rng.choice(filters)
            kind = "object" if fn == "filter_class" else fn.removeprefix("filter_")
            node = ProgramNode(fn, (node, rng.choice(taxonomy.vocabulary(kind))))
            cur = _eval(node, g)
            assert cur <= prev
            prev = cur


def test_exist_equals_count_positive(taxonomy):
    rng = Random(6)
    scenes = _random_scenes(taxonomy, 20, rng)
    for _ in range(300):
        g = rng.choice(scenes)
        p = random_program(rng, taxonomy)
        if p.function != "exist":
            continue
        # exist(S) == (count(S) > 0); a 0-count comes from an impossible filter
        zero = ProgramNode("count", (ProgramNode("filter_class",
                                                 (ProgramNode("scene"), "__none__")),))
        rewritten = ProgramNode("greater_than", (ProgramNode("count", p.args), zero))
        assert execute(p, g) == execute(rewritten, g)


def test_intersect_union_commutative(taxonomy):
    rng = Random(8)
    scenes = _random_scenes(taxonomy, 20, rng)
    for _ in range(300):
        g = rng.choice(scenes)
        from oracles import _gen_set

        a = _gen_set(rng, taxonomy, 3)
        b = _gen_set(rng, taxonomy, 3)
        for fn in ("intersect", "union"):
            left = ProgramNode("count", (ProgramNode(fn, (a, b)),))
            right = ProgramNode("count", (ProgramNode(fn, (b, a)),))
            assert execute(left, g) == execute(right, g)


def test_execute_pure(taxonomy, chairs_scene):
    rng = Random(9)
    for _ in range(50):
        p = random_program(rng, taxonomy)
        assert execute(p, chairs_scene) == execute(p, chairs_scene)
