import json
from pathlib import Path

import pytest

from sgqa.families import load_families
from sgqa.graph import load_scene_graph, load_taxonomy

DATA_DIR = Path(__file__).resolve().parents[1] / "src" / "sgqa" / "data"


@pytest.fixture(scope="session")
def taxonomy():
    return load_taxonomy(DATA_DIR / "taxonomy.json")


@pytest.fixture(scope="session")
def registry(taxonomy):
    return load_families(DATA_DIR / "families.json", taxonomy)


def make_scene(scene_id, objects, relations=()):
    """Build a scene document from (id, class, attrs) triples plus edges."""
    return load_scene_graph({
        "scene_id": scene_id,
        "objects": [
            {
                "id": oid,
                "class": cls,
                "attributes": attrs,
                "center": [float(oid), 0.5 * oid, 0.4],
                "size": [0.5, 0.6, 0.7 + 0.1 * oid],
                "orientation": 0.0,
            }
            for oid, cls, attrs in objects
        ],
        "relations": [list(r) for r in relations],
    })


@pytest.fixture
def chairs_scene():
    """Three chairs and one white table; used across DSL tests."""
    return make_scene(
        "fixture-chairs",
        [
            (1, "chair", {"color": "red", "material": "wooden"}),
            (2, "chair", {"color": "white"}),
            (3, "chair", {"color": "red", "size": "big"}),
            (4, "table", {"color": "white", "material": "wooden", "shape": "round"}),
        ],
        [
            (1, "left of", 4),
            (2, "left of", 4),
            (4, "bigger than", 1),
            (3, "close by", 4),
            (4, "close by", 3),
        ],
    )


@pytest.fixture
def two_tables_scene():
    return make_scene(
        "fixture-tables",
        [
            (1, "table", {"color": "white"}),
            (2, "table", {"color": "brown"}),
            (3, "lamp", {}),
        ],
    )


@pytest.fixture
def empty_scene():
    return make_scene("fixture-empty", [])
