"""Scene-graph data model: typed object nodes, directed predicate edges,
taxonomy normalization, instance partitioning, and seeded synthetic scenes.

Scene documents are JSON objects, one per scene::

    {"scene_id": "scan-001",
     "objects": [{"id": 1, "class": "chair", "attributes": {"color": "red"},
                  "center": [0.0, 1.0, 0.4], "size": [0.5, 0.5, 0.9],
                  "orientation": 0.0}, ...],
     "relations": [[1, "standing on", 2], ...]}

Scene files are UTF-8 JSON lines, one scene document per line.  Taxonomy
documents are single JSON objects::

    {"remap": {"armchair": "chair", ...},
     "objects": [...],
     "attributes": {"color": [...], "material": [...], "shape": [...], "size": [...]},
     "relations": [...],
     "excluded": ["floor", "other"]}
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from random import Random
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import SceneDocumentError, TaxonomyError

ATTRIBUTE_NAMES = ("color", "material", "shape", "size")

# Box ranges used by synth_scene, in meters.
_CENTER_XY = (-3.0, 3.0)
_CENTER_Z = (0.0, 2.2)
_SIZE = (0.2, 2.0)


def _wrap_angle(theta: float) -> float:
    """Wrap a heading angle into [-pi, pi)."""
    return (theta + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class ObjectNode:
    """One object in a scene: class label, sparse attributes, oriented box.

    ``attributes`` maps a subset of ``ATTRIBUTE_NAMES`` to vocabulary values;
    any attribute may be absent.  ``box_size`` is (width, length, height) and
    must be positive componentwise; ``orientation`` is yaw in [-pi, pi).
    """

    id: int
    class_label: str
    attributes: Mapping[str, str]
    box_center: tuple[float, float, float]
    box_size: tuple[float, float, float]
    orientation: float

    def volume(self) -> float:
        w, l, h = self.box_size
        return w * l * h


@dataclass(frozen=True)
class RelationEdge:
    """Directed predicate edge between two distinct objects."""

    subject_id: int
    predicate: str
    object_id: int


@dataclass(frozen=True)
class SceneGraph:
    """Immutable scene: a set of object nodes plus directed relation edges.

    Values are safe to share across threads; all operations in this module
    are pure functions returning new graphs.
    """

    scene_id: str
    nodes: tuple[ObjectNode, ...]
    edges: tuple[RelationEdge, ...]

    @cached_property
    def nodes_by_id(self) -> dict[int, ObjectNode]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def node_ids(self) -> frozenset[int]:
        return frozenset(n.id for n in self.nodes)

    @cached_property
    def out_edges(self) -> dict[int, tuple[RelationEdge, ...]]:
        acc: dict[int, list[RelationEdge]] = {}
        for e in self.edges:
            acc.setdefault(e.subject_id, []).append(e)
        return {k: tuple(v) for k, v in acc.items()}

    @cached_property
    def in_edges(self) -> dict[int, tuple[RelationEdge, ...]]:
        acc: dict[int, list[RelationEdge]] = {}
        for e in self.edges:
            acc.setdefault(e.object_id, []).append(e)
        return {k: tuple(v) for k, v in acc.items()}

    def node(self, node_id: int) -> ObjectNode:
        return self.nodes_by_id[node_id]


@dataclass(frozen=True)
class Taxonomy:
    """Class remap table plus the object/attribute/relation vocabularies."""

    class_remap: Mapping[str, str]
    object_vocab: tuple[str, ...]
    attribute_vocabs: Mapping[str, tuple[str, ...]]
    relation_vocab: tuple[str, ...]
    excluded_classes: frozenset[str]

    def vocabulary(self, kind: str) -> tuple[str, ...]:
        """Vocabulary for a slot kind: object, relation, or an attribute name."""
        if kind == "object":
            return self.object_vocab
        if kind == "relation":
            return self.relation_vocab
        try:
            return self.attribute_vocabs[kind]
        except KeyError:
            raise TaxonomyError(f"unknown vocabulary kind '{kind}'") from None

    def fingerprint(self) -> str:
        doc = taxonomy_to_document(self)
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class InstanceIndicator:
    """Per-point instance labels over a point cloud.

    ``labels`` holds integers in {1..num_instances} for each of the N points;
    ``points`` is an N x 6 array (XYZ + RGB).
    """

    labels: np.ndarray
    points: np.ndarray
    num_instances: int


# ---------------------------------------------------------------------------
# Loading and serialization


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise SceneDocumentError(message)


def _check_vec3(value: object, what: str, ctx: str) -> tuple[float, float, float]:
    _require(
        isinstance(value, (list, tuple)) and len(value) == 3,
        f"{ctx}: {what} must be a list of 3 numbers",
    )
    out = []
    for v in value:  # type: ignore[union-attr]
        _require(isinstance(v, (int, float)) and math.isfinite(v), f"{ctx}: {what} must be finite numbers")
        out.append(float(v))
    return (out[0], out[1], out[2])


def load_scene_graph(document: str | bytes | Mapping) -> SceneGraph:
    """Parse and validate a single scene document (JSON text or a mapping).

    Raises SceneDocumentError on malformed input, duplicate object ids, or
    relation endpoints that do not resolve; messages name the scene and the
    offending id.
    """
    if isinstance(document, (str, bytes)):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SceneDocumentError(f"malformed scene document: {exc}") from None
    else:
        doc = document
    _require(isinstance(doc, Mapping), "scene document must be a JSON object")
    sid = doc.get("scene_id")
    _require(isinstance(sid, str) and sid != "", "scene document missing 'scene_id'")
    objects = doc.get("objects", [])
    relations = doc.get("relations", [])
    _require(isinstance(objects, list), f"scene {sid}: 'objects' must be a list")
    _require(isinstance(relations, list), f"scene {sid}: 'relations' must be a list")

    nodes: list[ObjectNode] = []
    seen_ids: set[int] = set()
    for obj in objects:
        _require(isinstance(obj, Mapping), f"scene {sid}: object entries must be JSON objects")
        oid = obj.get("id")
        _require(isinstance(oid, int) and not isinstance(oid, bool) and oid > 0,
                 f"scene {sid}: object id {oid!r} must be a positive integer")
        _require(oid not in seen_ids, f"scene {sid}: duplicate object id {oid}")
        seen_ids.add(oid)
        ctx = f"scene {sid}, object {oid}"
        cls = obj.get("class")
        _require(isinstance(cls, str) and cls != "", f"{ctx}: missing 'class'")
        attrs = obj.get("attributes", {})
        _require(isinstance(attrs, Mapping), f"{ctx}: 'attributes' must be an object")
        for k, v in attrs.items():
            _require(k in ATTRIBUTE_NAMES, f"{ctx}: unknown attribute '{k}'")
            _require(isinstance(v, str) and v != "", f"{ctx}: attribute '{k}' must be a string")
        center = _check_vec3(obj.get("center"), "center", ctx)
        size = _check_vec3(obj.get("size"), "size", ctx)
        _require(all(s > 0.0 for s in size), f"{ctx}: size components must be strictly positive")
        orient = obj.get("orientation", 0.0)
        _require(isinstance(orient, (int, float)) and math.isfinite(orient),
                 f"{ctx}: orientation must be a finite number")
        nodes.append(ObjectNode(
            id=oid,
            class_label=cls,
            attributes=dict(attrs),
            box_center=center,
            box_size=size,
            orientation=_wrap_angle(float(orient)),
        ))

    edges: list[RelationEdge] = []
    seen_triples: set[tuple[int, str, int]] = set()
    for rel in relations:
        _require(isinstance(rel, (list, tuple)) and len(rel) == 3,
                 f"scene {sid}: relation entries must be [subject, predicate, object]")
        s, p, o = rel
        _require(isinstance(s, int) and isinstance(o, int),
                 f"scene {sid}: relation endpoints must be integers")
        _require(isinstance(p, str) and p != "", f"scene {sid}: relation predicate must be a string")
        _require(s != o, f"scene {sid}: relation ({s}, {p}, {o}) relates object {s} to itself")
        for endpoint in (s, o):
            _require(endpoint in seen_ids,
                     f"scene {sid}: relation endpoint {endpoint} does not match any object")
        triple = (s, p, o)
        _require(triple not in seen_triples, f"scene {sid}: duplicate relation {triple}")
        seen_triples.add(triple)
        edges.append(RelationEdge(s, p, o))

    return SceneGraph(scene_id=sid, nodes=tuple(nodes), edges=tuple(edges))


def scene_graph_to_document(graph: SceneGraph) -> dict:
    """Inverse of load_scene_graph; load(serialize(g)) == g."""
    return {
        "scene_id": graph.scene_id,
        "objects": [
            {
                "id": n.id,
                "class": n.class_label,
                "attributes": dict(n.attributes),
                "center": list(n.box_center),
                "size": list(n.box_size),
                "orientation": n.orientation,
            }
            for n in graph.nodes
        ],
        "relations": [[e.subject_id, e.predicate, e.object_id] for e in graph.edges],
    }


def load_scenes(path: str | Path) -> list[SceneGraph]:
    """Load a JSON-lines scene file (one scene document per line).

    A leading tool header line (as written by the command-line interface)
    is skipped.
    """
    scenes = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            if isinstance(doc, dict) and "tool_version" in doc and "scene_id" not in doc:
                continue
            scenes.append(load_scene_graph(doc))
    return scenes


def save_scenes(scenes: Iterable[SceneGraph], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in scenes:
            fh.write(json.dumps(scene_graph_to_document(g), sort_keys=True,
                                ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


def load_taxonomy(document: str | bytes | Path | Mapping) -> Taxonomy:
    """Load and validate a taxonomy from a path, JSON text, or a mapping."""
    if isinstance(document, Path) or (isinstance(document, str) and "\n" not in document
                                      and not document.lstrip().startswith("{")):
        with open(document, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    elif isinstance(document, (str, bytes)):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise TaxonomyError(f"malformed taxonomy document: {exc}") from None
    else:
        doc = document
    if not isinstance(doc, Mapping):
        raise TaxonomyError("taxonomy document must be a JSON object")

    def _vocab(values: object, what: str) -> tuple[str, ...]:
        if not isinstance(values, list) or not all(isinstance(v, str) for v in values):
            raise TaxonomyError(f"taxonomy '{what}' must be a list of strings")
        if len(set(values)) != len(values):
            raise TaxonomyError(f"taxonomy '{what}' contains duplicates")
        return tuple(values)

    objects = _vocab(doc.get("objects", []), "objects")
    relations = _vocab(doc.get("relations", []), "relations")
    attrs_doc = doc.get("attributes", {})
    if not isinstance(attrs_doc, Mapping):
        raise TaxonomyError("taxonomy 'attributes' must be an object")
    attributes = {}
    for name in ATTRIBUTE_NAMES:
        attributes[name] = _vocab(attrs_doc.get(name, []), f"attributes.{name}")
    excluded = frozenset(_vocab(doc.get("excluded", []), "excluded"))
    remap = doc.get("remap", {})
    if not isinstance(remap, Mapping):
        raise TaxonomyError("taxonomy 'remap' must be an object")
    allowed = set(objects) | excluded
    for raw, target in remap.items():
        if target not in allowed:
            raise TaxonomyError(
                f"remap target '{target}' (for '{raw}') is neither in the object "
                f"vocabulary nor excluded")
    return Taxonomy(
        class_remap=dict(remap),
        object_vocab=objects,
        attribute_vocabs=attributes,
        relation_vocab=relations,
        excluded_classes=excluded,
    )


def taxonomy_to_document(taxonomy: Taxonomy) -> dict:
    return {
        "remap": dict(taxonomy.class_remap),
        "objects": list(taxonomy.object_vocab),
        "attributes": {k: list(v) for k, v in taxonomy.attribute_vocabs.items()},
        "relations": list(taxonomy.relation_vocab),
        "excluded": sorted(taxonomy.excluded_classes),
    }


# ---------------------------------------------------------------------------
# Normalization and partitioning


def normalize(graph: SceneGraph, taxonomy: Taxonomy) -> SceneGraph:
    """Remap raw class labels and drop excluded-class nodes with their edges.

    Attributes and edge predicates are preserved verbatim.  Idempotent when
    the remap contains identity entries for the normalized vocabulary.
    """
    kept: list[ObjectNode] = []
    kept_ids: set[int] = set()
    for node in graph.nodes:
        raw = node.class_label
        if raw not in taxonomy.class_remap:
            raise TaxonomyError(
                f"unmapped object class '{raw}' (scene {graph.scene_id}, object {node.id})")
        mapped = taxonomy.class_remap[raw]
        if mapped in taxonomy.excluded_classes:
            continue
        kept.append(node if mapped == raw else replace(node, class_label=mapped))
        kept_ids.add(node.id)
    edges = tuple(e for e in graph.edges
                  if e.subject_id in kept_ids and e.object_id in kept_ids)
    return SceneGraph(scene_id=graph.scene_id, nodes=tuple(kept), edges=edges)


def partition_instances(indicator: InstanceIndicator) -> list[np.ndarray]:
    """Split the point cloud into per-instance point sets.

    Returns a list of length ``num_instances``; entry i holds exactly the
    points labeled i+1.  The outputs are disjoint and their union is the
    input point set.
    """
    labels = np.asarray(indicator.labels)
    points = np.asarray(indicator.points)
    m = indicator.num_instances
    if labels.ndim != 1 or points.ndim != 2 or points.shape[0] != labels.shape[0]:
        raise ValueError("labels must be (N,) and points (N, k) with matching N")
    if m < 0:
        raise ValueError("num_instances must be non-negative")
    if labels.size:
        bad = (labels < 1) | (labels > m)
        if bad.any():
            offending = int(labels[bad][0])
            raise ValueError(f"instance label {offending} out of range 1..{m}")
    return [points[labels == i] for i in range(1, m + 1)]


# ---------------------------------------------------------------------------
# Synthetic fixtures

SpatialRule = Callable[[ObjectNode, ObjectNode], bool]


def _dist(a: ObjectNode, b: ObjectNode) -> float:
    return math.dist(a.box_center, b.box_center)


def _xy_dist(a: ObjectNode, b: ObjectNode) -> float:
    return math.hypot(a.box_center[0] - b.box_center[0], a.box_center[1] - b.box_center[1])


def _same_attr(name: str) -> SpatialRule:
    def rule(a: ObjectNode, b: ObjectNode) -> bool:
        va = a.attributes.get(name)
        return va is not None and va == b.attributes.get(name)

    return rule


def default_relation_rules() -> dict[str, SpatialRule]:
    """Predicate rules used to derive edges for synthetic scenes.

    Subject/object order follows the predicate reading: an edge
    (a, "left of", b) means a is left of b.  Directional spatial relations
    are gated by proximity so fixture graphs stay reasonably sparse;
    strictly comparative rules (volume, height, ...) hold for every ordered
    pair that satisfies the strict inequality.
    """
    return {
        "left of": lambda a, b: a.box_center[0] < b.box_center[0] and _dist(a, b) <= 2.5,
        "right of": lambda a, b: a.box_center[0] > b.box_center[0] and _dist(a, b) <= 2.5,
        "in front of": lambda a, b: a.box_center[1] < b.box_center[1] and _dist(a, b) <= 2.5,
        "behind": lambda a, b: a.box_center[1] > b.box_center[1] and _dist(a, b) <= 2.5,
        "above": lambda a, b: a.box_center[2] > b.box_center[2] and _xy_dist(a, b) <= 1.0,
        "below": lambda a, b: a.box_center[2] < b.box_center[2] and _xy_dist(a, b) <= 1.0,
        "close by": lambda a, b: _dist(a, b) <= 1.5,
        "next to": lambda a, b: _dist(a, b) <= 0.8,
        "bigger than": lambda a, b: a.volume() > b.volume(),
        "smaller than": lambda a, b: a.volume() < b.volume(),
        "taller than": lambda a, b: a.box_size[2] > b.box_size[2],
        "shorter than": lambda a, b: a.box_size[2] < b.box_size[2],
        "higher than": lambda a, b: a.box_center[2] > b.box_center[2],
        "lower than": lambda a, b: a.box_center[2] < b.box_center[2],
        "wider than": lambda a, b: a.box_size[0] > b.box_size[0],
        "narrower than": lambda a, b: a.box_size[0] < b.box_size[0],
        "same color as": _same_attr("color"),
        "same material as": _same_attr("material"),
        "same shape as": _same_attr("shape"),
        "same size as": _same_attr("size"),
    }


def synth_scene(
    seed: int,
    n_objects: int,
    taxonomy: Taxonomy,
    rules: Mapping[str, SpatialRule] | None = None,
    *,
    attr_prob: float = 0.85,
    scene_id: str | None = None,
) -> SceneGraph:
    """Generate a deterministic synthetic scene from a seed.

    Classes, attributes, and boxes are sampled uniformly from the taxonomy;
    edges are derived from ``rules`` (default ``default_relation_rules``)
    restricted to predicates present in the relation vocabulary.  Real scene
    data carries annotated edges; this derivation exists only for fixtures.
    """
    if n_objects < 0:
        raise ValueError("n_objects must be non-negative")
    rng = Random(seed)
    rules = default_relation_rules() if rules is None else rules
    nodes = []
    for oid in range(1, n_objects + 1):
        cls = rng.choice(taxonomy.object_vocab)
        attrs = {}
        for name in ATTRIBUTE_NAMES:
            if rng.random() < attr_prob:
                vocab = taxonomy.attribute_vocabs[name]
                if vocab:
                    attrs[name] = rng.choice(vocab)
        center = (rng.uniform(*_CENTER_XY), rng.uniform(*_CENTER_XY), rng.uniform(*_CENTER_Z))
        size = (rng.uniform(*_SIZE), rng.uniform(*_SIZE), rng.uniform(*_SIZE))
        orientation = rng.uniform(-math.pi, math.pi)
        nodes.append(ObjectNode(oid, cls, attrs, center, size, _wrap_angle(orientation)))

    edges = []
    for predicate in taxonomy.relation_vocab:
        rule = rules.get(predicate)
        if rule is None:
            continue
        for a in nodes:
            for b in nodes:
                if a.id != b.id and rule(a, b):
                    edges.append(RelationEdge(a.id, predicate, b.id))

    sid = scene_id if scene_id is not None else f"synth-{seed:06d}"
    return SceneGraph(scene_id=sid, nodes=tuple(nodes), edges=tuple(edges))
