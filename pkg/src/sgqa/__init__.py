"""Toolkit for synthesizing balanced question-answer datasets over 3D
semantic scene graphs, auditing their answer distributions for bias, and
checking a pure-numpy reference of the graph-aware attention math."""

__version__ = "0.1.0"

from .errors import (
    SgqaError,
    SceneDocumentError,
    TaxonomyError,
    ProgramParseError,
    ProgramTypeError,
    FamilyError,
    SplitError,
)
from .graph import (
    ObjectNode,
    RelationEdge,
    SceneGraph,
    Taxonomy,
    InstanceIndicator,
    load_scene_graph,
    scene_graph_to_document,
    load_scenes,
    save_scenes,
    load_taxonomy,
    normalize,
    partition_instances,
    synth_scene,
    default_relation_rules,
)
from .programs import (
    ProgramNode,
    SlotRef,
    Answer,
    Degenerate,
    parse_program,
    render_program,
    typecheck,
    execute,
)
from .families import SlotSpec, QuestionFamily, FamilyRegistry, load_families, instantiate
from .generate import (
    QARecord,
    GenerationConfig,
    AnswerHistogram,
    GenerationSummary,
    generate_for_scene,
    generate_dataset,
    flatten_check,
    balance,
    split,
    write_records,
    read_records,
    validate_records,
)
from .stats import StatsReport, BaselineReport, compute_stats, blind_baseline
