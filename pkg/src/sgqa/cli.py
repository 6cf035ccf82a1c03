"""Command-line pipeline: scene normalization, fixture synthesis, dataset
generation, record validation, statistics, bias auditing, and kernel checks.

Every file the tool writes starts with a header line carrying the tool
version, the seed, and a digest of the effective configuration, so outputs
are traceable and byte-reproducible.  All randomness flows from --seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from importlib import resources
from pathlib import Path

from . import __version__
from .errors import SgqaError
from .families import load_families
from .generate import (
    GenerationConfig,
    config_digest,
    generate_dataset,
    read_records,
    split,
    validate_records,
    write_records,
)
from .graph import (
    load_scenes,
    load_taxonomy,
    normalize,
    scene_graph_to_document,
    synth_scene,
)
from .kernels import GRAD_CHECK_OPS, grad_check, permutation_check
from .programs import Degenerate, execute, parse_program
from .stats import blind_baseline, compute_stats

_JSON_KW = dict(sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def _default_data(name: str) -> Path:
    return Path(str(resources.files("sgqa").joinpath(f"data/{name}")))


def _digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _header_line(seed: int, digest: str) -> str:
    return json.dumps(
        {"config_digest": digest, "seed": seed, "tool_version": __version__}, **_JSON_KW)


def _write_lines(path: str, seed: int, digest: str, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_header_line(seed, digest))
        fh.write("\n")
        for line in lines:
            fh.write(line)
            fh.write("\n")


def _load_split(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise SgqaError("split file must be a JSON object mapping scene_id to train/test")
    return doc


def _emit_report(report_dict: dict, out: str | None, seed: int, digest: str) -> None:
    text = json.dumps(report_dict, sort_keys=True, indent=2, ensure_ascii=False)
    print(text)
    if out:
        _write_lines(out, seed, digest, [json.dumps(report_dict, **_JSON_KW)])


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_synth(args) -> int:
    taxonomy = load_taxonomy(Path(args.taxonomy))
    if args.min_objects > args.max_objects:
        raise SgqaError("--min-objects must not exceed --max-objects")
    lines = []
    for i in range(args.count):
        blob = hashlib.sha256(f"{args.seed}|synth|{i}".encode()).digest()
        scene_seed = int.from_bytes(blob[:4], "big")
        n = args.min_objects + scene_seed % (args.max_objects - args.min_objects + 1)
        graph = synth_scene(scene_seed, n, taxonomy, scene_id=f"synth-{i:04d}")
        lines.append(json.dumps(scene_graph_to_document(graph), **_JSON_KW))
    digest = _digest({"cmd": "synth", "count": args.count, "seed": args.seed,
                      "min": args.min_objects, "max": args.max_objects,
                      "taxonomy": taxonomy.fingerprint()})
    _write_lines(args.out, args.seed, digest, lines)
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def _cmd_normalize(args) -> int:
    taxonomy = load_taxonomy(Path(args.taxonomy))
    scenes = load_scenes(args.scenes)
    lines = [json.dumps(scene_graph_to_document(normalize(g, taxonomy)), **_JSON_KW)
             for g in scenes]
    digest = _digest({"cmd": "normalize", "taxonomy": taxonomy.fingerprint()})
    _write_lines(args.out, args.seed, digest, lines)
    print(f"wrote {len(lines)} normalized scenes to {args.out}")
    return 0


def _make_config(args) -> GenerationConfig:
    cap = args.flatness_cap
    if cap is not None and (cap <= 0 or cap != cap or cap == float("inf")):
        cap = None
    return GenerationConfig(
        seed=args.seed,
        per_scene_target=args.per_scene,
        max_attempts_per_question=args.max_attempts,
        flatness_cap=cap,
        flatness_slack=args.flatness_slack,
        balance_threshold=args.balance_threshold,
        count_cap=args.count_cap,
        balance_per_family=args.balance_per_family,
    )


def _cmd_generate(args) -> int:
    taxonomy = load_taxonomy(Path(args.taxonomy))
    registry = load_families(Path(args.families), taxonomy)
    scenes = [normalize(g, taxonomy) for g in load_scenes(args.scenes)]
    config = _make_config(args)
    result = generate_dataset(scenes, registry, config, threads=args.threads)
    digest = config_digest(config, registry)
    write_records(args.out, result.records, seed=config.seed, digest=digest)
    print(json.dumps(result.summary.to_json_dict(), **_JSON_KW))
    return 0


def _cmd_execute(args) -> int:
    scenes = load_scenes(args.scenes)
    if args.scene_id is not None:
        matches = [g for g in scenes if g.scene_id == args.scene_id]
        if not matches:
            raise SgqaError(f"scene '{args.scene_id}' not found in {args.scenes}")
        graph = matches[0]
    elif len(scenes) == 1:
        graph = scenes[0]
    else:
        raise SgqaError("--scene-id is required when the scene file holds several scenes")
    outcome = execute(parse_program(args.program), graph)
    if isinstance(outcome, Degenerate):
        print(json.dumps({"degenerate": outcome.reason}, **_JSON_KW))
    else:
        print(json.dumps({"answer": outcome.to_json_dict()}, **_JSON_KW))
    return 0


def _cmd_validate(args) -> int:
    _, records = read_records(args.records)
    scenes = load_scenes(args.scenes)
    if args.taxonomy:
        taxonomy = load_taxonomy(Path(args.taxonomy))
        scenes = [normalize(g, taxonomy) for g in scenes]
    problems = validate_records(records, {g.scene_id: g for g in scenes})
    for problem in problems:
        print(problem, file=sys.stderr)
    if problems:
        print(f"validate: {len(problems)} mismatch(es) in {len(records)} records",
              file=sys.stderr)
        return 1
    print(f"validate: all {len(records)} records re-execute to their stored answers")
    return 0


def _cmd_stats(args) -> int:
    _, records = read_records(args.records)
    scenes = load_scenes(args.scenes)
    report = compute_stats(records, scenes)
    digest = _digest({"cmd": "stats", "records": args.records})
    _emit_report(report.to_json_dict(), args.out, args.seed, digest)
    return 0


def _cmd_baseline(args) -> int:
    _, records = read_records(args.records)
    scene_split = _load_split(args.split)
    train, test = split(records, scene_split)
    report = blind_baseline(train, test)
    digest = _digest({"cmd": "baseline", "records": args.records, "split": args.split})
    _emit_report(report.to_json_dict(), args.out, args.seed, digest)
    return 0


def _cmd_kernel_check(args) -> int:
    try:
        m, l, d = (int(part) for part in args.dims.split(","))
    except ValueError:
        raise SgqaError(f"--dims must be 'm,l,d', got {args.dims!r}") from None
    failed = False
    for op in GRAD_CHECK_OPS:
        report = grad_check(op, seed=args.seed, m=m, l=l, d=d, h=args.h, tol=args.tol)
        status = "PASS" if report.passed else "FAIL"
        failed |= not report.passed
        print(f"{status} grad {op}: max_rel_error={report.max_rel_error:.3e} "
              f"(worst {report.worst_param}, tol {args.tol:g})")
    perm = permutation_check(seed=args.seed, m=m, l=l, d=d, trials=args.trials,
                             tol=args.perm_tol)
    status = "PASS" if perm.passed else "FAIL"
    failed |= not perm.passed
    print(f"{status} permutation x{perm.trials}: language={perm.max_language_error:.3e} "
          f"vqa={perm.max_vqa_error:.3e} node={perm.max_node_error:.3e} "
          f"edge={perm.max_edge_error:.3e} (tol {perm.tol:g})")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sgqa",
        description="Balanced question-answer dataset synthesis over 3D scene graphs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    default_taxonomy = str(_default_data("taxonomy.json"))
    default_families = str(_default_data("families.json"))

    p = sub.add_parser("synth", help="generate synthetic fixture scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-objects", type=int, default=4)
    p.add_argument("--max-objects", type=int, default=10)
    p.add_argument("--taxonomy", default=default_taxonomy)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("normalize", help="remap classes and drop excluded objects")
    p.add_argument("--scenes", required=True)
    p.add_argument("--taxonomy", default=default_taxonomy)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_normalize)

    p = sub.add_parser("generate", help="generate a balanced question-answer dataset")
    p.add_argument("--scenes", required=True)
    p.add_argument("--taxonomy", default=default_taxonomy)
    p.add_argument("--families", default=default_families)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-scene", type=int, default=50)
    p.add_argument("--max-attempts", type=int, default=100,
                   help="attempt budget per requested question")
    p.add_argument("--flatness-cap", type=float, default=2.0,
                   help="max/min answer-count ratio per family; 0 disables flattening")
    p.add_argument("--flatness-slack", type=int, default=5)
    p.add_argument("--balance-threshold", type=int, default=20)
    p.add_argument("--count-cap", type=int, default=10)
    p.add_argument("--balance-per-family", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("execute", help="run one program against one scene")
    p.add_argument("--scenes", required=True)
    p.add_argument("--scene-id")
    p.add_argument("--program", required=True)
    p.set_defaults(func=_cmd_execute)

    p = sub.add_parser("validate", help="re-execute every record in a dataset file")
    p.add_argument("--records", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--taxonomy")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("stats", help="corpus statistics report")
    p.add_argument("--records", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("baseline", help="scene-blind majority baseline report")
    p.add_argument("--records", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("kernel-check", help="gradient and permutation checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", default="5,7,16", help="m,l,d")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--perm-tol", type=float, default=1e-6)
    p.set_defaults(func=_cmd_kernel_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SgqaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
