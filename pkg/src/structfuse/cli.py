"""Command-line front end: data generation, training, fusion, evaluation.

Exit codes: 0 success, 1 usage error, 2 runtime error. Progress goes to
stderr; machine-readable output goes to the files named by flags. Every
command is reproducible from its seed, which is recorded in its outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from .adjust import AdjustConfig
from .driver import BenchmarkConfig, FusionConfig, StopRule, fuse, run_benchmark
from .inference import SamplerConfig
from .rng import SeededRng
from .rvnn import AblationFlags, ModelConfig, new_model
from .sceneio import (
    SceneDocument,
    load_model,
    load_scene,
    save_model,
    save_scene,
    train_log_digest,
    write_benchmark_csv,
    write_json,
    write_loss_csv,
)
from .synthdata import FAMILIES, ShapeSample, sample_shape
from .training import TrainConfig, desk_train_config, train_dae, train_vqvae


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; the exit-code contract wants 1
    def error(self, message):
        raise UsageError(message)


def _note(msg: str) -> None:
    print(msg, file=sys.stderr)


def _read_overrides(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    data = json.loads(Path(args.config).read_text())
    if not isinstance(data, dict):
        raise UsageError("--config must hold a JSON object")
    return data


def _apply_overrides(cfg, overrides: dict, known_extra=()):
    names = {f.name for f in fields(cfg)}
    bad = set(overrides) - names - set(known_extra)
    if bad:
        raise UsageError(f"unknown config keys {sorted(bad)}")
    take = {k: v for k, v in overrides.items() if k in names}
    return replace(cfg, **take) if take else cfg


# -- gen-data -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    root = SeededRng(args.seed)
    for i in range(args.count):
        boxes, h = sample_shape(args.family, root.derive("scene", args.family, i))
        doc = SceneDocument(
            boxes=boxes,
            groups=[0] * len(boxes),
            hierarchy=h,
            meta={"seed": args.seed, "family": args.family, "index": i},
        )
        save_scene(out / f"{args.family}_{i:04d}.scene.json", doc)
    _note(f"wrote {args.count} {args.family} scenes to {out}")
    return 0


# -- train ---------------------------------------------------------------------


def _load_shapes(data_dir: str) -> list[ShapeSample]:
    paths = sorted(Path(data_dir).glob("*.scene.json"))
    if not paths:
        raise UsageError(f"no .scene.json files under {data_dir}")
    shapes = []
    for p in paths:
        doc = load_scene(p)
        if doc.hierarchy is None:
            raise ValueError(f"{p}: training scenes need a hierarchy")
        shapes.append(
            ShapeSample(
                family=str(doc.meta.get("family", "unknown")),
                boxes=doc.boxes,
                hierarchy=doc.hierarchy,
                seed=int(doc.meta.get("seed", 0)),
            )
        )
    return shapes


def cmd_train(args) -> int:
    shapes = _load_shapes(args.data)
    overrides = _read_overrides(args)
    tcfg = TrainConfig() if args.paper_config else desk_train_config()
    tcfg = _apply_overrides(tcfg, overrides)
    out = Path(args.out)

    if args.stage in ("vqvae", "all"):
        if args.model:
            raise UsageError("--model only applies to --stage dae")
        config = ModelConfig.paper_config() if args.paper_config else ModelConfig()
        m = new_model(config, seed=args.seed)
        _note(f"stage vqvae: {len(shapes)} shapes, {tcfg.epochs_vqvae} epochs")
        log = train_vqvae(m, shapes, tcfg, seed=args.seed, progress=_note)
        m.meta["vqvae"]["loss_digest"] = train_log_digest(log.history)
        write_loss_csv(out.with_suffix(".vqvae_loss.csv"), "vqvae", log.history)
    else:
        if not args.model:
            raise UsageError("--stage dae needs --model with a stage-one checkpoint")
        m = load_model(args.model)

    if args.stage in ("dae", "all"):
        _note(f"stage dae: {len(shapes)} shapes, {tcfg.epochs_dae} epochs")
        log = train_dae(m, shapes, tcfg, seed=args.seed, progress=_note)
        m.meta["dae"]["loss_digest"] = train_log_digest(log.history)
        write_loss_csv(out.with_suffix(".dae_loss.csv"), "dae", log.history)

    save_model(out, m)
    _note(f"checkpoint written to {out}")
    return 0


# -- fuse ----------------------------------------------------------------------


def _fusion_config(args, overrides: dict) -> FusionConfig:
    sampler = _apply_overrides(SamplerConfig(), overrides, known_extra=_FUSE_KEYS)
    adjust = _apply_overrides(
        AdjustConfig(
            eta_threshold=args.eta_t, allow_synthesis=not args.no_synthesis
        ),
        overrides,
        known_extra=_FUSE_KEYS,
    )
    flags = _apply_overrides(AblationFlags(), overrides, known_extra=_FUSE_KEYS)
    stop = _apply_overrides(StopRule(), overrides, known_extra=_FUSE_KEYS)
    return FusionConfig(
        sampler=sampler,
        adjust=adjust,
        flags=flags,
        stop=stop,
        strict=bool(overrides.get("strict", args.strict)),
        dock=bool(overrides.get("dock", args.dock)),
        seed=args.seed,
    )


_FUSE_KEYS = (
    [f.name for f in fields(SamplerConfig)]
    + [f.name for f in fields(AdjustConfig)]
    + [f.name for f in fields(AblationFlags)]
    + [f.name for f in fields(StopRule)]
    + ["strict", "dock"]
)


def _input_groups(paths: list[str]):
    docs = [load_scene(p) for p in paths]
    if len(docs) == 1 and len(set(docs[0].groups)) > 1:
        doc = docs[0]
        if doc.hierarchy is not None:
            _note("input hierarchy spans several groups; rebuilding per group")
        groups = []
        members_all = []
        for g in sorted(set(doc.groups)):
            members = [i for i, gi in enumerate(doc.groups) if gi == g]
            groups.append(([doc.boxes[i] for i in members], None))
            members_all.extend(members)
        sources = [doc.sources[i] for i in members_all]
        group_ids = [doc.groups[i] for i in members_all]
        return docs, groups, sources, group_ids
    groups, sources, group_ids = [], [], []
    for gi, doc in enumerate(docs):
        groups.append((doc.boxes, doc.hierarchy))
        sources.extend(doc.sources)
        group_ids.extend([gi] * len(doc.boxes))
    return docs, groups, sources, group_ids


def cmd_fuse(args) -> int:
    m = load_model(args.model)
    overrides = _read_overrides(args)
    config = _fusion_config(args, overrides)
    docs, groups, in_sources, in_groups = _input_groups(args.inputs)
    boxes, h, report = fuse(m, groups, config)

    out_groups, out_sources = [], []
    for i in range(len(boxes)):
        src = report.part_source.get(i)
        if src is None:
            out_groups.append(-1)
            out_sources.append("synthesized")
        else:
            out_groups.append(in_groups[src])
            out_sources.append(in_sources[src])
    meta = {"seed": args.seed, "family": docs[0].meta.get("family", "unknown")}
    save_scene(
        args.out,
        SceneDocument(
            boxes=boxes, groups=out_groups, hierarchy=h, sources=out_sources, meta=meta
        ),
    )
    if args.trace:
        write_json(
            args.trace,
            {
                "seed": args.seed,
                "eta_threshold": config.adjust.eta_threshold,
                "allow_synthesis": config.adjust.allow_synthesis,
                "strict": config.strict,
                "trace": report.trace,
                "iterations": report.iterations,
                "converged": report.converged,
                "rolled_back": report.rolled_back,
                "synthesis_events": report.synthesis_events,
                "budget_exceeded": report.budget_exceeded,
                "dock_events": [asdict(e) for e in report.dock_events],
                "part_source": {str(k): v for k, v in report.part_source.items()},
            },
        )
    _note(
        f"fused {sum(len(g[0]) for g in groups)} parts -> {len(boxes)}"
        f" in {report.iterations} iterations"
        f" ({len(report.synthesis_events)} synthesis events)"
    )
    return 0


# -- eval ------------------------------------------------------------------------


def cmd_eval(args) -> int:
    m = load_model(args.model)
    overrides = _read_overrides(args)
    cfg = BenchmarkConfig(bench=args.bench, n_tasks=args.tasks, seed=args.seed)
    cfg = _apply_overrides(cfg, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = run_benchmark(m, cfg, progress=_note)
    csv_path = out / f"{args.bench}.csv"
    write_benchmark_csv(csv_path, res.rows)
    write_json(out / f"{args.bench}_summary.json", res.summary)
    _note(f"wrote {len(res.rows)} rows to {csv_path}")
    return 0


# -- serve / inspect ---------------------------------------------------------------


def cmd_serve(args) -> int:
    from .service import run_server

    m = load_model(args.model)
    run_server(m, host=args.host, port=args.port, notify=_note)
    return 0


def cmd_inspect(args) -> int:
    p = Path(args.path)
    name = p.name
    if name.endswith(".scene.json"):
        doc = load_scene(p)
        print(f"scene: {len(doc.boxes)} parts, groups {sorted(set(doc.groups))}")
        if doc.hierarchy is None:
            print("hierarchy: absent")
        else:
            h = doc.hierarchy
            print(
                f"hierarchy: {len(h.nodes)} nodes, depth {h.max_depth()},"
                f" {len(h.leaves())} leaves"
            )
        print(f"meta: {json.dumps(doc.meta, sort_keys=True)}")
        return 0
    if name.endswith(".scores.bin"):
        m = load_model(p)
        n_params = sum(
            int(a.size) for arrays in m.all_params().values() for a in arrays
        )
        c = m.config
        print(f"checkpoint: stage {m.stage}, {n_params} parameters")
        print(
            f"config: d_code={c.d_code} d_hidden={c.d_hidden}"
            f" d_vq={c.d_vq} codebook={c.codebook_size}"
        )
        print(f"meta: {json.dumps(m.meta, sort_keys=True)}")
        return 0
    raise UsageError(f"cannot inspect {name!r}: expected .scene.json or .scores.bin")


# -- parser ----------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="structfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="JSON file with config overrides")

    p = sub.add_parser("gen-data", help="write synthetic scene files")
    p.add_argument("--family", choices=FAMILIES, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a directory of scenes")
    p.add_argument("--data", required=True)
    p.add_argument("--stage", choices=("vqvae", "dae", "all"), default="all")
    p.add_argument("--out", required=True)
    p.add_argument("--model", help="stage-one checkpoint to continue from")
    p.add_argument("--paper-config", action="store_true", help="full-size networks")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", help="merge scenes into one structure")
    p.add_argument("--model", required=True)
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="write the iteration report here")
    p.add_argument("--eta-t", type=float, default=0.7)
    p.add_argument("--no-synthesis", action="store_true")
    p.add_argument("--strict", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--dock", action="store_true")
    common(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="run a benchmark grid")
    p.add_argument("--model", required=True)
    p.add_argument("--bench", choices=("noise", "separation", "ablation"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tasks", type=int, default=20)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the fusion HTTP service")
    p.add_argument("--model", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8574)
    common(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("inspect", help="summarize a scene or checkpoint")
    p.add_argument("path")
    common(p)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
