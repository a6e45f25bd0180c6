"""Command-line entry point: ``gridlock <subcommand> --out DIR ...``.

Every run writes ``run.json`` with the resolved arguments so that
``gridlock replay run.json`` re-executes it. Timing lives only in
``bench.json``; every other artifact is byte-reproducible for a fixed seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .concepts import (
    ConceptSet,
    compare_concept_sets,
    merge_concept_lists,
    read_concept_texts,
    read_embeddings,
    write_concept_texts,
    write_embeddings,
    apply_template,
    canonical_text,
)
from .data import PROFILE_SHAPES, SyntheticSpec, generate_synthetic, load_manifest, write_dataset
from .errors import FormatError, NumericError, ParameterError, ScoringError, ValidationError
from .explain import explain_sequence, scene_explain_rate
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .numerics import ShapeError
from .training import (
    BENCH_PRESETS,
    LR_SCHEDULES,
    TrainConfig,
    ablate_bottleneck,
    bench_inference,
    evaluate,
    fit,
    split_dataset,
    write_ablation_csv,
    write_log_csv,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_DATA):
        super().__init__(message)
        self.code = code


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


# ---------------------------------------------------------------------------
# config assembly


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    d = ModelConfig(input_dim=4)
    g = p.add_argument_group("model")
    g.add_argument("--model-dim", type=int, default=d.model_dim)
    g.add_argument("--layers", type=int, default=d.n_layers)
    g.add_argument("--heads", type=int, default=d.n_heads)
    g.add_argument("--window", type=int, default=d.window)
    g.add_argument("--ffn-dim", type=int, default=d.ffn_dim)
    g.add_argument("--dropout", type=float, default=d.dropout_rate)
    g.add_argument("--tasks", choices=("angle", "distance", "both"), default=d.tasks)
    g.add_argument("--max-seq-len", type=int, default=d.max_seq_len)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=d.epochs)
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--lr", type=float, default=d.learning_rate)
    g.add_argument("--lr-schedule", choices=LR_SCHEDULES, default=d.lr_schedule)
    g.add_argument("--grad-clip", type=float, default=None)
    g.add_argument("--task-weights", default="1,1", help="angle,distance loss weights")
    g.add_argument("--distance-cap", type=float, default=d.distance_cap)
    g.add_argument("--split", default="0.85,0.05,0.10", help="train,val,test fractions")


def _model_config(args, k: int) -> ModelConfig:
    try:
        return _model_config_unchecked(args, k)
    except ValidationError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc


def _model_config_unchecked(args, k: int) -> ModelConfig:
    return ModelConfig(
        input_dim=k + 3,
        model_dim=args.model_dim,
        n_layers=args.layers,
        n_heads=args.heads,
        window=args.window,
        ffn_dim=args.ffn_dim,
        dropout_rate=args.dropout,
        tasks=args.tasks,
        max_seq_len=args.max_seq_len,
    )


def _train_config(args) -> TrainConfig:
    try:
        return _train_config_unchecked(args)
    except (ValidationError, ValueError) as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc


def _train_config_unchecked(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        lr_schedule=args.lr_schedule,
        seed=args.seed,
        grad_clip=args.grad_clip,
        task_weights=_floats(args.task_weights),
        distance_cap=args.distance_cap,
    )


def _load(path):
    if path is None:
        raise CliError("--manifest is required", EXIT_USAGE)
    return load_manifest(path)


def _checkpoint(path):
    if path is None:
        raise CliError("--checkpoint is required", EXIT_USAGE)
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _splits(args, sequences):
    return split_dataset(sequences, _floats(args.split), seed=args.seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, out: Path) -> dict:
    frames, fps = args.frames, args.fps
    if args.profile:
        p_frames, p_fps = PROFILE_SHAPES[args.profile]
        frames = p_frames if frames is None else frames
        fps = p_fps if fps is None else fps
    spec = SyntheticSpec(
        n_sequences=args.sequences,
        frames=20 if frames is None else frames,
        width=args.width,
        n_concepts=args.concepts,
        seed=args.seed,
        noise_std=args.noise,
        n_informative=args.informative,
        fps=1.0 if fps is None else fps,
        profile=args.profile,
    ).validate()
    data = generate_synthetic(spec)
    write_dataset(out, data.sequences, data.concept_set, "synthetic", {"rule": data.rule})
    return {"synthetic": dataclasses.asdict(spec)}


def _read_list(spec: str):
    """``texts.txt`` or ``texts.txt:embeddings.emb``."""
    text_path, _, emb_path = spec.partition(":")
    texts = read_concept_texts(text_path)
    emb = read_embeddings(emb_path) if emb_path else None
    if emb is not None and emb.shape[0] != len(texts):
        raise ValidationError(f"{text_path} has {len(texts)} lines but {emb_path} has {emb.shape[0]} rows")
    return texts, emb


def cmd_curate(args, out: Path) -> dict:
    if args.compare:
        return _curate_compare(args, out)
    lists = [(tag, _read_list(s)) for tag, specs in (("human", args.human), ("generated", args.generated)) for s in specs]
    if not lists:
        raise CliError("curate needs at least one --human or --generated list", EXIT_USAGE)
    merged = merge_concept_lists(*(texts for _, (texts, _) in lists))
    if not merged:
        raise ValidationError("curated concept set is empty")
    write_concept_texts(merged, out / "concepts.txt")
    n_in = sum(len(t) for _, (t, _) in lists)
    tags = {tag for tag, _ in lists}
    report = {
        "n_input": n_in,
        "n_output": len(merged),
        "n_removed": n_in - len(merged),
        "source_tag": tags.pop() if len(tags) == 1 else "mixed",
        "embeddings": False,
    }
    if all(emb is not None for _, (_, emb) in lists):
        # keep the embedding of each concept's first occurrence
        first = {}
        for _, (texts, emb) in lists:
            for t, row in zip(texts, emb):
                if t.strip():
                    first.setdefault(canonical_text(apply_template(t)), row)
        write_embeddings(np.array([first[canonical_text(t)] for t in merged]), out / "concepts.emb")
        report["embeddings"] = True
    _dump_json(report, out / "curate.json")
    return {}


def _curate_compare(args, out: Path) -> dict:
    data = _load(args.manifest)
    sets = []
    for spec in args.compare:
        tag, _, files = spec.partition("=")
        text_path, _, emb_path = files.partition(":")
        if not (tag and text_path and emb_path):
            raise CliError(f"--compare expects TAG=TEXTS:EMB, got {spec!r}", EXIT_USAGE)
        source = tag if tag in ("human", "generated", "mixed") else "mixed"
        sets.append((tag, ConceptSet.load(text_path, emb_path, source)))
    k = sets[0][1].k
    rows = compare_concept_sets(
        sets, data.sequences, _model_config(args, k), _train_config(args), seed=args.seed
    )
    with open(out / "compare.csv", "w", newline="") as fh:
        fh.write("set_tag,size,d_mae,a_mae\n")
        for r in rows:
            fh.write(f"{r['set_tag']},{r['size']},{r['d_mae']!r},{r['a_mae']!r}\n")
    return {}


def cmd_train(args, out: Path) -> dict:
    data = _load(args.manifest)
    mcfg = _model_config(args, data.concept_set.k)
    tcfg = _train_config(args)
    train, val, test = _splits(args, data.sequences)
    result = fit(train, val, data.concept_set, mcfg, tcfg)
    save_checkpoint(out / "checkpoint.cgck", result.params, mcfg)
    write_log_csv(result.log, out / "train_log.csv")
    metrics = {"best_epoch": result.best_epoch, "splits": [len(train), len(val), len(test)]}
    if test:
        metrics["test"] = evaluate(test, data.concept_set, result.params, mcfg, tcfg.distance_cap).to_dict()
    _dump_json(metrics, out / "metrics.json")
    return {"model_config": mcfg.to_dict(), "train_config": dataclasses.asdict(tcfg)}


def cmd_eval(args, out: Path) -> dict:
    data = _load(args.manifest)
    params, cfg = _checkpoint(args.checkpoint)
    if args.part == "all":
        seqs = data.sequences
    else:
        seqs = dict(zip(("train", "val", "test"), _splits(args, data.sequences)))[args.part]
    report = evaluate(seqs, data.concept_set, params, cfg, args.distance_cap)
    _dump_json(report.to_dict(), out / "eval.json")
    print(json.dumps(report.mae, sort_keys=True))
    return {"model_config": cfg.to_dict()}


def cmd_explain(args, out: Path) -> dict:
    data = _load(args.manifest)
    params, cfg = _checkpoint(args.checkpoint)
    chosen = data.sequences
    if args.sequence:
        wanted = set(args.sequence)
        chosen = [s for s in data.sequences if s.id in wanted]
        missing = wanted - {s.id for s in chosen}
        if missing:
            raise ValidationError(f"unknown sequence ids: {sorted(missing)}")
    for seq in chosen:
        rep = explain_sequence(
            seq,
            data.concept_set,
            params,
            cfg,
            top_k=args.top_k,
            window_frames=args.window_frames,
            z_threshold=args.z_threshold,
            min_gap=args.min_gap,
            hold_off=args.hold_off,
        )
        (out / f"explain_{seq.id}.json").write_text(rep.to_json(), encoding="utf-8")
        (out / f"explain_{seq.id}.csv").write_text(rep.to_csv(), encoding="utf-8")
    rates = {m: scene_explain_rate(chosen, data.concept_set, m, args.top_k) for m in ("top1", "top3")}
    _dump_json(rates, out / "explain_rate.json")
    return {}


def cmd_ablate(args, out: Path) -> dict:
    data = _load(args.manifest)
    mcfg = _model_config(args, data.concept_set.k)
    tcfg = _train_config(args)
    sizes = [s.strip() for s in args.sizes.split(",") if s.strip()]
    rows = ablate_bottleneck(
        data.concept_set, sizes, _ints(args.subset_seeds), data.sequences, mcfg, tcfg
    )
    write_ablation_csv(rows, out / "ablation.csv")
    return {"model_config": mcfg.to_dict(), "train_config": dataclasses.asdict(tcfg)}


def cmd_bench(args, out: Path) -> dict:
    if args.checkpoint:
        params, cfg = _checkpoint(args.checkpoint)
    else:
        cfg = _model_config(args, args.concepts)
        params = init_params(cfg, args.seed)
    frames = args.frames if args.frames is not None else BENCH_PRESETS[args.preset]
    if frames > cfg.max_seq_len:
        raise ParameterError(f"--frames {frames} exceeds max_seq_len {cfg.max_seq_len}")
    timing = bench_inference(params, cfg, frames, args.runs, seed=args.seed)
    _dump_json(timing, out / "bench.json")
    return {"model_config": cfg.to_dict(), "frames": frames}


def cmd_replay(args, out: Path | None) -> dict:
    record = json.loads(Path(args.run_json).read_text(encoding="utf-8"))
    if record.get("command") not in HANDLERS or record["command"] == "replay":
        raise ValidationError(f"{args.run_json} does not describe a replayable run")
    ns = argparse.Namespace(**record["args"])
    if args.out is not None:
        ns.out = args.out
    return _execute(ns)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "curate": cmd_curate,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
    "replay": cmd_replay,
}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridlock", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text, seed_required=False, needs_out=True):
        p = sub.add_parser(name, help=help_text)
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, required=seed_required, default=None if seed_required else 0)
        return p

    p = command("gen-data", "write a synthetic dataset")
    p.add_argument("--sequences", type=int, default=80)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--fps", type=float, default=None)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--concepts", type=int, default=24)
    p.add_argument("--informative", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--profile", choices=sorted(PROFILE_SHAPES), default=None)

    p = command("curate", "template, deduplicate and merge concept lists")
    p.add_argument("--human", action="append", default=[], metavar="TXT[:EMB]")
    p.add_argument("--generated", action="append", default=[], metavar="TXT[:EMB]")
    p.add_argument("--compare", action="append", default=[], metavar="TAG=TXT:EMB",
                   help="train one model per concept set and write compare.csv")
    p.add_argument("--manifest")
    _add_model_flags(p)
    _add_train_flags(p)

    p = command("train", "fit a model on a dataset", seed_required=True)
    p.add_argument("--manifest")
    _add_model_flags(p)
    _add_train_flags(p)

    p = command("eval", "evaluate a checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--part", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--split", default="0.85,0.05,0.10")
    p.add_argument("--distance-cap", type=float, default=TrainConfig().distance_cap)

    p = command("explain", "per-frame concepts, attention events and reveal flags")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--sequence", action="append", default=[], help="sequence id (repeatable)")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--window-frames", type=int, default=20)
    p.add_argument("--z-threshold", type=float, default=2.5)
    p.add_argument("--min-gap", type=int, default=4)
    p.add_argument("--hold-off", type=int, default=4)

    p = command("ablate", "bottleneck-size ablation", seed_required=True)
    p.add_argument("--manifest")
    p.add_argument("--sizes", default="24,48,100,300,full")
    p.add_argument("--subset-seeds", default="0")
    _add_model_flags(p)
    _add_train_flags(p)

    p = command("bench", "inference latency")
    p.add_argument("--checkpoint")
    p.add_argument("--concepts", type=int, default=24, help="concept count when no checkpoint is given")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--preset", choices=sorted(BENCH_PRESETS), default="comma")
    p.add_argument("--runs", type=int, default=100)
    _add_model_flags(p)

    p = command("replay", "re-execute a run from its run.json", needs_out=False)
    p.add_argument("run_json")
    p.add_argument("--out", default=None, help="override the recorded output directory")
    return parser


def _execute(args) -> dict:
    if args.command == "replay":
        return HANDLERS["replay"](args, None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = HANDLERS[args.command](args, out)
    record = {
        "command": args.command,
        "args": {k: v for k, v in sorted(vars(args).items())},
        "seed": args.seed,
        "resolved": resolved,
        "version": __version__,
    }
    _dump_json(record, out / "run.json")
    return record


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    try:
        _execute(args)
    except CliError as exc:
        print(f"gridlock: error: {exc}", file=sys.stderr)
        return exc.code
    except ParameterError as exc:
        print(f"gridlock: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"gridlock: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, FormatError, ValidationError, ScoringError, ShapeError) as exc:
        print(f"gridlock: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
