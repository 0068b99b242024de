"""Command-line workbench: dataset generation, the three training stages,
history collection, evaluation, and the HTTP service.

Every run writes a manifest (config hash, seeds, data hashes, metrics) into
its output directory so results can be replayed.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .errors import ConfigurationError
from .interaction import evaluate_split
from .listener import ListenerTrainConfig, OracleListener, load_listener, save_listener, train_learned_listener
from .metrics import build_corpus_stats, save_corpus_stats
from .speaker import Speaker, SpeakerDims, load_speaker, save_speaker
from .storage import ExperimentManifest, write_jsonl
from .training import (
    InteractiveConfig,
    MMIConfig,
    RLConfig,
    SupervisedConfig,
    collect_interaction_history,
    train_interactive,
    train_reinforced,
    train_supervised,
)
from .vocab import Vocabulary
from .world import WorldConfig, build_dataset, load_dataset, save_dataset


def _add_data_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", type=Path, required=True, help="dataset directory (from gen-data)")


def _add_out_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", type=Path, required=True, help="output directory for artifacts + manifest")


def _dims_from_args(args: argparse.Namespace) -> SpeakerDims:
    return SpeakerDims(
        enc_layers=args.enc_layers,
        dec_layers=args.dec_layers,
        hidden=args.hidden,
        heads=args.heads,
        ffn=args.ffn,
        max_len=args.max_len,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridref", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a procedural dataset")
    _add_out_arg(p)
    p.add_argument("--scenes", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, nargs=2, default=(4, 4), metavar=("ROWS", "COLS"))
    p.add_argument("--objects", type=int, nargs=2, default=(3, 6), metavar=("MIN", "MAX"))
    p.add_argument("--cell-px", type=int, default=32)
    p.add_argument("--n-regions", type=int, default=12)
    p.add_argument("--distractors", type=int, default=0, help="min same-category distractors (>=1 makes scenes hard)")
    p.add_argument("--no-positional-words", action="store_true")
    p.add_argument("--targets-per-scene", type=int, default=None)
    p.add_argument("--splits", type=float, nargs=3, default=(0.8, 0.1, 0.1), metavar=("TRAIN", "VAL", "TEST"))

    p = sub.add_parser("train-listener", help="train and freeze the learned grounder")
    _add_data_arg(p)
    _add_out_arg(p)
    p.add_argument("--hidden", type=int, default=48)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-sup", help="stage 1: supervised training (CE or MMI)")
    _add_data_arg(p)
    _add_out_arg(p)
    p.add_argument("--loss", choices=("ce", "mmi"), default="mmi")
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda", dest="lambda_weight", type=float, default=1.0)
    p.add_argument("--margin", type=float, default=0.1)
    p.add_argument("--enc-layers", type=int, default=2)
    p.add_argument("--dec-layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ffn", type=int, default=128)
    p.add_argument("--max-len", type=int, default=12)

    p = sub.add_parser("train-rl", help="stage 2: REINFORCE with grounding/CIDEr reward")
    _add_data_arg(p)
    _add_out_arg(p)
    p.add_argument("--init", type=Path, required=True, help="supervised checkpoint")
    p.add_argument("--reward", choices=("rec", "cider", "both"), default="both")
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--baseline", choices=("none", "greedy"), default="none")
    p.add_argument("--listener", type=Path, default=None, help="learned listener checkpoint (default: oracle)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("collect-history", help="collect failed groundings for refiner training")
    _add_data_arg(p)
    _add_out_arg(p)
    p.add_argument("--speaker", type=Path, required=True, help="reinforced checkpoint")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--beam-width", type=int, default=5)
    p.add_argument("--listener", type=Path, default=None)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-ireg", help="stage 3: collect history and round-robin train the refiner")
    _add_data_arg(p)
    _add_out_arg(p)
    p.add_argument("--init", type=Path, required=True, help="reinforced checkpoint")
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--beam-width", type=int, default=5)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--listener", type=Path, default=None)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="per-budget accuracy, CIDEr and rounds used on a split")
    _add_data_arg(p)
    _add_out_arg(p)
    p.add_argument("--speaker", type=Path, required=True)
    p.add_argument("--reinforced", type=Path, default=None, help="round-0 checkpoint (default: --speaker)")
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.add_argument("--max-round", type=int, default=5)
    p.add_argument("--beam-width", type=int, default=5)
    p.add_argument("--listener", type=Path, default=None)

    p = sub.add_parser("serve", help="start the HTTP session service")
    p.add_argument("--root", type=Path, default=None, help="root with data/ and checkpoints/ (default: $GRIDREF_ROOT)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def _listener_from(path: Path | None):
    return load_listener(path) if path is not None else OracleListener()


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = WorldConfig(
        grid_rows=args.grid[0],
        grid_cols=args.grid[1],
        cell_px=args.cell_px,
        min_objects=args.objects[0],
        max_objects=args.objects[1],
        n_regions=args.n_regions,
        positional_words=not args.no_positional_words,
        same_category_distractors=args.distractors,
    )
    manifest = ExperimentManifest.start(
        "gen-data",
        {"world": config.to_json(), "scenes": args.scenes, "targets_per_scene": args.targets_per_scene,
         "splits": list(args.splits)},
        {"seed": args.seed},
    )
    dataset = build_dataset(config, args.scenes, args.seed, args.targets_per_scene, tuple(args.splits))
    paths = save_dataset(dataset, args.out)
    stats = build_corpus_stats(dataset.reference_sets("train"))
    stats_path = args.out / "train_corpus_stats.json"
    save_corpus_stats(stats, stats_path)
    for name, path in {**paths, "train_corpus_stats": stats_path}.items():
        manifest.add_data_hash(name, path)
    manifest.metrics = {
        "samples": {split: len(dataset.split_samples(split)) for split in ("train", "val", "test")}
    }
    manifest.finish(args.out)
    print(f"dataset written to {args.out} ({len(dataset.scenes)} scenes, {len(dataset.samples)} samples)")
    return 0


def cmd_train_listener(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    cfg = ListenerTrainConfig(hidden=args.hidden, epochs=args.epochs, batch_size=args.batch_size,
                              learning_rate=args.lr)
    manifest = ExperimentManifest.start("train-listener", asdict(cfg), {"seed": args.seed})
    manifest.add_data_hash("samples", args.data / "samples.jsonl")
    listener, report = train_learned_listener(dataset, cfg, args.seed)
    out_path = args.out / "listener.pt"
    save_listener(listener, out_path)
    manifest.checkpoints["listener"] = str(out_path)
    manifest.metrics = report
    manifest.finish(args.out)
    print(f"listener val grounding accuracy: {report['val_accuracy']:.3f}")
    return 0


def cmd_train_sup(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    vocab = Vocabulary.for_world(dataset.config)
    dims = _dims_from_args(args)
    cfg = SupervisedConfig(
        loss=args.loss,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=args.seed,
        mmi=MMIConfig(lambda_weight=args.lambda_weight, margin=args.margin, negative_seed=args.seed),
    )
    manifest = ExperimentManifest.start("train-sup", {**asdict(cfg), "dims": dims.to_json()}, {"seed": args.seed})
    manifest.add_data_hash("samples", args.data / "samples.jsonl")
    speaker = Speaker(vocab, dims, init_seed=args.seed)
    report = train_supervised(speaker, dataset, cfg)
    out_path = args.out / f"speaker-{speaker.stage}.pt"
    save_speaker(speaker, out_path)
    manifest.checkpoints["speaker"] = str(out_path)
    manifest.metrics = report
    manifest.finish(args.out)
    print(f"stage {speaker.stage} checkpoint: {out_path} (final loss {report['loss_curve'][-1]:.4f})")
    return 0


def cmd_train_rl(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    speaker = load_speaker(args.init)
    cfg = RLConfig(
        beta=args.beta,
        temperature=args.temperature,
        baseline=args.baseline,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        steps=args.steps,
        reward_kind=args.reward,
        seed=args.seed,
    )
    manifest = ExperimentManifest.start("train-rl", asdict(cfg), {"seed": args.seed})
    manifest.add_data_hash("samples", args.data / "samples.jsonl")
    report = train_reinforced(speaker, dataset, _listener_from(args.listener), cfg)
    out_path = args.out / "speaker-reinforced.pt"
    save_speaker(speaker, out_path)
    manifest.checkpoints["speaker"] = str(out_path)
    manifest.metrics = {"mean_final_reward": sum(report["reward_curve"][-20:]) / min(20, len(report["reward_curve"]))}
    manifest.finish(args.out)
    print(f"reinforced checkpoint: {out_path}")
    return 0


def cmd_collect_history(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    speaker = load_speaker(args.speaker)
    manifest = ExperimentManifest.start(
        "collect-history", {"threshold": args.threshold, "beam_width": args.beam_width}, {"seed": args.seed}
    )
    history = collect_interaction_history(
        dataset, speaker, _listener_from(args.listener),
        threshold=args.threshold, seed=args.seed, beam_width=args.beam_width,
    )
    out_path = args.out / "history.jsonl"
    write_jsonl(out_path, (r.to_json() for r in history.records))
    manifest.add_data_hash("history", out_path)
    manifest.metrics = {
        "records": len(history.records),
        "failure_fraction": history.failure_fraction,
        "merged_size": history.merged_size,
    }
    manifest.finish(args.out)
    print(f"{len(history.records)} failure records ({history.failure_fraction:.1%}) -> {out_path}")
    return 0


def cmd_train_ireg(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    speaker = load_speaker(args.init)
    cfg = InteractiveConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        beam_width=args.beam_width,
        threshold=args.threshold,
        seed=args.seed,
    )
    manifest = ExperimentManifest.start("train-ireg", asdict(cfg), {"seed": args.seed})
    manifest.add_data_hash("samples", args.data / "samples.jsonl")
    history, report = train_interactive(speaker, dataset, _listener_from(args.listener), cfg)
    out_path = args.out / "speaker-ireg.pt"
    save_speaker(speaker, out_path)
    history_path = args.out / "history.jsonl"
    write_jsonl(history_path, (r.to_json() for r in history.records))
    manifest.checkpoints["speaker"] = str(out_path)
    manifest.add_data_hash("history", history_path)
    manifest.metrics = report
    manifest.finish(args.out)
    print(f"interactive checkpoint: {out_path} (failure fraction {report['failure_fraction']:.1%})")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    speaker = load_speaker(args.speaker)
    reinforced = load_speaker(args.reinforced) if args.reinforced else speaker
    manifest = ExperimentManifest.start(
        "eval",
        {"split": args.split, "max_round": args.max_round, "beam_width": args.beam_width},
        {},
    )
    manifest.add_data_hash("samples", args.data / "samples.jsonl")
    table, traces = evaluate_split(
        speaker, reinforced, _listener_from(args.listener), dataset, args.split,
        max_round=args.max_round, beam_width=args.beam_width,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    eval_path = args.out / "eval.json"
    eval_path.write_text(json.dumps(table.to_json(), indent=2, sort_keys=True))
    write_jsonl(args.out / "traces.jsonl", (t.to_json() for t in traces))
    manifest.metrics = table.to_json()
    manifest.finish(args.out)
    budgets = ", ".join(f"acc@{k}={a:.3f}" for k, a in zip(table.budgets, table.accuracy_by_budget))
    print(f"{args.split}: {budgets}, cider={table.cider_final:.3f}, mean rounds={table.mean_rounds:.2f}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(root=args.root)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-listener": cmd_train_listener,
    "train-sup": cmd_train_sup,
    "train-rl": cmd_train_rl,
    "collect-history": cmd_collect_history,
    "train-ireg": cmd_train_ireg,
    "eval": cmd_eval,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
