"""CLI for the attribute-operator composition engine."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Callable

from .checkpoint import load_checkpoint, save_checkpoint
from .config import EMBEDDER_INITS, PRESETS, TrainConfig, load_config
from .errors import InvariantViolation, NumericalError, ValidationError
from .evaluation import dump_embeddings, retrieve_topk
from .experiments import Experiment
from .formatters import (
    ablation_to_csv,
    format_ablation,
    format_ranking,
    format_report,
    format_stats_csv,
    format_tune,
    report_to_csv,
)
from .models import DatasetBundle, LossWeights, ModelParams, SyntheticSpec
from .parsers import load_dataset_dir, read_antonyms, read_object_vectors, read_pool
from .synthetic import generate_synthetic, write_synthetic
from .training import finite_diff_check, random_problem

logger = logging.getLogger(__name__)

GRADCHECK_THRESHOLD = 1e-4


def main(argv: Sequence[str] | None = None) -> int:
    """Main CLI entry point.

    Returns:
        0 on success, 1 on a failed check, 2 on invalid input or an I/O
        failure, 3 on a numerical failure.
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except InvariantViolation as e:
        print(f"Error: invariant violated: {e}", file=sys.stderr)
        return 1
    except ValidationError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attr-ops",
        description="Attribute operators for compositional zero-shot recognition",
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Verbose output")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="Generate a planted-operator dataset")
    synth.add_argument("--attrs", type=int, required=True, help="Number of attributes")
    synth.add_argument("--objs", type=int, required=True, help="Number of objects")
    synth.add_argument("--dim", type=int, required=True, help="Embedding dimension D")
    synth.add_argument(
        "--images-per-pair", type=int, default=10, help="Images per pair (default: 10)"
    )
    synth.add_argument(
        "--unseen-frac", type=float, default=0.2, help="Unseen share (default: 0.2)"
    )
    synth.add_argument("--noise", type=float, default=0.0, help="Feature noise std")
    synth.add_argument(
        "--perturb", type=float, default=0.2, help="Operator perturbation (default: 0.2)"
    )
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--antonym-pairs", type=int, default=0, help="Antonym pairs")
    synth.add_argument(
        "--held-out-objects", type=int, default=0, help="Out-of-domain objects"
    )
    synth.add_argument(
        "--misspecified", action="store_true", help="Pass features through a nonlinearity"
    )
    synth.add_argument("--out", type=Path, required=True, help="Output dataset directory")
    synth.set_defaults(handler=_cmd_synth)

    train = commands.add_parser("train", help="Train a model on a dataset directory")
    _add_train_options(train)
    train.add_argument("--antonyms", type=Path, help="Replaces antonyms.txt")
    train.add_argument("--out", type=Path, required=True, help="Checkpoint to write")
    train.add_argument(
        "--stats", type=Path, help="Per-epoch stats CSV (default: <out>.stats.csv)"
    )
    train.set_defaults(handler=_cmd_train)

    ev = commands.add_parser("eval", help="Evaluate a checkpoint on the unseen pairs")
    ev.add_argument("--data", type=Path, required=True, help="Dataset directory")
    ev.add_argument("--ckpt", type=Path, required=True, help="Checkpoint to evaluate")
    ev.add_argument("--world", choices=["open", "closed", "both"], default="both")
    ev.add_argument("--obj-oracle", action="store_true", help="Also show +obj accuracy")
    ev.add_argument(
        "--oracle-world",
        choices=["open", "closed"],
        default="open",
        help="Candidate world of the +obj oracle (default: open)",
    )
    ev.add_argument("--report", type=Path, help="Write the report as CSV")
    ev.add_argument("--json", action="store_true", help="Output as JSON")
    ev.set_defaults(handler=_cmd_eval)

    retrieve = commands.add_parser("retrieve", help="Rank pool images for a composition")
    retrieve.add_argument("--ckpt", type=Path, required=True)
    retrieve.add_argument("--attr", required=True, help="Attribute name")
    source = retrieve.add_mutually_exclusive_group(required=True)
    source.add_argument("--obj", help="Object name from the checkpoint vocabulary")
    source.add_argument("--obj-vec", type=Path, help="Object vector file (new objects)")
    retrieve.add_argument("--obj-name", help="Entry of --obj-vec to use (default: first)")
    retrieve.add_argument("--pool", type=Path, required=True, help="Image feature pool")
    retrieve.add_argument("--k", type=int, default=5, help="Results (default: 5)")
    retrieve.set_defaults(handler=_cmd_retrieve)

    gradcheck = commands.add_parser("gradcheck", help="Finite-difference gradient check")
    gradcheck.add_argument("--dim", type=int, default=8)
    gradcheck.add_argument("--attrs", type=int, default=5)
    gradcheck.add_argument("--objs", type=int, default=7)
    gradcheck.add_argument("--eps", type=float, default=1e-5)
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--seeds", type=int, default=1, help="Seeds to check")
    for term in ("triplet", "aux", "inv", "comm", "ant"):
        gradcheck.add_argument(f"--w-{term}", type=float, default=1.0)
    gradcheck.set_defaults(handler=_cmd_gradcheck)

    dump = commands.add_parser("dump-embeddings", help="Write every pair embedding")
    dump.add_argument("--ckpt", type=Path, required=True)
    dump.add_argument("--out", type=Path, required=True)
    dump.set_defaults(handler=_cmd_dump)

    tune = commands.add_parser("tune", help="Pick w_aux on held-out training pairs")
    _add_train_options(tune)
    tune.add_argument("--grid", type=float, nargs="+", default=list(Experiment.TUNE_GRID))
    tune.add_argument("--fraction", type=float, default=0.2, help="Seen pairs held out")
    tune.set_defaults(handler=_cmd_tune)

    ablate = commands.add_parser("ablate", help="Train without each regularizer in turn")
    _add_train_options(ablate)
    ablate.add_argument("--report", type=Path, help="Write the ablation table as CSV")
    ablate.set_defaults(handler=_cmd_ablate)
    return parser


def _add_train_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", type=Path, required=True, help="Dataset directory")
    parser.add_argument("--preset", choices=list(PRESETS), default="synthetic")
    parser.add_argument("--config", type=Path, help="YAML overrides for the preset")
    parser.add_argument("--dim", type=int, help="Embedding dimension")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--lr", type=float, dest="lr_main", help="Learning rate")
    parser.add_argument("--lr-attr", type=float, help="Attribute operator learning rate")
    parser.add_argument("--batch", type=int, dest="batch_size")
    parser.add_argument("--w-aux", type=float)
    parser.add_argument("--w-inv", type=float)
    parser.add_argument("--w-comm", type=float)
    parser.add_argument("--w-ant", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int, help="Threads per batch (default: 1)")
    parser.add_argument(
        "--deterministic", action="store_true", default=None, help="Reproducible run"
    )
    parser.add_argument(
        "--freeze-objects", action=argparse.BooleanOptionalAction, default=None
    )
    parser.add_argument(
        "--embedder-init", choices=list(EMBEDDER_INITS), help="Embedder start point"
    )
    parser.add_argument("--detach-inverse", action="store_true", default=None)


def _train_config(args: argparse.Namespace) -> TrainConfig:
    """Preset, then --config file, then explicit flags."""
    config = TrainConfig.from_preset(args.preset)
    if args.config is not None:
        config = config.with_overrides(**load_config(args.config))
    flags: dict[str, Any] = {
        name: getattr(args, name)
        for name in (
            "dim", "epochs", "lr_main", "lr_attr", "batch_size",
            "w_aux", "w_inv", "w_comm", "w_ant", "seed", "workers",
            "deterministic", "freeze_objects", "detach_inverse", "embedder_init",
        )
    }
    return config.with_overrides(**flags)


def _cmd_synth(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(
        n_attrs=args.attrs,
        n_objs=args.objs,
        dim=args.dim,
        images_per_pair=args.images_per_pair,
        unseen_fraction=args.unseen_frac,
        noise_sigma=args.noise,
        operator_perturbation=args.perturb,
        seed=args.seed,
        antonym_pairs=args.antonym_pairs,
        held_out_objects=args.held_out_objects,
        misspecified=args.misspecified,
    )
    bundle, truth = generate_synthetic(spec)
    write_synthetic(bundle, truth, args.out)
    print(
        f"Wrote {len(bundle.seen_pairs)} seen / {len(bundle.unseen_pairs)} unseen pairs, "
        f"{len(bundle.train)} train / {len(bundle.test)} test images to {args.out}"
    )
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    data = load_dataset_dir(args.data)
    if args.antonyms is not None:
        data.antonyms = read_antonyms(args.antonyms, data.vocab)
    config = _train_config(args)
    params, stats = Experiment(data, config).train()
    save_checkpoint(params, args.out)
    stats_path = args.stats or args.out.with_suffix(".stats.csv")
    stats_path.write_text(format_stats_csv(stats, deterministic=config.deterministic))
    final = f", final loss {stats.epochs[-1].total:.6f}" if stats.epochs else ""
    print(f"Trained {len(stats)} epochs{final}; wrote {args.out} and {stats_path}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    data = load_dataset_dir(args.data)
    params = _load_for(args.ckpt, data)
    experiment = Experiment(data, TrainConfig())
    report = experiment.evaluate(params, oracle_world=args.oracle_world)
    if args.report is not None:
        args.report.write_text(report_to_csv(report))
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        worlds = ("closed", "open") if args.world == "both" else (args.world,)
        print(format_report(report, worlds=worlds, obj_oracle=args.obj_oracle))
    return 0


def _cmd_retrieve(args: argparse.Namespace) -> int:
    params = load_checkpoint(args.ckpt)
    vocab = params.vocab
    if not vocab.has_attr(args.attr):
        raise ValidationError(f"unknown attribute '{args.attr}'")
    if args.obj is not None:
        if not vocab.has_obj(args.obj):
            raise ValidationError(
                f"unknown object '{args.obj}'; use --obj-vec for new objects"
            )
        obj_vec = params.objects.vectors[vocab.obj_index(args.obj)]
    else:
        vectors = read_object_vectors(args.obj_vec)
        name = args.obj_name or next(iter(vectors))
        if name not in vectors:
            raise ValidationError(f"no vector named '{name}' in {args.obj_vec}")
        obj_vec = vectors[name]
    pool = read_pool(args.pool)
    ranked = retrieve_topk(params, vocab.attr_index(args.attr), obj_vec, pool, args.k)
    print(format_ranking(ranked))
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    weights = LossWeights(
        w_triplet=args.w_triplet,
        w_aux=args.w_aux,
        w_inv=args.w_inv,
        w_comm=args.w_comm,
        w_ant=args.w_ant,
    )
    worst = 0.0
    for seed in range(args.seed, args.seed + args.seeds):
        problem = random_problem(args.dim, args.attrs, args.objs, seed)
        error = finite_diff_check(
            problem.params, problem.batch, problem.negatives, weights,
            eps=args.eps, antonyms=problem.antonyms, seed=seed,
        )
        logger.info("seed %d: max relative error %.3e", seed, error)
        worst = max(worst, error)
    status = "PASS" if worst <= GRADCHECK_THRESHOLD else "FAIL"
    print(f"max relative error: {worst:.3e} over {args.seeds} seed(s) [{status}]")
    return 0 if status == "PASS" else 1


def _cmd_dump(args: argparse.Namespace) -> int:
    rows = dump_embeddings(load_checkpoint(args.ckpt), args.out)
    print(f"Wrote {rows} pair embeddings to {args.out}")
    return 0


def _cmd_tune(args: argparse.Namespace) -> int:
    data = load_dataset_dir(args.data)
    experiment = Experiment(data, _train_config(args))
    result = experiment.tune(grid=args.grid, fraction=args.fraction)
    print(format_tune(result))
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    data = load_dataset_dir(args.data)
    report = Experiment(data, _train_config(args)).ablate()
    if args.report is not None:
        args.report.write_text(ablation_to_csv(report))
    print(format_ablation(report))
    return 0


def _load_for(path: Path, data: DatasetBundle) -> ModelParams:
    params = load_checkpoint(path)
    if params.vocab != data.vocab:
        raise ValidationError(f"{path}: checkpoint vocabulary does not match the dataset")
    if params.feat_dim != data.feat_dim:
        raise ValidationError(
            f"{path}: checkpoint expects {params.feat_dim}-dimensional features, "
            f"dataset has {data.feat_dim}"
        )
    return params


if __name__ == "__main__":
    sys.exit(main())
