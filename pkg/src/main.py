# Copyright (c) 2026 Mark Ferrell. MIT License.
"""Main entry point for the universal representation toolkit.

This module parses the command line, merges key-value config files, routes
each subcommand to its handler and maps errors to exit codes:

    0  success
    1  usage error
    2  data, dataset or checkpoint error
    3  numeric or training error

Examples:
    python -m src.main gen --out data --seed 1
    python -m src.main train-sdl --data data --domain domain0 --out domain0.ckpt --seed 1
    python -m src.main train-url --data data --teachers domain0.ckpt domain1.ckpt domain2.ckpt \\
        --feature-loss cka --kl --out url.ckpt --seed 1
    python -m src.main eval --data data --model url.ckpt --classifier ncc-adapt --episodes 600
    python -m src.main sweep --seed 0 --num-seeds 5 --out sweep.csv --claims claims.csv
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import NoReturn

import numpy as np

from src.config import load_config_file
from src.data import (
    REGIMES,
    DomainDataset,
    SyntheticSpec,
    generate_synthetic,
    load_datasets,
    load_feature_matrix,
    save_datasets,
    save_feature_matrix,
)
from src.errors import DataError, UrlKitError, UsageError
from src.evaluation import (
    AdaptConfig,
    EvalRow,
    best_sdl,
    evaluate_episodes,
    evaluate_retrieval,
    evaluate_sdl_matrix,
)
from src.losses import KernelSpec, cka_dissimilarity
from src.nets import DomainNet, Model, NetConfig, forward_features, load_checkpoint, save_checkpoint
from src.optim import SgdConfig
from src.report import (
    claims_csv,
    claims_table,
    eval_csv,
    eval_table,
    retrieval_csv,
    retrieval_table,
    sweep_csv,
    sweep_table,
    trace_csv,
    write_text,
)
from src.sweep import SweepConfig, check_claims, run_sweep
from src.train import DistillConfig, TrainTrace, train_mdl, train_single_domain, train_url

logger = logging.getLogger(__name__)

CLASSIFIERS = ("ncc", "ncc-adapt", "ncc-md")
FEATURE_LOSSES = ("cka", "l2", "cosine", "none")
KERNELS = ("linear", "rbf")
TRUTHY = ("1", "true", "yes", "on")
FALSY = ("0", "false", "no", "off")


class UsageParser(argparse.ArgumentParser):
    """ArgumentParser that raises ``UsageError`` instead of exiting."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        raise UsageError(message)


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def int_list(text: str) -> list[int]:
    """Parse ``"1,2,4"`` into ``[1, 2, 4]``."""
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from e


def str_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in TRUTHY:
        return True
    if lowered in FALSY:
        return False
    raise UsageError(f"Expected a boolean, got '{text}'")


@dataclass
class RunConfig:
    """Resolved settings of one command."""

    command: str
    seed: int
    data: Path | None = None
    checkpoints: list[Path] = field(default_factory=list)
    output: Path | None = None
    regime: str | None = None
    classifier: str | None = None
    feature_loss: str | None = None
    kernel: str | None = None
    episodes: int | None = None

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise UsageError(f"--seed must be non-negative, got {self.seed}")
        for path in [self.data, *self.checkpoints]:
            if path is not None and not path.exists():
                raise UsageError(f"Path '{path}' does not exist")

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> RunConfig:
        checkpoints = [getattr(args, name) for name in ("model", "a", "b") if getattr(args, name, None)]
        checkpoints += getattr(args, "teachers", None) or []
        data = getattr(args, "data", None)
        out = getattr(args, "out", None)
        return cls(
            command=args.command,
            seed=args.seed,
            data=Path(data) if data else None,
            checkpoints=[Path(p) for p in checkpoints],
            output=Path(out) if out else None,
            regime=getattr(args, "regime", None),
            classifier=getattr(args, "classifier", None),
            feature_loss=getattr(args, "feature_loss", None),
            kernel=getattr(args, "kernel", None),
            episodes=getattr(args, "episodes", None),
        )


def configure_logging(debug: bool) -> None:
    """Configure logging based on debug flag.

    Args:
        debug: If True, enable DEBUG level logging.
    """
    level = logging.DEBUG if debug else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s: %(message)s")


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Key-value config file; flags override its values")
    common.add_argument("--seed", type=int, default=0, help="Root seed (default: 0)")
    common.add_argument(
        "--debug",
        action="store_true",
        default=os.environ.get("URLKIT_DEBUG", "false").lower() == "true",
        help="Enable debug logging (default: from URLKIT_DEBUG env)",
    )
    return common


def _add_net_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--hidden", type=int_list, default=[64, 64], help="Hidden widths (default: 64,64)")
    parser.add_argument("--feature-dim", type=positive_int, default=32, help="Feature width d (default: 32)")


def _add_sgd_args(parser: argparse.ArgumentParser, trace: bool = True) -> None:
    defaults = SgdConfig()
    parser.add_argument("--lr", type=float, default=defaults.lr)
    parser.add_argument("--momentum", type=float, default=defaults.momentum)
    parser.add_argument("--weight-decay", type=float, default=defaults.weight_decay)
    parser.add_argument("--anneal-freq", type=positive_int, default=defaults.anneal_freq)
    parser.add_argument("--max-iter", type=int, default=defaults.max_iter)
    parser.add_argument("--batch-size", type=positive_int, default=defaults.batch_size)
    parser.add_argument(
        "--clip-norm",
        type=float,
        default=defaults.clip_norm,
        help=f"Global gradient-norm bound; 0 disables (default: {defaults.clip_norm})",
    )
    parser.add_argument("--val-episodes", type=int, default=20, help="Validation episodes per domain; 0 disables")
    if trace:
        parser.add_argument("--trace", help="Write the training trace CSV here")


def build_parser() -> UsageParser:
    """Build the argument parser with one subparser per command."""
    common = _common_parser()
    parser = UsageParser(
        prog="urlkit",
        description="Universal representation distillation toolkit",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Environment Variables:
  URLKIT_DEBUG    Enable debug logging (true/false)

Examples:
  python -m src.main gen --out data --seed 1
  python -m src.main train-sdl --data data --domain domain0 --out domain0.ckpt
  python -m src.main eval --data data --model url.ckpt --classifier ncc-adapt
  python -m src.main sweep --num-seeds 5 --out sweep.csv
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=UsageParser)

    spec = SyntheticSpec()
    gen = sub.add_parser("gen", parents=[common], help="Generate synthetic datasets")
    gen.add_argument("--out", required=True, help="Dataset root directory")
    gen.add_argument("--domains", type=positive_int, default=spec.num_domains)
    gen.add_argument("--unseen", type=int, default=spec.unseen_domains, help="Held-out domains")
    gen.add_argument("--train-classes", type=positive_int, default=spec.train_classes)
    gen.add_argument("--val-classes", type=positive_int, default=spec.val_classes)
    gen.add_argument("--test-classes", type=positive_int, default=spec.test_classes)
    gen.add_argument("--samples-per-class", type=positive_int, default=spec.samples_per_class)
    gen.add_argument("--latent-dim", type=positive_int, default=spec.latent_dim)
    gen.add_argument("--input-dim", type=positive_int, default=spec.input_dim)
    gen.add_argument("--noise", type=float, default=spec.noise_scale)
    gen.add_argument("--mixing", type=float, default=spec.domain_mixing)

    sdl = sub.add_parser("train-sdl", parents=[common], help="Train one single-domain teacher")
    sdl.add_argument("--data", required=True)
    sdl.add_argument("--domain", required=True)
    sdl.add_argument("--out", required=True, help="Checkpoint path")
    _add_net_args(sdl)
    _add_sgd_args(sdl)

    mdl = sub.add_parser("train-mdl", parents=[common], help="Train the multi-domain baseline")
    mdl.add_argument("--data", required=True)
    mdl.add_argument("--out", required=True)
    mdl.add_argument("--batch-weights", type=int_list, help="Per-domain batch multipliers, e.g. 2,1,1")
    _add_net_args(mdl)
    _add_sgd_args(mdl)

    distill = DistillConfig()
    url = sub.add_parser("train-url", parents=[common], help="Distil teachers into one model")
    url.add_argument("--data", required=True)
    url.add_argument("--teachers", nargs="+", required=True, help="Single-domain checkpoints")
    url.add_argument("--out", required=True)
    url.add_argument("--batch-weights", type=int_list)
    url.add_argument("--feature-loss", choices=FEATURE_LOSSES, default=distill.feature_loss)
    url.add_argument("--kl", action="store_true", help="Add the KL prediction term")
    url.add_argument("--kernel", choices=KERNELS, default=distill.kernel.kind)
    url.add_argument("--sigma", type=float, help="Fixed RBF bandwidth (default: median heuristic)")
    url.add_argument("--lambda-p", type=float, default=distill.lambda_p)
    url.add_argument("--lambda-f", type=float, default=distill.lambda_f)
    url.add_argument("--anchor", help="Domain whose weights use --anchor-multiplier")
    url.add_argument("--anchor-multiplier", type=float, default=distill.anchor_multiplier)
    url.add_argument("--anneal-periods", type=positive_int, default=distill.anneal_periods)
    url.add_argument("--no-anneal", action="store_true", help="Keep distillation weights constant")
    url.add_argument("--ce-weight", type=float, default=distill.ce_weight)
    _add_net_args(url)
    _add_sgd_args(url)

    adapt = AdaptConfig()
    ev = sub.add_parser("eval", parents=[common], help="Few-shot episode evaluation")
    ev.add_argument("--data", required=True)
    ev.add_argument("--model", required=True)
    ev.add_argument("--classifier", choices=CLASSIFIERS, default="ncc")
    ev.add_argument("--regime", choices=REGIMES, default="varying")
    ev.add_argument("--episodes", type=positive_int, default=600)
    ev.add_argument("--adapt-lr", type=float, default=adapt.lr)
    ev.add_argument("--adapt-iters", type=int, default=adapt.iterations)
    ev.add_argument("--ridge", type=float, help="Mahalanobis ridge (default: 1e-3 · tr(Σ)/d)")
    ev.add_argument("--workers", type=positive_int, default=1)
    ev.add_argument("--out", help="Report CSV path")

    ev_sdl = sub.add_parser("eval-sdl", parents=[common], help="Evaluate every teacher on every dataset")
    ev_sdl.add_argument("--data", required=True)
    ev_sdl.add_argument("--teachers", nargs="+", required=True)
    ev_sdl.add_argument("--classifier", choices=CLASSIFIERS, default="ncc")
    ev_sdl.add_argument("--regime", choices=REGIMES, default="varying")
    ev_sdl.add_argument("--episodes", type=positive_int, default=600)
    ev_sdl.add_argument("--workers", type=positive_int, default=1)
    ev_sdl.add_argument("--out")

    ret = sub.add_parser("retrieval", parents=[common], help="Recall@k on test features")
    ret.add_argument("--data", required=True)
    ret.add_argument("--model", required=True)
    ret.add_argument("--k", type=int_list, default=[1, 2, 4, 8])
    ret.add_argument("--out")

    cka = sub.add_parser("cka", parents=[common], help="CKA dissimilarity of two feature matrices")
    cka.add_argument("--a", required=True)
    cka.add_argument("--b", required=True)
    cka.add_argument("--kernel", choices=KERNELS, default="linear")
    cka.add_argument("--sigma", type=float)

    feats = sub.add_parser("features", parents=[common], help="Export backbone features of one dataset split")
    feats.add_argument("--data", required=True)
    feats.add_argument("--model", required=True)
    feats.add_argument("--domain", required=True)
    feats.add_argument("--split", choices=("train", "val", "test"), default="test")
    feats.add_argument("--out", required=True)

    sweep = sub.add_parser("sweep", parents=[common], help="Multi-seed comparison of MDL and URL variants")
    sweep.add_argument("--num-seeds", type=positive_int, default=5, help="Seeds --seed, --seed+1, ... (default: 5)")
    sweep.add_argument("--domains", type=positive_int, default=spec.num_domains)
    sweep.add_argument("--episodes", type=positive_int, default=600)
    sweep.add_argument("--adapt-lr", type=float, default=adapt.lr)
    sweep.add_argument("--adapt-iters", type=int, default=adapt.iterations)
    sweep.add_argument("--workers", type=positive_int, default=1)
    sweep.add_argument("--out", help="Per-seed results CSV path")
    sweep.add_argument("--claims", help="Comparison results CSV path")
    _add_net_args(sweep)
    _add_sgd_args(sweep, trace=False)
    return parser


def _apply_config_file(parser: UsageParser, argv: Sequence[str]) -> None:
    """Install values from ``--config`` as defaults of the chosen subcommand."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config or not known.command:
        return
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    subparser = subparsers.choices.get(known.command)
    if subparser is None:
        return
    actions = {a.dest: a for a in subparser._actions}
    values: dict[str, object] = {}
    for key, raw in load_config_file(known.config).items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise UsageError(f"Config key '{key}' is not an option of '{known.command}'")
        if isinstance(action, argparse._StoreTrueAction):
            values[key] = str_bool(raw)
        elif action.nargs == "+":
            values[key] = raw.split()
        else:
            values[key] = raw
    subparser.set_defaults(**values)
    # string defaults are converted by argparse, but required options still demand a flag
    for key in values:
        actions[key].required = False


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    """Parse ``argv`` with flag > config file > default precedence.

    Raises:
        UsageError: Unknown flags, bad values or a bad config file.
    """
    parser = build_parser()
    _apply_config_file(parser, argv)
    return parser.parse_args(list(argv))


def _training_sets(root: str) -> list[DomainDataset]:
    datasets = [ds for ds in load_datasets(root) if ds.seen]
    if not datasets:
        raise DataError(f"No seen domains under '{root}'")
    return datasets


def _net_config(args: argparse.Namespace, input_dim: int) -> NetConfig:
    return NetConfig(input_dim=input_dim, hidden=tuple(args.hidden), feature_dim=args.feature_dim)


def _sgd_config(args: argparse.Namespace) -> SgdConfig:
    try:
        return SgdConfig(
            lr=args.lr,
            momentum=args.momentum,
            weight_decay=args.weight_decay,
            anneal_freq=args.anneal_freq,
            max_iter=args.max_iter,
            batch_size=args.batch_size,
            clip_norm=args.clip_norm or None,
        )
    except ValueError as e:
        raise UsageError(str(e)) from e


def _finish_training(model: Model, trace: TrainTrace, args: argparse.Namespace) -> None:
    save_checkpoint(model, args.out)
    if args.trace:
        write_text(trace_csv(trace), args.trace)


def _load_teacher(path: str) -> DomainNet:
    model = load_checkpoint(path)
    if not isinstance(model, DomainNet):
        raise UsageError(f"'{path}' is not a single-domain checkpoint")
    return model


def _emit(text: str, out: str | None, table: str) -> None:
    if out:
        write_text(text, out)
    sys.stdout.write(table)


def handle_gen(args: argparse.Namespace) -> None:
    """Generate and save synthetic datasets."""
    try:
        spec = SyntheticSpec(
            num_domains=args.domains,
            train_classes=args.train_classes,
            val_classes=args.val_classes,
            test_classes=args.test_classes,
            samples_per_class=args.samples_per_class,
            latent_dim=args.latent_dim,
            input_dim=args.input_dim,
            noise_scale=args.noise,
            domain_mixing=args.mixing,
            unseen_domains=args.unseen,
        )
    except ValueError as e:
        raise UsageError(str(e)) from e
    save_datasets(generate_synthetic(spec, args.seed), args.out)


def handle_train_sdl(args: argparse.Namespace) -> None:
    """Train and save one single-domain teacher."""
    dataset = load_datasets(args.data, [args.domain])[0]
    net, trace = train_single_domain(
        dataset, _net_config(args, dataset.input_dim), _sgd_config(args), args.seed, args.val_episodes
    )
    _finish_training(net, trace, args)


def handle_train_mdl(args: argparse.Namespace) -> None:
    """Train and save the multi-domain baseline on all seen domains."""
    datasets = _training_sets(args.data)
    model, trace = train_mdl(
        datasets,
        _net_config(args, datasets[0].input_dim),
        _sgd_config(args),
        args.seed,
        args.batch_weights,
        args.val_episodes,
    )
    _finish_training(model, trace, args)


def handle_train_url(args: argparse.Namespace) -> None:
    """Distil the given teachers into one model over all seen domains."""
    datasets = _training_sets(args.data)
    teachers = {net.domain: net for net in map(_load_teacher, args.teachers)}
    try:
        distill = DistillConfig(
            feature_loss=args.feature_loss,
            use_kl=args.kl,
            kernel=KernelSpec(args.kernel, sigma=args.sigma),
            lambda_p=args.lambda_p,
            lambda_f=args.lambda_f,
            anchor_domain=args.anchor,
            anchor_multiplier=args.anchor_multiplier,
            anneal=not args.no_anneal,
            anneal_periods=args.anneal_periods,
            ce_weight=args.ce_weight,
        )
    except ValueError as e:
        raise UsageError(str(e)) from e
    model, trace = train_url(
        datasets,
        teachers,
        _net_config(args, datasets[0].input_dim),
        distill,
        _sgd_config(args),
        args.seed,
        args.batch_weights,
        args.val_episodes,
    )
    _finish_training(model, trace, args)


def handle_eval(args: argparse.Namespace) -> None:
    """Evaluate a checkpoint on test-split episodes of every dataset."""
    model = load_checkpoint(args.model)
    try:
        adapt = AdaptConfig(iterations=args.adapt_iters, lr=args.adapt_lr)
    except ValueError as e:
        raise UsageError(str(e)) from e
    rows: list[EvalRow] = [
        evaluate_episodes(
            ds, model, args.classifier, args.regime, args.episodes, args.seed, adapt, args.ridge, workers=args.workers
        )
        for ds in load_datasets(args.data)
    ]
    _emit(eval_csv(rows), args.out, eval_table(rows))


def handle_eval_sdl(args: argparse.Namespace) -> None:
    """Evaluate every teacher on every dataset and report the best per dataset."""
    teachers = {net.domain: net for net in map(_load_teacher, args.teachers)}
    rows = evaluate_sdl_matrix(
        load_datasets(args.data), teachers, args.classifier, args.regime, args.episodes, args.seed, args.workers
    )
    rows += best_sdl(rows)
    _emit(eval_csv(rows), args.out, eval_table(rows))


def handle_retrieval(args: argparse.Namespace) -> None:
    """Recall@k of a checkpoint's test features on every dataset."""
    if not args.k or any(k < 1 for k in args.k):
        raise UsageError(f"--k needs positive integers, got {args.k}")
    model = load_checkpoint(args.model)
    rows = [evaluate_retrieval(ds, model, args.k) for ds in load_datasets(args.data)]
    _emit(retrieval_csv(rows), args.out, retrieval_table(rows))


def handle_cka(args: argparse.Namespace) -> None:
    """Print the CKA dissimilarity of two feature matrices."""
    a = load_feature_matrix(args.a)
    b = load_feature_matrix(args.b)
    if a.shape[0] != b.shape[0]:
        raise DataError(f"Feature files have {a.shape[0]} and {b.shape[0]} rows")
    value = cka_dissimilarity(a, b, KernelSpec(args.kernel, sigma=args.sigma)).item()
    # rounding can leave a tiny negative residue for identical inputs
    sys.stdout.write(f"{max(value, 0.0):.6f}\n")


def handle_sweep(args: argparse.Namespace) -> None:
    """Train and score MDL and every URL variant over several seeds, then compare them."""
    try:
        config = SweepConfig(
            seeds=tuple(range(args.seed, args.seed + args.num_seeds)),
            benchmark=SyntheticSpec(num_domains=args.domains),
            hidden=tuple(args.hidden),
            feature_dim=args.feature_dim,
            sgd=_sgd_config(args),
            episodes=args.episodes,
            adapt=AdaptConfig(iterations=args.adapt_iters, lr=args.adapt_lr),
            val_episodes=args.val_episodes,
            workers=args.workers,
        )
    except ValueError as e:
        raise UsageError(str(e)) from e
    rows = run_sweep(config)
    claims = check_claims(rows)
    if args.claims:
        write_text(claims_csv(claims), args.claims)
    _emit(sweep_csv(rows), args.out, sweep_table(rows) + "\n" + claims_table(claims))


def handle_features(args: argparse.Namespace) -> None:
    """Write backbone features of one dataset split in the feature-matrix format."""
    model = load_checkpoint(args.model)
    dataset = load_datasets(args.data, [args.domain])[0]
    feats = forward_features(model.backbone, dataset.splits[args.split].x).data
    save_feature_matrix(np.ascontiguousarray(feats), args.out)


HANDLERS: dict[str, Callable[[argparse.Namespace], None]] = {
    "gen": handle_gen,
    "train-sdl": handle_train_sdl,
    "train-mdl": handle_train_mdl,
    "train-url": handle_train_url,
    "eval": handle_eval,
    "eval-sdl": handle_eval_sdl,
    "retrieval": handle_retrieval,
    "cka": handle_cka,
    "features": handle_features,
    "sweep": handle_sweep,
}


def dispatch(argv: Sequence[str]) -> int:
    """Run one command and return its exit code."""
    try:
        args = parse_args(argv)
        configure_logging(args.debug)
        run = RunConfig.from_args(args)
        logger.debug("Running %s", run)
        HANDLERS[args.command](args)
    except UsageError as e:
        logger.error("Usage error: %s", e)
        return e.exit_code
    except UrlKitError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except ValueError as e:
        logger.error("Invalid value: %s", e)
        return UsageError.exit_code
    except SystemExit as e:
        # --help and --version exit through argparse
        return int(e.code or 0)
    return 0


def main() -> None:
    """Main entry point for the CLI."""
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":  # pragma: no cover
    main()
