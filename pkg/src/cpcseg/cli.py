"""Command-line entry point.

Every subcommand shares ``--config`` (``key = value`` file of fine-tuning
settings), ``--seed``, ``--out`` and ``--checkpoint``.  Exit codes: 0 on
success, 1 for usage or configuration errors, 2 for runtime and numerics
failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .benchmark import WARMUP
from .data import (SynthConfig, load_dataset, make_episodes, resize_pair, write_dataset,
                   write_mask, generate_synthetic, released_masks)
from .encoder import EncoderConfig, init_toy_encoder, load_checkpoint, save_checkpoint
from .errors import CPCError, ConfigError
from .evaluation import (dump_features, eval_unseen, evaluate, random_support_study,
                         sweep_support)
from .finetune import FineTuneConfig, finetune_sup, run_strategy
from .supportsel import embedding_table, read_manifest, select_support, write_manifest

log = logging.getLogger("cpcseg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this CLI reserves 2 for runtime errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="key = value file of fine-tuning settings")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--checkpoint", type=Path,
                   help="encoder checkpoint; a fresh toy encoder is used when omitted")
    p.add_argument("--strategy", choices=["cpc", "sup-ft", "trans-ft", "none"],
                   help="overrides the config strategy")
    p.add_argument("--iterations", type=int, help="overrides the config iteration count")
    p.add_argument("--lr", type=float, help="overrides the config learning rate")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _dataset_args(p):
    p.add_argument("data", type=Path, help="dataset root with images/ and masks/")
    p.add_argument("--resize", type=int, help="resize every pair to this square size")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="cpcseg", description="Transductive fine-tuning for few-shot segmentation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-gen", parents=[common], help="write the synthetic two-domain benchmark")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--n-a", type=int, default=24)
    p.add_argument("--n-b", type=int, default=24)
    p.add_argument("--warm-fit", type=int, default=0, metavar="N",
                   help="also warm-fit a toy encoder on the first N domain-A images (base.npz)")

    p = sub.add_parser("select-support", parents=[common], help="pick representative support ids")
    _dataset_args(p)
    p.add_argument("-k", type=int, default=1)

    p = sub.add_parser("finetune", parents=[common], help="adapt an encoder to a support/query pool")
    _dataset_args(p)
    p.add_argument("--support", type=Path, required=True, help="support id file, one id per line")

    p = sub.add_parser("evaluate", parents=[common], help="score an encoder on the query set")
    _dataset_args(p)
    p.add_argument("--support", type=Path, required=True)
    p.add_argument("--no-masks", action="store_true", help="skip writing predicted masks")

    p = sub.add_parser("eval-unseen", parents=[common], help="two-fold seen/unseen protocol")
    _dataset_args(p)
    p.add_argument("-k", type=int, default=1)

    p = sub.add_parser("sweep-support", parents=[common], help="every image as the 1-shot support")
    _dataset_args(p)

    p = sub.add_parser("random-support-study", parents=[common],
                       help="random supports per seed plus the cluster-center choice")
    _dataset_args(p)
    p.add_argument("-k", type=int, default=1)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])

    p = sub.add_parser("dump-features", parents=[common], help="write per-pixel features with fg/bg labels")
    _dataset_args(p)
    return parser


def _config(args) -> FineTuneConfig:
    config = FineTuneConfig.from_file(args.config) if args.config else FineTuneConfig()
    overrides = {k: getattr(args, k) for k in ("seed", "strategy", "iterations", "lr")
                 if getattr(args, k) is not None}
    return config.replace(**overrides) if overrides else config


def _encoder(args, seed):
    if args.checkpoint:
        return load_checkpoint(args.checkpoint)
    log.warning("no --checkpoint given; using an untrained toy encoder (seed %d)", seed)
    return init_toy_encoder(EncoderConfig(), seed=seed)


def _dataset(args):
    ds = load_dataset(args.data)
    if args.resize:
        samples = []
        with released_masks():
            for s in ds.samples:
                image, mask = resize_pair(s.image, s.mask, args.resize)
                samples.append(replace(s, image=image, _mask=mask))
        ds = replace(ds, samples=samples)
    return ds


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))
    print(path)


def cmd_synth_gen(args, config):
    synth = SynthConfig(size=args.size, n_a=args.n_a, n_b=args.n_b, seed=config.seed)
    a, b = generate_synthetic(synth)
    write_dataset(a, args.out / "domain_a", {"domain": "A", **synth.to_dict()})
    write_dataset(b, args.out / "domain_b", {"domain": "B", **synth.to_dict()})
    print(args.out / "domain_a")
    print(args.out / "domain_b")
    if args.warm_fit:
        if args.warm_fit > len(a):
            raise ConfigError(f"--warm-fit {args.warm_fit} exceeds the {len(a)} domain-A images")
        enc = init_toy_encoder(EncoderConfig(), seed=config.seed)
        warm = a.subset(a.ids[:args.warm_fit])
        base, runlog = finetune_sup(enc, warm.samples, WARMUP.replace(seed=config.seed))
        save_checkpoint(base, args.out / "base.npz", {"warm_fit_ids": warm.ids})
        runlog.write_jsonl(args.out / "warmup_runlog.jsonl")
        print(args.out / "base.npz")


def cmd_select_support(args, config):
    ds = _dataset(args)
    ids = select_support(embedding_table(_encoder(args, config.seed), ds.samples), args.k, config.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    write_manifest(ids, args.out / "support.txt")
    print(args.out / "support.txt")


def cmd_finetune(args, config):
    ds = _dataset(args)
    support, queries = make_episodes(ds, read_manifest(args.support))
    encoder = _encoder(args, config.seed)
    tuned, runlog = run_strategy(encoder, support, queries, config,
                                 checkpoint_dir=args.out / "checkpoints")
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(tuned, args.out / "encoder.npz",
                    {"strategy": config.strategy, "config": config.to_dict()})
    runlog.write_jsonl(args.out / "runlog.jsonl")
    print(args.out / "encoder.npz")
    print(args.out / "runlog.jsonl")


def cmd_evaluate(args, config):
    ds = _dataset(args)
    support, queries = make_episodes(ds, read_manifest(args.support))
    report = evaluate(_encoder(args, config.seed), support, queries, config,
                      keep_predictions=not args.no_masks)
    if not args.no_masks:
        (args.out / "masks").mkdir(parents=True, exist_ok=True)
        for sid, pred in report.predictions.items():
            write_mask(args.out / "masks" / f"{sid}.png", pred)
    _write_json(args.out / "report.json", report.to_dict())
    print(f"mean IoU {report.mean_iou:.4f} over {len(report.per_image)} queries")


def cmd_eval_unseen(args, config):
    report = eval_unseen(_encoder(args, config.seed), _dataset(args), config, k=args.k)
    _write_json(args.out / "unseen.json", report.to_dict())
    print(f"seen {report.seen.mean_iou:.4f} unseen {report.unseen.mean_iou:.4f}")


def cmd_sweep_support(args, config):
    report = sweep_support(_encoder(args, config.seed), _dataset(args), config)
    _write_json(args.out / "sweep.json", report.to_dict())
    print(f"min {report.min:.4f} max {report.max:.4f} avg {report.avg:.4f} "
          f"rep {report.rep:.4f} ({report.rep_id})")


def cmd_random_support_study(args, config):
    rows = random_support_study(_encoder(args, config.seed), _dataset(args), args.k, args.seeds, config)
    _write_json(args.out / "random_support.json", rows)
    for row in rows:
        print(f"{row['seed']!s:>16}  {row['mean_iou']:.4f}  {' '.join(row['support'])}")


def cmd_dump_features(args, config):
    ds = _dataset(args)
    with released_masks():
        masks = [s.mask for s in ds.samples]
    print(dump_features(_encoder(args, config.seed), [s.image for s in ds.samples], masks,
                        args.out / "features.npz", ids=ds.ids))


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "select-support": cmd_select_support,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "eval-unseen": cmd_eval_unseen,
    "sweep-support": cmd_sweep_support,
    "random-support-study": cmd_random_support_study,
    "dump-features": cmd_dump_features,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _config(args)
        COMMANDS[args.command](args, config)
    except ConfigError as e:
        print(f"cpcseg: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CPCError, OSError) as e:
        print(f"cpcseg: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
