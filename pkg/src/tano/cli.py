"""``tano`` command line interface.

Subcommands: gen-data, pretrain, meta-train, eval, analyze. Exit codes:
0 success, 2 validation error, 3 numeric failure, 4 I/O or format error.
Every run is seeded; omitting --seed is an error when not attached to a
terminal so scripted runs are always reproducible.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .errors import FormatError, NumericError, ValidationError
from .rng import seed_key


def _require_seed(args):
    if args.seed is None:
        if sys.stdin.isatty():
            print("note: --seed not given, defaulting to 0", file=sys.stderr)
            return 0
        raise ValidationError("--seed is required in non-interactive use")
    return args.seed


def _cmd_gen_data(args):
    seed = _require_seed(args)
    specs = D.default_domain_specs()[:args.domains]
    if len(specs) < args.domains:
        raise ValidationError(
            f"only {len(D.default_domain_specs())} default domains available")
    ds = D.generate_synthetic_domains(specs=specs, num_classes=args.classes,
                                      images_per_class=args.per_class, seed=seed)
    D.write_dataset(ds, args.out)
    print(f"wrote {len(ds.images)} blobs to {args.out}")


def _cmd_pretrain(args):
    from .normalization import GroupWorkerBank
    from .training import ModelState, TrainConfig, save_checkpoint
    from .coordinator import coordinator_init
    from .encoder import EMBED_DIM
    from .training import pretrain_backbone

    seed = _require_seed(args)
    ds = D.read_dataset(args.data)
    weights, bank, info = pretrain_backbone(ds, args.epochs, args.lr, seed)
    config = TrainConfig(seed=seed, pretrain_epochs=args.epochs,
                         pretrain_lr=args.lr,
                         num_workers=bank.num_domains)
    coord = coordinator_init(EMBED_DIM, bank.num_domains,
                             seed_key(seed, "coordinator"))
    state = ModelState(encoder=weights, coordinator=coord, bank=bank,
                       domain_ids=sorted(ds.domain_ids))
    save_checkpoint(args.out, state, config, epoch=-1,
                    history=info["history"])
    final = info["history"][-1]
    print(f"pretrained {args.epochs} epochs: loss {final['loss']:.4f} "
          f"acc {final['acc']:.3f} -> {args.out}")


def _cmd_meta_train(args):
    from .training import TrainConfig, load_checkpoint, meta_train_loop

    seed = _require_seed(args)
    ds = D.read_dataset(args.data)
    config = TrainConfig(
        seed=seed, num_workers=args.workers, protocol=args.protocol,
        holdout_domain=args.holdout, n_way=args.ways, n_shot=args.shots,
        n_query=args.queries, epochs=args.epochs,
        episodes_per_epoch=args.episodes, lr0=args.lr,
        pseudo_labels=args.pseudo_labels == "on",
        specialize_episodes=args.specialize_episodes)
    init = None
    if args.init:
        init_state, _, _, _ = load_checkpoint(args.init)
        init = (init_state.encoder, init_state.bank)
    state, history, best = meta_train_loop(ds, config, init=init,
                                           out_dir=args.out)
    print(f"meta-trained {config.epochs} epochs; best val acc "
          f"{best['val_acc']:.2f}% at epoch {best['epoch']} -> {args.out}")


def _cmd_eval(args):
    from .evaluation import evaluate_episodes, format_report_table
    from .training import load_checkpoint, seen_domains_for

    seed = _require_seed(args)
    state, config, _, _ = load_checkpoint(args.ckpt)
    ds = D.read_dataset(args.data)
    mode = {"tano-hard": "tano-hard", "tano-blend": "tano-blend",
            "common": "common", "multi": "multi", "adabn": "adabn"}[args.mode]
    if mode == "multi":
        raise ValidationError(
            "multi mode needs independently trained per-domain checkpoints; "
            "use the run_experiment API")
    if config.protocol == "out":
        domains = [config.holdout_domain]
    else:
        domains = seen_domains_for(config, ds)
    report = evaluate_episodes(state, ds, args.protocol, mode, args.episodes,
                               seed_key(seed, "cli-eval"),
                               n_way=config.n_way, n_shot=config.n_shot,
                               n_query=config.n_query, domains=domains)
    text = format_report_table([report])
    print(text, end="")
    if args.json:
        Path(args.json).write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True),
            encoding="utf-8")


def _cmd_analyze(args):
    from .evaluation import emit_analysis_report
    from .training import load_checkpoint

    seed = _require_seed(args)
    state, config, _, _ = load_checkpoint(args.ckpt)
    ds = D.read_dataset(args.data)
    report = emit_analysis_report(state, ds, seed=seed, n_way=config.n_way,
                                  n_shot=config.n_shot, n_query=config.n_query,
                                  out_path=args.json)
    print(json.dumps(report, indent=2, sort_keys=True))


def build_parser():
    parser = argparse.ArgumentParser(prog="tano")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--domains", type=int, default=4)
    g.add_argument("--classes", type=int, default=20)
    g.add_argument("--per-class", type=int, default=50)
    g.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain the backbone")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_pretrain)

    m = sub.add_parser("meta-train", help="episodic meta-training")
    m.add_argument("--data", required=True)
    m.add_argument("--init")
    m.add_argument("--out", required=True)
    m.add_argument("--protocol", choices=["standard", "intra", "out"],
                   default="intra")
    m.add_argument("--holdout", type=int)
    m.add_argument("--ways", type=int, default=5)
    m.add_argument("--shots", type=int, default=1, choices=[1, 5])
    m.add_argument("--queries", type=int, default=15)
    m.add_argument("--epochs", type=int, default=40)
    m.add_argument("--episodes", type=int, default=100)
    m.add_argument("--lr", type=float, default=0.001)
    m.add_argument("--workers", type=int, default=4)
    m.add_argument("--pseudo-labels", choices=["on", "off"], default="on")
    m.add_argument("--specialize-episodes", type=int, default=150,
                   help="per-worker gamma/beta burn-in episodes (0 disables)")
    m.add_argument("--seed", type=int)
    m.set_defaults(func=_cmd_meta_train)

    e = sub.add_parser("eval", help="episodic evaluation")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--protocol", choices=["standard", "intra", "out"],
                   default="intra")
    e.add_argument("--mode", choices=["tano-hard", "tano-blend", "common",
                                      "multi", "adabn"], required=True)
    e.add_argument("--episodes", type=int, default=300)
    e.add_argument("--seed", type=int)
    e.add_argument("--json")
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("analyze", help="normalization-geometry report")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--json")
    a.add_argument("--seed", type=int)
    a.set_defaults(func=_cmd_analyze)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
