"""Command-line entry point.

Subcommands: phantom, preprocess, train, evaluate, sweep, arith. Every run
writes its resolved config and seed into the output directory so artifacts
are reproducible from the directory alone. Exit codes: 0 success, 1 module
error, 2 usage error.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import data as dp
from .errors import SDNetError


def _write_run_info(out_dir, args, seed):
    os.makedirs(out_dir, exist_ok=True)
    info = {k: v for k, v in vars(args).items() if k != "func"}
    info["seed"] = seed
    with open(os.path.join(out_dir, "run_info.json"), "w") as fh:
        json.dump(info, fh, indent=2, sort_keys=True, default=str)


def _cmd_phantom(args):
    spec = dp.PhantomSpec(image_size=args.size, seed=args.seed)
    samples = dp.generate_phantom(spec, args.n)
    dp.save_phantom_dataset(samples, args.out, spec, args.n)
    _write_run_info(args.out, args, args.seed)
    print(f"wrote {args.n} phantom samples to {args.out}")
    return 0


def _cmd_preprocess(args):
    os.makedirs(args.out, exist_ok=True)
    for path in args.volumes:
        vol = dp.load_volume(path)
        vol = dp.resample_volume(vol, args.spacing)
        vol = dp.normalise_volume(vol)
        frames = np.stack(
            [
                dp.center_crop_or_pad(dp.ImageSlice(f, vol.pixel_spacing), args.size).pixels
                for f in vol.frames
            ]
        )
        out_path = os.path.join(args.out, os.path.basename(path))
        dp.save_volume(
            dp.Volume(frames, vol.pixel_spacing, vol.slice_thickness, vol.subject_id), out_path
        )
        print(f"preprocessed {path} -> {out_path} {frames.shape}")
    _write_run_info(args.out, args, 0)
    return 0


def _load_dataset(path):
    samples, _ = dp.load_phantom_dataset(path)
    return samples


def _budgeted_data(samples, n_labelled, n_unlabelled, seed):
    from .data import MaskMap, UnlabelledSample, make_label_budget

    pairs = [(s.sample_id, s.subject_id) for s in samples]
    lb = make_label_budget(pairs, n_labelled, n_unlabelled, seed=seed)
    by_id = {s.sample_id: s for s in samples}
    labelled = [by_id[i] for i in lb.labelled_ids]
    unlabelled = [
        UnlabelledSample(by_id[i].image, sample_id=i, subject_id=by_id[i].subject_id)
        for i in lb.unlabelled_ids
    ]
    pool = [MaskMap(by_id[i].mask.pixels, is_binary=True) for i in lb.mask_pool_ids]
    return labelled, unlabelled, pool


def _cmd_train(args):
    from .data import make_splits
    from .evaluation import _samples_by_subject
    from .trainer import TrainConfig, Trainer

    config = TrainConfig.from_file(args.config, args.set) if args.config else TrainConfig().with_overrides(args.set)
    samples = _load_dataset(args.data)
    split = make_splits(sorted({s.subject_id for s in samples}), args.fold, seed=config.seed)
    train_pool = _samples_by_subject(samples, split.train_ids)
    val_set = _samples_by_subject(samples, split.val_ids)
    n_lab = args.n_labelled or len(train_pool) // 2
    n_unl = args.n_unlabelled if args.n_unlabelled is not None else len(train_pool) - n_lab
    labelled, unlabelled, pool = _budgeted_data(
        [s for s in train_pool], n_lab, n_unl, config.seed
    )
    trainer = Trainer(config, labelled, unlabelled, pool, val_set)
    trainer.fit(log_every=args.log_every)

    os.makedirs(args.out, exist_ok=True)
    config.to_file(os.path.join(args.out, "config.json"))
    _write_run_info(args.out, args, config.seed)
    trainer.write_loss_csv(os.path.join(args.out, "losses.csv"))
    trainer.write_val_csv(os.path.join(args.out, "validation.csv"))
    trainer.checkpoint(os.path.join(args.out, "last.ckpt"))
    best = trainer.best_model()
    from .networks import save_params

    save_params(best, os.path.join(args.out, "best.ckpt"), step=trainer.step,
                extra={"variant": config.variant, "best_dice": trainer.best_dice})
    print(f"trained {config.variant}: {trainer.step} steps, best val dice {trainer.best_dice:.4f}")
    return 0


def _cmd_evaluate(args):
    from .data import make_splits
    from .evaluation import _samples_by_subject, evaluate_model
    from .networks import load_params
    from .trainer import TrainConfig, Trainer

    samples = _load_dataset(args.data)
    model, _, extra = load_params(args.checkpoint)
    split = make_splits(sorted({s.subject_id for s in samples}), args.fold, seed=args.seed)
    test_set = _samples_by_subject(samples, split.test_ids)
    cfg = TrainConfig(
        image_size=model.arch.image_size, base_width=model.arch.base_width, seed=args.seed
    )
    shim = Trainer(cfg, test_set[:1])
    shim.model = model
    record = evaluate_model(
        shim, test_set, split=split,
        variant=(extra or {}).get("variant", ""), dataset=os.path.basename(args.data),
        fold=args.fold,
    )
    _write_run_info(args.out, args, args.seed)
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        json.dump(
            {"mean_dice": record.mean_dice, "subject_dice": record.subject_dice}, fh, indent=2
        )
    print(f"test mean dice {record.mean_dice:.4f} over {len(record.subject_dice)} subjects")
    return 0


def _cmd_sweep(args):
    from .evaluation import run_label_sweep, summarize
    from .trainer import TrainConfig

    config = TrainConfig.from_file(args.config, args.set) if args.config else TrainConfig().with_overrides(args.set)
    samples = _load_dataset(args.data)
    budgets = [int(b) for b in args.budgets.split(",")]
    variants = args.variants.split(",")
    records = run_label_sweep(
        samples, budgets, variants=variants, folds=args.folds,
        config=config, seed=config.seed, out_dir=args.out, log=True,
    )
    _write_run_info(args.out, args, config.seed)
    print(json.dumps(summarize(records), indent=2))
    return 0


def _cmd_arith(args):
    from .latent import ArithmeticJob, emit_figure
    from .networks import load_params

    samples = _load_dataset(args.data)
    model, _, _ = load_params(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    idx = rng.choice(len(samples), size=(args.pairs, 2), replace=False)
    jobs = [
        ArithmeticJob(pair=(samples[i].image, samples[j].image)) for i, j in idx
    ]
    os.makedirs(args.out, exist_ok=True)
    _write_run_info(args.out, args, args.seed)
    path = emit_figure(model, jobs, os.path.join(args.out, "latent_arithmetic.png"),
                       label=args.tag)
    print(f"wrote {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="sdnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("preprocess", help="resample, normalise and crop volumes")
    p.add_argument("volumes", nargs="+")
    p.add_argument("--spacing", type=float, default=1.37)
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--data", required=True, help="phantom dataset directory")
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--n-labelled", type=int, default=0)
    p.add_argument("--n-unlabelled", type=int, default=None)
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("sweep", help="label-budget sweep over model variants")
    p.add_argument("--data", required=True)
    p.add_argument("--budgets", default="100,25,10")
    p.add_argument("--variants", default="unet,gan,sdnet")
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("arith", help="latent-space arithmetic figure")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tag", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_arith)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return args.func(args)
    except SDNetError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
