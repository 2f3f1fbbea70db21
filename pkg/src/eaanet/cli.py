"""Command-line entry point: ``eaanet {gen-data,train,eval,predict,gradcheck}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, gradcheck, metrics, trainer
from .model import EAANet, load_checkpoint, model_from_records


def cmd_gen_data(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.volumes):
        vol = data.gen_synthetic_volume(args.seed + i, args.slices, args.size, args.size)
        path = out / f"vol_{i:03d}.eaav"
        data.save_volume(vol, path)
        print(path)
    return 0


def cmd_train(args) -> int:
    values = trainer.parse_config(Path(args.config).read_text()) if args.config else {}
    overrides = {"seed": args.seed, "epochs": args.epochs, "lr": args.lr,
                 "batch_size": args.batch_size, "out_dir": args.out_dir}
    values.update({k: str(v) for k, v in overrides.items() if v is not None})
    net_cfg, train_cfg = trainer.configs_from_mapping(values)
    volumes = data.load_volume_dir(args.data_dir)
    net_cfg.height, net_cfg.width = volumes[0][1].shape[1:]
    net_cfg.validate()
    triplets = trainer.triplets_for(volumes, net_cfg.num_classes)

    if args.resume:
        model, state, start = trainer.resume_state(load_checkpoint(args.resume))
    else:
        model, state, start = EAANet(net_cfg, seed=train_cfg.seed), None, 0
    result = trainer.train(model, triplets, train_cfg, state=state, start_epoch=start)
    last = result.log[-1] if result.log else None
    if last:
        print(f"epoch {last['epoch']}: total {last['total']:.4f}, train DSC {last['train_dsc']:.4f}")
    for path in result.checkpoints:
        print(path)
    return 0


def _load_model(path) -> EAANet:
    return model_from_records(load_checkpoint(path))


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    volumes = data.load_volume_dir(args.data_dir)
    reports, mean = trainer.evaluate(model, volumes, head=args.head, standard_vs=args.standard_vs)
    for (vid, _), r in zip(volumes, reports):
        flag = "" if r.hd_defined else "  (hd undefined: empty mask)"
        print(f"{vid}: dsc={r.dsc:.4f} hd={r.hd:.3f} hd95={r.hd95:.3f} sens={r.sensitivity:.4f} "
              f"spec={r.specificity:.4f} vs={r.volume_similarity:.4f}{flag}")
    print(f"mean: dsc={mean.dsc:.4f} hd={mean.hd:.3f} hd95={mean.hd95:.3f}")
    if args.csv_out:
        metrics.write_csv(args.csv_out, reports)
    return 0


def cmd_predict(args) -> int:
    model = _load_model(args.checkpoint)
    vol = data.load_volume(args.volume)
    mask = trainer.predict(model, vol, head=args.head)
    np.save(args.mask_out, mask)
    print(f"wrote {mask.shape} mask for slices 1..{vol.shape[0] - 2} to {args.mask_out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(trials=args.trials, end_to_end_trials=args.end_to_end_trials,
                                  seed=args.seed, echo=print)
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eaanet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic .eaav volumes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--volumes", type=int, default=8)
    p.add_argument("--slices", type=int, default=12)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a directory of .eaav volumes")
    p.add_argument("--config", help="flat key=value file (network and training keys)")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--resume", help="continue from a training checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on .eaav volumes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--csv-out")
    p.add_argument("--head", choices=("complete", "basic"), default="complete")
    p.add_argument("--standard-vs", action="store_true",
                   help="use 2(|M|-|W|)/(|M|+|W|) for volume similarity")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment the interior slices of one volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--mask-out", required=True, help="output .npy (uint8, [S-2, H, W])")
    p.add_argument("--head", choices=("complete", "basic"), default="complete")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--end-to-end-trials", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
