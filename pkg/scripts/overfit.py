"""Memorise one synthetic image through a noiseless channel.

Sanity check for the encoder/decoder pair: with no noise and a single
target, PSNR should climb past 30 dB within a few hundred Adam steps.

    python scripts/overfit.py --steps 1000 --out runs/overfit.csv
"""
import argparse
import csv
import sys

import torch

from pjscc import PJSCC, ChannelSpec, ModelConfig, psnr
from pjscc.data import synth_images
from pjscc.trainer import Trainer, TrainSpec


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--kind", default="shapes")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--every", type=int, default=50)
    ap.add_argument("--out", help="CSV of (step, loss, psnr_db)")
    args = ap.parse_args(argv)

    cfg = ModelConfig.tiny()
    data = synth_images(1, 32, 32, args.kind, seed=args.seed)
    spec = TrainSpec(steps=args.steps, batch_size=1, learning_rate=args.lr, noiseless=True,
                     snr_lo=7.0, snr_hi=7.0, distributions=["awgn"], log_interval=0)
    trainer = Trainer(PJSCC(cfg), data, spec)
    probe = ChannelSpec("awgn", 7.0)
    rows = []
    while trainer.step < args.steps:
        trainer.run(min(args.steps, trainer.step + args.every))
        trainer.model.eval()
        with torch.no_grad():
            db = psnr(data.images, trainer.model(data.images, probe, None, noiseless=True))
        rows.append((trainer.step, trainer.losses[-1], db))
        print(f"step {trainer.step:5d}  loss {trainer.losses[-1]:.6f}  PSNR {db:6.2f} dB",
              flush=True)
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss", "psnr_db"])
            w.writerows(rows)
    return 0 if rows and rows[-1][2] > 30 else 1


if __name__ == "__main__":
    sys.exit(main())
