"""Train the tiny model on mixed AWGN SNRs and sweep PSNR against SNR.

Reproduces the qualitative shape of a graceful-degradation curve at desk
scale: one model, SNR drawn from U[lo, hi] per batch, evaluated at the
prompt anchors.

    python scripts/adaptation.py --steps 2000 --out-dir runs/adaptation
"""
import argparse
import logging
from pathlib import Path

from pjscc import PJSCC, ModelConfig
from pjscc.cli import plot_sweep, sweep_csv
from pjscc.data import load_dataset
from pjscc.trainer import TrainSpec, train


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--train", default="synthetic:shapes:500:0",
                    help="dataset reference (CIFAR batch, folder or synthetic:<kind>:<n>)")
    ap.add_argument("--eval", default="synthetic:shapes:100:1")
    ap.add_argument("--distributions", default="awgn")
    ap.add_argument("--out-dir", default="runs/adaptation")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    dists = args.distributions.split(",")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = ModelConfig.tiny(distributions=dists)
    spec = TrainSpec(steps=args.steps, learning_rate=args.lr, distributions=dists, log_interval=100,
                     checkpoint_path=str(out / "checkpoint.pt"))
    model, trainer = train(PJSCC(cfg), load_dataset(args.train, 32, mode="random"), spec,
                           metrics_path=out / "metrics.csv")
    first = sum(trainer.losses[:100]) / min(100, len(trainer.losses))
    last = sum(trainer.losses[-100:]) / min(100, len(trainer.losses))
    print(f"loss: first-100 mean {first:.5f}, last-100 mean {last:.5f}")

    text = sweep_csv(model, load_dataset(args.eval, 32), cfg.level_snrs, dists)
    (out / "sweep.csv").write_text(text)
    print(text, end="")
    try:
        plot_sweep(text, str(out / "sweep.png"))
    except ImportError:
        pass


if __name__ == "__main__":
    main()
