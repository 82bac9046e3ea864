"""Adapter ablation: CSP prompts vs. attention-feature modulation vs. none.

    python scripts/ablation.py --steps 300 --out-dir runs/ablation
"""
import argparse
import logging
from pathlib import Path

from pjscc import ModelConfig
from pjscc.data import synth_images
from pjscc.trainer import TrainSpec, run_ablation


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--adapters", default="csp,af,identity")
    ap.add_argument("--n-train", type=int, default=500)
    ap.add_argument("--n-eval", type=int, default=100)
    ap.add_argument("--out-dir", default="runs/ablation")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = ModelConfig.tiny(distributions=["awgn"])
    spec = TrainSpec(steps=args.steps, distributions=["awgn"], log_interval=100)
    report = run_ablation(cfg, synth_images(args.n_train, 32, 32, "shapes", seed=0), spec,
                          eval_data=synth_images(args.n_eval, 32, 32, "shapes", seed=1),
                          adapters=args.adapters.split(","), eval_snrs=[1, 4, 7, 10, 13],
                          progress=print)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(report.to_csv(cfg.digest()))
    (out / "ablation.txt").write_text(report.to_text() + "\n")
    print(report.to_text())


if __name__ == "__main__":
    main()
