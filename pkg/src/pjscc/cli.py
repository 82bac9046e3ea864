"""Command line entry point: ``pjscc {train,sweep,ablate,account}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import statistics
import sys
import tempfile
import time
from pathlib import Path

import torch

from . import config as cfgmod
from .channel import ChannelSpec, Distribution
from .codec import CheckpointVersionError, PJSCC, load_model
from .data import load_dataset
from .metrics import UnsupportedLayerError, count_params, model_flops
from .trainer import Trainer, evaluate, run_ablation, train

log = logging.getLogger("pjscc")

SWEEP_COLUMNS = ("snr_db", "distribution", "psnr_mean", "psnr_std",
                 "log_lpips_mean", "log_lpips_std", "n")


class UsageError(Exception):
    """Bad arguments or configuration (exit status 2)."""


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _dists(text: str) -> list[str]:
    try:
        return [Distribution.parse(t).value for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise UsageError(str(e)) from None


def _load_config(args) -> cfgmod.RunConfig:
    try:
        cfg = cfgmod.load(args.config)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None
    except cfgmod.ConfigError as e:
        raise UsageError(str(e)) from None
    if getattr(args, "output_dir", None):
        cfg.output_dir = args.output_dir
    if getattr(args, "steps", None) is not None:
        cfg.train.steps = args.steps
    return cfg


def _dataset(ref: str, image_size: int, label_bytes: int = 1, mode: str = "center"):
    try:
        return load_dataset(ref, image_size, label_bytes, mode)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.output_dir)
    train_data = _dataset(cfg.data.train, cfg.model.image_size, cfg.data.label_bytes, "random")
    eval_data = _dataset(cfg.eval.dataset, cfg.model.image_size, cfg.data.label_bytes)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.dump(cfg, out / "run.cfg")
    ckpt = out / "checkpoint.pt"
    spec = dataclasses.replace(cfg.train, checkpoint_path=str(ckpt))
    metrics = out / "metrics.csv"
    if args.resume:
        trainer = Trainer.resume(args.resume, train_data, spec, eval_data, metrics)
        trainer.run()
        if eval_data is not None:
            trainer.run_eval()
        trainer.save(ckpt)
    else:
        model = PJSCC(cfg.model)
        _, trainer = train(model, train_data, spec, eval_data, metrics)
    print(f"checkpoint: {ckpt}")
    print(f"steps: {trainer.step}")
    if trainer.losses:
        print(f"final loss: {trainer.losses[-1]:.6f}")
    for r in trainer.eval_history:
        if r["step"] == trainer.step:
            print(f"eval {r['distribution']:>8} {r['snr_db']:>5g} dB: "
                  f"PSNR {r['psnr_mean']:.2f} dB  LogLPIPS* {r['log_lpips_mean']:.2f}")
    return 0


def sweep_csv(model: PJSCC, dataset, snr_points, distributions, seed: int = 1234,
              batch_size: int = 50) -> str:
    specs = [ChannelSpec(d, s) for d in distributions for s in snr_points]
    rows = evaluate(model, dataset, specs, seed=seed, batch_size=batch_size)
    buf = io.StringIO()
    buf.write(f"# config_sha256={model.cfg.digest()} eval_seed={seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([f"{r['snr_db']:g}", r["distribution"], f"{r['psnr_mean']:.6f}",
                    f"{r['psnr_std']:.6f}", f"{r['log_lpips_mean']:.6f}",
                    f"{r['log_lpips_std']:.6f}", r["n"]])
    return buf.getvalue()


def cmd_sweep(args) -> int:
    try:
        model, _ = load_model(args.checkpoint)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {args.checkpoint}") from None
    snrs = _floats(args.snr_points)
    if not snrs:
        raise UsageError("--snr-points must list at least one SNR")
    dists = _dists(args.distributions)
    missing = set(dists) - set(model.cfg.distributions)
    if missing:
        raise CheckpointVersionError(f"checkpoint has no prompts for {sorted(missing)}")
    data = _dataset(args.dataset, model.cfg.image_size, args.label_bytes)
    text = sweep_csv(model, data, snrs, dists, seed=args.seed, batch_size=args.batch_size)
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    if args.plot:
        plot_sweep(text, args.plot)
    return 0


def plot_sweep(csv_text: str, path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = list(csv.DictReader(line for line in csv_text.splitlines() if not line.startswith("#")))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for dist in sorted({r["distribution"] for r in rows}):
        pts = [(float(r["snr_db"]), float(r["psnr_mean"])) for r in rows if r["distribution"] == dist]
        ax.plot(*zip(*sorted(pts)), marker="o", label=dist)
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel("PSNR (dB)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    adapters = [a.strip() for a in args.adapters.split(",") if a.strip()]
    for a in adapters:
        if a not in ("csp", "af", "identity"):
            raise UsageError(f"unknown adapter {a!r}")
    train_data = _dataset(cfg.data.train, cfg.model.image_size, cfg.data.label_bytes, "random")
    eval_data = _dataset(cfg.eval.dataset, cfg.model.image_size, cfg.data.label_bytes)
    report = run_ablation(cfg.model, train_data, cfg.train, eval_data, adapters=adapters,
                          eval_snrs=cfg.eval.snr_points,
                          progress=lambda m: log.info("ablation %s", m))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(report.to_csv(cfg.digest()))
    text = report.to_text()
    (out / "ablation.txt").write_text(text + "\n")
    print(text)
    return 0


def account_report(model: PJSCC, timing_runs: int = 100, checkpoint: str | None = None) -> dict:
    params = count_params(model)
    flops = model_flops(model)
    cfg = model.cfg
    x = torch.rand(1, 3, cfg.image_size, cfg.image_size,
                   generator=torch.Generator().manual_seed(0))
    spec = ChannelSpec(cfg.distributions[0], cfg.level_snrs[-1])
    gen = torch.Generator().manual_seed(0)
    model.eval()
    times = []
    with torch.no_grad():
        model(x, spec, gen)  # warm-up
        for _ in range(timing_runs):
            t0 = time.perf_counter()
            model(x, spec, gen)
            times.append(time.perf_counter() - t0)
    if checkpoint:
        size = os.path.getsize(checkpoint)
    else:
        from .codec import save_checkpoint

        with tempfile.TemporaryDirectory() as d:
            p = os.path.join(d, "m.pt")
            save_checkpoint(p, model)
            size = os.path.getsize(p)
    return {
        "params": params,
        "flops": flops,
        "input_shape": [3, cfg.image_size, cfg.image_size],
        "inference_ms_median": statistics.median(times) * 1e3,
        "timing_runs": timing_runs,
        "checkpoint_bytes": size,
        "K": cfg.K,
        "adapter": cfg.adapter,
        "distributions": list(cfg.distributions),
    }


def format_account(rep: dict) -> str:
    p = rep["params"]
    lines = [
        f"adapter            {rep['adapter']}",
        f"distributions      {','.join(rep['distributions'])}",
        f"symbols (K)        {rep['K']}",
        f"params.backbone    {p['backbone']}",
        f"params.adapters    {p['adapters']}",
        f"params.prompts     {p['prompts']}",
        f"params.heads       {p['heads']}",
        f"params.total       {p['total']}",
        f"flops              {rep['flops']}  (input {'x'.join(map(str, rep['input_shape']))})",
        f"inference_ms       {rep['inference_ms_median']:.3f}  (median of {rep['timing_runs']})",
        f"checkpoint_bytes   {rep['checkpoint_bytes']}",
    ]
    return "\n".join(lines)


def cmd_account(args) -> int:
    if bool(args.config) == bool(args.checkpoint):
        raise UsageError("account needs exactly one of --config or --checkpoint")
    if args.checkpoint:
        try:
            model, _ = load_model(args.checkpoint)
        except FileNotFoundError:
            raise UsageError(f"checkpoint not found: {args.checkpoint}") from None
    else:
        model = PJSCC(_load_config(args).model)
    if args.timing_runs < 100:
        raise UsageError("--timing-runs must be at least 100")
    rep = account_report(model, args.timing_runs, args.checkpoint)
    print(json.dumps(rep, indent=2) if args.json else format_account(rep))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pjscc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--output-dir")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="PSNR/LogLPIPS versus SNR for a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--snr-points", default="1,4,7,10,13")
    s.add_argument("--distributions", default="awgn,rayleigh")
    s.add_argument("--dataset", default="synthetic:shapes:100:1")
    s.add_argument("--label-bytes", type=int, default=1)
    s.add_argument("--seed", type=int, default=1234)
    s.add_argument("--batch-size", type=int, default=50)
    s.add_argument("--output", help="CSV path (stdout when omitted)")
    s.add_argument("--plot", help="optional PNG line chart")
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("ablate", help="train csp/af/identity variants and tabulate PSNR")
    a.add_argument("--config", required=True)
    a.add_argument("--adapters", default="csp,af,identity")
    a.add_argument("--steps", type=int)
    a.add_argument("--output-dir")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("account", help="parameter, FLOP, timing and storage report")
    c.add_argument("--config")
    c.add_argument("--checkpoint")
    c.add_argument("--timing-runs", type=int, default=100)
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_account)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"pjscc {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (CheckpointVersionError, OSError, RuntimeError, ValueError,
            UnsupportedLayerError) as e:
        print(f"pjscc {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
