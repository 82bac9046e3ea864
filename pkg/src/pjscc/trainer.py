"""End-to-end training, evaluation and the adapter ablation harness."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import torch

from .channel import ChannelSpec, Distribution, sample_channel
from .codec import ModelConfig, PJSCC, load_model, save_checkpoint
from .csp import AdapterKind
from .data import ImageDataset, batches, epoch_order
from .metrics import (PerceptualDistance, count_params, log_distance, psnr_per_image,
                      pyramid_distance)

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("step", "loss", "eval_snr_db", "distribution", "psnr_db", "log_lpips")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainSpec:
    steps: int = 1000
    batch_size: int = 10
    learning_rate: float = 1e-4
    snr_lo: float = 1.0
    snr_hi: float = 13.0
    distributions: list = field(default_factory=lambda: ["awgn", "rayleigh"])
    eval_interval: int = 0  # 0: evaluate only at the end
    eval_snrs: list = field(default_factory=lambda: [1.0, 4.0, 7.0, 10.0, 13.0])
    seed: int = 0
    checkpoint_path: str = ""
    checkpoint_interval: int = 0
    per_sample_channel: bool = False
    noiseless: bool = False
    grad_clip: float = 0.0  # 0 disables clipping
    log_interval: int = 100

    def __post_init__(self):
        self.distributions = [Distribution.parse(d).value for d in self.distributions]
        self.validate()

    def validate(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.snr_lo > self.snr_hi:
            raise ValueError(f"snr range [{self.snr_lo}, {self.snr_hi}] is empty")
        if not self.distributions:
            raise ValueError("at least one training distribution is required")

    @classmethod
    def universal(cls, **kw) -> "TrainSpec":
        """Both channel models, SNR ~ U[1, 13] dB."""
        return cls(distributions=["awgn", "rayleigh"], **kw)

    @classmethod
    def awgn_only(cls, **kw) -> "TrainSpec":
        return cls(distributions=["awgn"], **kw)

    @classmethod
    def rayleigh_only(cls, **kw) -> "TrainSpec":
        return cls(distributions=["rayleigh"], **kw)


def mse_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every pixel and channel."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).square().mean()


class ChannelSampler:
    """Draws training channel conditions from its own generator."""

    def __init__(self, spec: TrainSpec, generator: torch.Generator):
        self.spec = spec
        self.generator = generator

    def __call__(self, batch_size: int):
        s = self.spec
        if s.per_sample_channel:
            return [sample_channel(s.snr_lo, s.snr_hi, s.distributions, self.generator)
                    for _ in range(batch_size)]
        return sample_channel(s.snr_lo, s.snr_hi, s.distributions, self.generator)


def _first_nonfinite(named: Iterable[tuple[str, Optional[torch.Tensor]]]) -> Optional[str]:
    for name, t in named:
        if t is None:
            continue
        t = torch.view_as_real(t) if torch.is_complex(t) else t
        if not torch.isfinite(t).all():
            return name
    return None


def train_step(model: PJSCC, images: torch.Tensor, sampler: ChannelSampler,
               optimizer: torch.optim.Optimizer, noiseless: bool = False,
               grad_clip: float = 0.0) -> float:
    """Sample a channel, run encode -> channel -> decode, update once."""
    model.train()
    spec = sampler(images.shape[0])
    optimizer.zero_grad(set_to_none=True)
    code = model.encode(images, spec)
    received = model.transmit(code, spec, sampler.generator, noiseless)
    recon = model.decode(received, spec)
    loss = mse_loss(images, recon)
    if not torch.isfinite(loss):
        name = _first_nonfinite(
            [(f"param:{n}", p) for n, p in model.named_parameters()]
            + [("input", images), ("code", code.symbols), ("received", received.symbols),
               ("reconstruction", recon)]) or "loss"
        raise NonFiniteLossError(f"non-finite loss {loss.item()}; first non-finite tensor: {name}")
    loss.backward()
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return loss.item()


@torch.no_grad()
def evaluate(model: PJSCC, dataset: ImageDataset, specs: Sequence[ChannelSpec], seed: int = 1234,
             batch_size: int = 50, pd: Optional[PerceptualDistance] = None) -> list[dict]:
    """Mean/std PSNR and LogLPIPS over ``dataset`` for each channel spec.

    Every spec gets a fresh generator seeded from ``seed`` so results do not
    depend on evaluation order.
    """
    model.eval()
    pd = pd or pyramid_distance
    rows = []
    for spec in specs:
        gen = torch.Generator().manual_seed(seed)
        psnrs, lpips = [], []
        for b in batches(dataset, batch_size, shuffle=False, train=False):
            recon = model(b.images, spec, gen)
            psnrs.extend(psnr_per_image(b.images, recon))
            lpips.extend(log_distance(pd(x, y)) for x, y in zip(b.images, recon))
        rows.append({
            "snr_db": spec.snr_db,
            "distribution": spec.distribution.value,
            "psnr_mean": statistics.fmean(psnrs),
            "psnr_std": statistics.stdev(psnrs) if len(psnrs) > 1 else 0.0,
            "log_lpips_mean": statistics.fmean(lpips),
            "log_lpips_std": statistics.stdev(lpips) if len(lpips) > 1 else 0.0,
            "n": len(psnrs),
        })
    return rows


class MetricsLog:
    """Append-only CSV: a config-hash comment line, a header, then rows."""

    def __init__(self, path: str | os.PathLike, config_hash: str):
        self.path = Path(path)
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        if fresh:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as f:
                f.write(f"# config_sha256={config_hash}\n")
                csv.writer(f).writerow(METRICS_COLUMNS)

    def append(self, **row) -> None:
        with self.path.open("a", newline="") as f:
            csv.writer(f).writerow([_fmt(row.get(c, "")) for c in METRICS_COLUMNS])


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else v


class Trainer:
    """Owns model, optimizer and random streams; resumable from checkpoints."""

    def __init__(self, model: PJSCC, data: ImageDataset, spec: TrainSpec,
                 eval_data: Optional[ImageDataset] = None,
                 metrics_path: str | os.PathLike | None = None):
        missing = set(spec.distributions) - set(model.cfg.distributions)
        if missing:
            raise ValueError(f"model has no prompts for distributions {sorted(missing)}")
        if len(data) < spec.batch_size:
            raise ValueError(f"dataset of {len(data)} images is smaller than one batch "
                             f"({spec.batch_size})")
        self.model = model
        self.data = data
        self.eval_data = eval_data
        self.spec = spec
        self.optimizer = torch.optim.Adam(model.parameters(), lr=spec.learning_rate)
        self.generator = torch.Generator().manual_seed(spec.seed)
        self.sampler = ChannelSampler(spec, self.generator)
        self.step = 0
        self.losses: list[float] = []
        self.eval_history: list[dict] = []
        self.metrics = (MetricsLog(metrics_path, run_hash(model.cfg, spec))
                        if metrics_path else None)

    @property
    def batches_per_epoch(self) -> int:
        return len(self.data) // self.spec.batch_size

    def batch_at(self, step: int) -> torch.Tensor:
        bpe = self.batches_per_epoch
        epoch, i = divmod(step, bpe)
        order = epoch_order(len(self.data), self.spec.seed, epoch)
        idx = order[i * self.spec.batch_size:(i + 1) * self.spec.batch_size]
        return self.data.images[idx]

    def train_one(self) -> float:
        loss = train_step(self.model, self.batch_at(self.step), self.sampler, self.optimizer,
                          self.spec.noiseless, self.spec.grad_clip)
        self.step += 1
        self.losses.append(loss)
        if self.metrics:
            self.metrics.append(step=self.step, loss=loss)
        if self.spec.log_interval and self.step % self.spec.log_interval == 0:
            log.info("step %d loss %.6f", self.step, loss)
        return loss

    def run(self, steps: Optional[int] = None) -> list[float]:
        """Train until ``steps`` total (defaults to ``spec.steps``)."""
        target = self.spec.steps if steps is None else steps
        s = self.spec
        while self.step < target:
            self.train_one()
            if s.eval_interval and self.step % s.eval_interval == 0:
                self.run_eval()
            if s.checkpoint_path and s.checkpoint_interval and self.step % s.checkpoint_interval == 0:
                self.save(s.checkpoint_path)
        return self.losses

    def eval_specs(self) -> list[ChannelSpec]:
        return [ChannelSpec(d, snr) for d in self.spec.distributions for snr in self.spec.eval_snrs]

    def run_eval(self, dataset: Optional[ImageDataset] = None) -> list[dict]:
        dataset = dataset or self.eval_data
        if dataset is None:
            return []
        rows = evaluate(self.model, dataset, self.eval_specs(), seed=self.spec.seed + 1)
        for r in rows:
            r["step"] = self.step
            if self.metrics:
                self.metrics.append(step=self.step, eval_snr_db=r["snr_db"],
                                    distribution=r["distribution"], psnr_db=r["psnr_mean"],
                                    log_lpips=r["log_lpips_mean"])
        self.eval_history.extend(rows)
        return rows

    def state(self) -> dict:
        return {
            "step": self.step,
            "optimizer": self.optimizer.state_dict(),
            "generator": self.generator.get_state(),
            "train_spec": dataclasses.asdict(self.spec),
            "losses": list(self.losses),
        }

    def save(self, path: str | os.PathLike) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, self.model, self.state())

    @classmethod
    def resume(cls, path: str | os.PathLike, data: ImageDataset,
               spec: Optional[TrainSpec] = None, eval_data: Optional[ImageDataset] = None,
               metrics_path=None) -> "Trainer":
        model, blob = load_model(path)
        state = blob.get("train_state") or {}
        spec = spec or TrainSpec(**state.get("train_spec", {}))
        trainer = cls(model, data, spec, eval_data, metrics_path)
        if state:
            trainer.optimizer.load_state_dict(state["optimizer"])
            trainer.generator.set_state(state["generator"])
            trainer.step = int(state["step"])
            trainer.losses = [float(v) for v in state.get("losses", [])]
        return trainer


def run_hash(cfg: ModelConfig, spec: TrainSpec) -> str:
    import hashlib
    import json

    blob = json.dumps({"model": cfg.to_dict(), "train": dataclasses.asdict(spec)},
                      sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def train(model: PJSCC, data: ImageDataset, spec: TrainSpec,
          eval_data: Optional[ImageDataset] = None,
          metrics_path: str | os.PathLike | None = None) -> tuple[PJSCC, Trainer]:
    trainer = Trainer(model, data, spec, eval_data, metrics_path)
    trainer.run()
    if eval_data is not None and (not trainer.eval_history
                                  or trainer.eval_history[-1]["step"] != trainer.step):
        trainer.run_eval()
    if spec.checkpoint_path:
        trainer.save(spec.checkpoint_path)
    return model, trainer


@dataclass
class AblationReport:
    snrs: list
    distribution: str
    rows: dict  # adapter -> list of PSNR (dB), one per snr
    params: dict  # adapter -> count_params() dict

    def to_csv(self, config_hash: str = "") -> str:
        lines = [f"# config_sha256={config_hash}",
                 ",".join(["adapter", "adapter_params", "total_params"]
                          + [f"snr_{s:g}" for s in self.snrs])]
        for name, vals in self.rows.items():
            p = self.params[name]
            lines.append(",".join([name, str(p["adapters"]), str(p["total"])]
                                  + [f"{v:.4f}" for v in vals]))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        head = f"{'method':<10}{'params':>10}" + "".join(f"{'SNR=' + format(s, 'g'):>10}"
                                                         for s in self.snrs)
        out = [head]
        labels = {"csp": "w CSP", "af": "w AF", "identity": "w/o CSP"}
        for name, vals in self.rows.items():
            out.append(f"{labels.get(name, name):<10}{self.params[name]['adapters']:>10}"
                       + "".join(f"{v:>10.2f}" for v in vals))
        return "\n".join(out)


def run_ablation(base_config: ModelConfig, data: ImageDataset, train_spec: TrainSpec,
                 eval_data: Optional[ImageDataset] = None,
                 adapters: Sequence[str] = ("csp", "af", "identity"),
                 eval_snrs: Optional[Sequence[float]] = None,
                 distribution: Optional[str] = None,
                 progress: Optional[Callable[[str], None]] = None) -> AblationReport:
    """Train one model per adapter kind (all else equal) and tabulate PSNR."""
    eval_data = eval_data or data
    snrs = list(eval_snrs or train_spec.eval_snrs)
    dist = Distribution.parse(distribution or ("awgn" if "awgn" in train_spec.distributions
                                               else train_spec.distributions[0]))
    rows, params = {}, {}
    for kind in adapters:
        kind = AdapterKind(kind).value
        cfg = dataclasses.replace(base_config, adapter=kind)
        model = PJSCC(cfg)
        params[kind] = count_params(model)
        trainer = Trainer(model, data, train_spec)
        trainer.run()
        res = evaluate(model, eval_data, [ChannelSpec(dist, s) for s in snrs],
                       seed=train_spec.seed + 1)
        rows[kind] = [r["psnr_mean"] for r in res]
        if progress:
            progress(f"{kind}: " + " ".join(f"{v:.2f}" for v in rows[kind]))
    return AblationReport(snrs, dist.value, rows, params)
