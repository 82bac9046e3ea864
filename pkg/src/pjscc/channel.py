"""Physical-layer simulation: power normalization, AWGN and Rayleigh fading.

Symbol tensors are complex with the symbol axis last, so a batch of codes is
``[B, K]`` and a single code is ``[K]``. Every random draw goes through an
explicit ``torch.Generator`` so runs are reproducible.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Optional

import torch


class DegenerateInputError(ValueError):
    """Raised when a code cannot be power-normalized (all-zero symbols)."""


class Distribution(str, enum.Enum):
    AWGN = "awgn"
    RAYLEIGH = "rayleigh"

    @classmethod
    def parse(cls, value: "str | Distribution") -> "Distribution":
        if isinstance(value, Distribution):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown channel distribution {value!r}") from None


@dataclass(frozen=True)
class ChannelSpec:
    """Channel condition shared by encoder and decoder: fading kind + SNR (dB)."""

    distribution: Distribution
    snr_db: float

    def __post_init__(self):
        object.__setattr__(self, "distribution", Distribution.parse(self.distribution))
        if not math.isfinite(float(self.snr_db)):
            raise ValueError(f"snr_db must be finite, got {self.snr_db}")
        object.__setattr__(self, "snr_db", float(self.snr_db))


@dataclass
class SemanticCode:
    symbols: torch.Tensor  # complex, [..., K]
    power_budget: float = 1.0

    @property
    def num_symbols(self) -> int:
        return self.symbols.shape[-1]


@dataclass
class ReceivedCode:
    symbols: torch.Tensor
    gains: Optional[torch.Tensor] = None  # present iff the channel was Rayleigh

    @property
    def num_symbols(self) -> int:
        return self.symbols.shape[-1]


def snr_to_noise_power(snr_db: float, P: float = 1.0) -> float:
    """Per-complex-symbol noise power sigma^2 giving ``snr_db`` at signal power P."""
    if not P > 0:
        raise ValueError(f"signal power P must be positive, got {P}")
    if not math.isfinite(snr_db):
        raise ValueError(f"snr_db must be finite, got {snr_db}")
    return P / 10.0 ** (snr_db / 10.0)


def normalize_power(raw: torch.Tensor, P: float = 1.0) -> SemanticCode:
    """Scale each code (last axis) so that sum |z_i|^2 = K * P."""
    if not torch.is_complex(raw):
        raise TypeError("normalize_power expects complex symbols")
    if raw.shape[-1] < 1:
        raise ValueError("code must contain at least one symbol")
    K = raw.shape[-1]
    energy = (raw.real.square() + raw.imag.square()).sum(dim=-1, keepdim=True)
    if bool((energy == 0).any()):
        raise DegenerateInputError("cannot normalize an all-zero code")
    scale = torch.sqrt(K * P / energy)
    return SemanticCode(raw * scale, power_budget=P)


def complex_noise(shape, variance: float, generator: torch.Generator,
                  dtype: torch.dtype = torch.complex64, device=None) -> torch.Tensor:
    """Draw CN(0, variance): real and imaginary parts each N(0, variance/2)."""
    real_dtype = _real_dtype(dtype)
    std = math.sqrt(variance / 2.0)
    re = torch.randn(shape, generator=generator, dtype=real_dtype, device=device)
    im = torch.randn(shape, generator=generator, dtype=real_dtype, device=device)
    return torch.complex(re * std, im * std)


def _real_dtype(dtype: torch.dtype) -> torch.dtype:
    return torch.float64 if dtype == torch.complex128 else torch.float32


def transmit_awgn(code: SemanticCode, noise_power: float,
                  generator: torch.Generator) -> ReceivedCode:
    if noise_power < 0:
        raise ValueError(f"noise power must be non-negative, got {noise_power}")
    z = code.symbols
    if noise_power == 0:
        return ReceivedCode(z)
    n = complex_noise(z.shape, noise_power, generator, dtype=z.dtype, device=z.device)
    return ReceivedCode(z + n)


def transmit_rayleigh(code: SemanticCode, noise_power: float,
                      generator: torch.Generator,
                      gains: Optional[torch.Tensor] = None) -> ReceivedCode:
    """Element-wise fading h_i ~ CN(0, 1) followed by AWGN.

    ``gains`` overrides the random draw (used by tests to force h = 1).
    """
    if noise_power < 0:
        raise ValueError(f"noise power must be non-negative, got {noise_power}")
    z = code.symbols
    if gains is None:
        gains = complex_noise(z.shape, 1.0, generator, dtype=z.dtype, device=z.device)
    else:
        gains = gains.to(dtype=z.dtype, device=z.device).expand_as(z)
    faded = gains * z
    if noise_power > 0:
        faded = faded + complex_noise(z.shape, noise_power, generator,
                                      dtype=z.dtype, device=z.device)
    return ReceivedCode(faded, gains=gains)


def transmit(code: SemanticCode, spec: ChannelSpec, generator: torch.Generator,
             noiseless: bool = False) -> ReceivedCode:
    """Send ``code`` through the channel described by ``spec``."""
    sigma2 = 0.0 if noiseless else snr_to_noise_power(spec.snr_db, code.power_budget)
    if spec.distribution is Distribution.AWGN:
        return transmit_awgn(code, sigma2, generator)
    return transmit_rayleigh(code, sigma2, generator)


def sample_channel(snr_lo: float, snr_hi: float, distributions: Iterable,
                   generator: torch.Generator) -> ChannelSpec:
    """Draw SNR ~ U[snr_lo, snr_hi] and a distribution uniformly from the set."""
    dists = sorted({Distribution.parse(d) for d in distributions}, key=lambda d: d.value)
    if not dists:
        raise ValueError("distribution set must be non-empty")
    if snr_lo > snr_hi:
        raise ValueError(f"snr_lo ({snr_lo}) exceeds snr_hi ({snr_hi})")
    u = torch.rand((), generator=generator, dtype=torch.float64).item()
    snr = snr_lo + (snr_hi - snr_lo) * u
    idx = int(torch.randint(len(dists), (), generator=generator).item())
    return ChannelSpec(dists[idx], snr)


def empirical_snr_db(signal: torch.Tensor, received: torch.Tensor) -> float:
    """10 log10(signal power / noise power) measured from a transmission."""
    noise = received - signal
    ps = signal.abs().square().mean().item()
    pn = noise.abs().square().mean().item()
    return 10.0 * math.log10(ps / pn)
