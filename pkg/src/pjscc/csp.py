"""Channel-state conditioning adapters.

``CSPAdapter`` fuses a learnable prompt, chosen by (distribution, SNR level),
with the image features. ``AFAdapter`` is the SNR-concatenation gating
baseline and ``IdentityAdapter`` removes conditioning altogether; the three
are interchangeable for ablations.
"""
from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import SwinLayer, init_weights
from .channel import ChannelSpec, Distribution


class AdapterKind(str, enum.Enum):
    CSP = "csp"
    AF = "af"
    IDENTITY = "identity"


class Role(str, enum.Enum):
    ENCODER = "enc"
    DECODER = "dec"


@dataclass(frozen=True)
class PromptKey:
    role: Role
    stage: int  # 1-based
    distribution: Distribution
    level: int  # 1-based

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        object.__setattr__(self, "distribution", Distribution.parse(self.distribution))

    @property
    def name(self) -> str:
        # ParameterDict names may not contain dots
        return f"{self.role.value}_s{self.stage}_{self.distribution.value}_l{self.level}"

    @classmethod
    def from_name(cls, name: str) -> "PromptKey":
        role, stage, dist, level = name.split("_")
        return cls(Role(role), int(stage[1:]), Distribution(dist), int(level[1:]))


def snr_level(snr_db: float, level_snrs: Sequence[float]) -> int:
    """Nearest anchor (1-based); ties go to the lower anchor, out-of-range clamps."""
    i = bisect.bisect_left(level_snrs, snr_db)
    if i == 0:
        return 1
    if i == len(level_snrs):
        return len(level_snrs)
    lo, hi = level_snrs[i - 1], level_snrs[i]
    return i if snr_db - lo <= hi - snr_db else i + 1


def interpolation_weights(snr_db: float, level_snrs: Sequence[float]) -> list[tuple[int, float]]:
    """Linear blend of the two bracketing anchors as (level, weight) pairs."""
    if snr_db <= level_snrs[0]:
        return [(1, 1.0)]
    if snr_db >= level_snrs[-1]:
        return [(len(level_snrs), 1.0)]
    i = bisect.bisect_right(level_snrs, snr_db)
    lo, hi = level_snrs[i - 1], level_snrs[i]
    w = (snr_db - lo) / (hi - lo)
    return [(i, 1.0 - w), (i + 1, w)]


class PromptBank(nn.Module):
    """All learnable prompts, one ``[c, size, size]`` tensor per
    (role, stage, distribution, level)."""

    def __init__(self, stage_dims: dict[Role, Sequence[int]], level_snrs: Sequence[float],
                 distributions: Iterable, prompt_size: int = 32,
                 interpolate: bool = False):
        super().__init__()
        level_snrs = [float(s) for s in level_snrs]
        if not level_snrs:
            raise ValueError("prompt bank needs at least one SNR level")
        if any(b <= a for a, b in zip(level_snrs, level_snrs[1:])):
            raise ValueError(f"level SNRs must be strictly increasing: {level_snrs}")
        dists = sorted({Distribution.parse(d) for d in distributions}, key=lambda d: d.value)
        if not dists:
            raise ValueError("prompt bank needs at least one channel distribution")
        self.level_snrs = level_snrs
        self.distributions = dists
        self.stage_dims = {Role(r): list(d) for r, d in stage_dims.items()}
        self.prompt_size = prompt_size
        self.interpolate = interpolate
        self.prompts = nn.ParameterDict()
        for key in self.keys():
            dim = self.stage_dims[key.role][key.stage - 1]
            p = torch.empty(dim, prompt_size, prompt_size)
            nn.init.trunc_normal_(p, std=0.02)
            self.prompts[key.name] = nn.Parameter(p)

    def keys(self) -> list[PromptKey]:
        return [PromptKey(role, stage, dist, level)
                for role in sorted(self.stage_dims, key=lambda r: r.value)
                for stage in range(1, len(self.stage_dims[role]) + 1)
                for dist in self.distributions
                for level in range(1, len(self.level_snrs) + 1)]

    @property
    def num_stages(self) -> int:
        return max(len(v) for v in self.stage_dims.values())

    def __getitem__(self, key: PromptKey) -> nn.Parameter:
        return self.prompts[key.name]

    def __len__(self) -> int:
        return len(self.prompts)

    def select(self, spec: ChannelSpec, role: Role) -> list[torch.Tensor]:
        return select_prompts(self, spec, role)

    def keyed_state(self) -> dict[tuple, torch.Tensor]:
        """Prompts keyed by explicit (role, stage, distribution, level) tuples."""
        return {(k.role.value, k.stage, k.distribution.value, k.level): self[k].detach().clone()
                for k in self.keys()}

    def load_keyed_state(self, state: dict) -> None:
        with torch.no_grad():
            for (role, stage, dist, level), value in state.items():
                key = PromptKey(Role(role), int(stage), Distribution(dist), int(level))
                self[key].copy_(value)


def init_prompt_bank(config, generator_seed: int | None = None) -> PromptBank:
    """Build the bank described by a ``ModelConfig``; seeded if requested."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed if generator_seed is None else generator_seed)
        return PromptBank(config.prompt_stage_dims(), config.level_snrs,
                          config.distributions, config.prompt_size,
                          interpolate=config.prompt_interpolation)


def select_prompts(bank: PromptBank, spec: ChannelSpec, role: Role | str) -> list[torch.Tensor]:
    """One prompt per stage (in stage order) for the given role and channel."""
    role = Role(role)
    if spec.distribution not in bank.distributions:
        raise KeyError(f"no prompts for channel distribution {spec.distribution.value!r}")
    out = []
    for stage in range(1, len(bank.stage_dims[role]) + 1):
        if bank.interpolate:
            mix = interpolation_weights(spec.snr_db, bank.level_snrs)
            p = sum(w * bank[PromptKey(role, stage, spec.distribution, lvl)] for lvl, w in mix)
        else:
            lvl = snr_level(spec.snr_db, bank.level_snrs)
            p = bank[PromptKey(role, stage, spec.distribution, lvl)]
        out.append(p)
    return out


class CSPAdapter(nn.Module):
    """Prompt fusion: GAP+MLP descriptor modulates the prompt, a 3x3 conv
    mixes it, it is resized to the feature grid, concatenated with the
    features, passed through one windowed transformer layer and projected
    back to ``dim`` channels by a 1x1 conv."""

    kind = AdapterKind.CSP

    def __init__(self, dim: int, num_heads: int, window_size: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim))
        self.prompt_conv = nn.Conv2d(dim, dim, kernel_size=3, padding=1)
        self.block = SwinLayer(2 * dim, num_heads, window_size, shift=False, mlp_ratio=mlp_ratio)
        self.fuse = nn.Conv2d(2 * dim, dim, kernel_size=1)
        self.apply(init_weights)

    def prompt_branch(self, y1, prompt):
        if prompt.dim() == 3:
            prompt = prompt.unsqueeze(0)
        if prompt.shape[1] != y1.shape[1]:
            raise ValueError(f"prompt has {prompt.shape[1]} channels, features have {y1.shape[1]}")
        y2 = self.mlp(y1.mean(dim=(2, 3)))
        branch = self.prompt_conv(y2[:, :, None, None] * prompt)
        if branch.shape[-2:] != y1.shape[-2:]:
            branch = F.interpolate(branch, size=y1.shape[-2:], mode="bilinear",
                                   align_corners=False)
        return branch

    def transformer(self, cat):
        return self.block(cat.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)

    def forward(self, y1, prompt=None, snr_db=None):
        if prompt is None:
            raise ValueError("CSP adapter requires a prompt")
        cat = torch.cat([self.prompt_branch(y1, prompt), y1], dim=1)
        return self.fuse(self.transformer(cat))


class AFAdapter(nn.Module):
    """SNR-aware channel gating: sigmoid(FC(ReLU(FC([GAP(y), snr])))) * y."""

    kind = AdapterKind.AF

    def __init__(self, dim: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, dim // reduction)
        self.fc1 = nn.Linear(dim + 1, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.apply(init_weights)

    def forward(self, y1, prompt=None, snr_db=None):
        if snr_db is None:
            raise ValueError("AF adapter requires the channel SNR")
        B = y1.shape[0]
        snr = torch.as_tensor(snr_db, dtype=y1.dtype, device=y1.device).reshape(-1, 1)
        snr = snr.expand(B, 1)
        ctx = torch.cat([y1.mean(dim=(2, 3)), snr], dim=1)
        gate = torch.sigmoid(self.fc2(F.relu(self.fc1(ctx))))
        return y1 * gate[:, :, None, None]


class IdentityAdapter(nn.Module):
    kind = AdapterKind.IDENTITY

    def forward(self, y1, prompt=None, snr_db=None):
        return y1


def make_adapter(kind: AdapterKind | str, dim: int, num_heads: int, window_size: int,
                 mlp_ratio: float = 4.0) -> nn.Module:
    kind = AdapterKind(kind)
    if kind is AdapterKind.CSP:
        return CSPAdapter(dim, num_heads, window_size, mlp_ratio)
    if kind is AdapterKind.AF:
        return AFAdapter(dim)
    return IdentityAdapter()


def csp_forward(y1, prompt, adapter: CSPAdapter):
    return adapter(y1, prompt=prompt)


def af_forward(y1, spec: ChannelSpec, adapter: AFAdapter):
    return adapter(y1, snr_db=spec.snr_db)


def identity_forward(y1):
    return y1
