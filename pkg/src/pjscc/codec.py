"""Encoder/decoder assembly, the symbol-rate heads and checkpoint I/O."""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import PatchEmbed, Resample, StageConfig, TransformerStage, init_weights
from .channel import (ChannelSpec, Distribution, ReceivedCode, SemanticCode,
                      normalize_power, transmit)
from .csp import AdapterKind, PromptBank, Role, init_prompt_bank, make_adapter

CHECKPOINT_FORMAT = "pjscc-checkpoint"
CHECKPOINT_VERSION = 1

Specs = Union[ChannelSpec, Sequence[ChannelSpec]]


class CheckpointVersionError(RuntimeError):
    """Checkpoint format/version or architecture does not match this code."""


def cbr_to_symbol_count(R: float, H: int, W: int) -> int:
    """Complex symbols per image for channel bandwidth ratio R = K / (3HW)."""
    if not R > 0:
        raise ValueError(f"CBR must be positive, got {R}")
    if H < 1 or W < 1:
        raise ValueError(f"image dims must be positive, got {H}x{W}")
    K = round(R * 3 * H * W)
    if K < 1:
        raise ValueError(f"CBR {R} at {H}x{W} yields no symbols")
    return K


@dataclass
class ModelConfig:
    """Architecture plus conditioning setup. Defaults give the 32x32 model."""

    resolution_class: str = "low"
    image_size: int = 32
    patch_size: int = 2
    stage_dims: list = field(default_factory=lambda: [64, 128, 256])
    blocks: list = field(default_factory=lambda: [1, 2])
    T: int = 1
    window_size: int = 4
    num_heads: list = field(default_factory=lambda: [2, 4, 8])
    mlp_ratio: float = 4.0
    cbr: float = 1 / 3
    head: str = "dense"  # dense | token
    adapter: str = "csp"
    level_snrs: list = field(default_factory=lambda: [1.0, 4.0, 7.0, 10.0, 13.0])
    distributions: list = field(default_factory=lambda: ["awgn", "rayleigh"])
    prompt_size: int = 32
    prompt_interpolation: bool = False
    decoder_csi: bool = False
    P: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.adapter = AdapterKind(self.adapter).value
        self.distributions = [Distribution.parse(d).value for d in self.distributions]
        self.validate()

    @classmethod
    def low(cls, base_dim: int = 64, head_dim: int = 32, **overrides) -> "ModelConfig":
        dims = [base_dim * 2 ** i for i in range(3)]
        kw = dict(resolution_class="low", image_size=32, patch_size=2, stage_dims=dims,
                  blocks=[1, 2], T=1, window_size=4,
                  num_heads=[max(1, d // head_dim) for d in dims], cbr=1 / 3, head="dense")
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def high(cls, base_dim: int = 96, head_dim: int = 32, **overrides) -> "ModelConfig":
        dims = [base_dim * 2 ** i for i in range(5)]
        kw = dict(resolution_class="high", image_size=256, patch_size=4, stage_dims=dims,
                  blocks=[1, 1, 3, 1], T=3, window_size=8,
                  num_heads=[max(1, d // head_dim) for d in dims], cbr=1 / 16, head="token")
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """The desk-scale 32x32 config (base dim 32)."""
        return cls.low(base_dim=32, **overrides)

    def validate(self) -> None:
        n = len(self.blocks)
        if n < 1 or any(b < 1 for b in self.blocks):
            raise ValueError(f"invalid block counts {self.blocks}")
        if self.T != n - 1:
            raise ValueError(f"T={self.T} requires {self.T + 1} stages, got blocks={self.blocks}")
        if len(self.stage_dims) != n + 1:
            raise ValueError("stage_dims needs one entry per stage plus the output dim")
        if len(self.num_heads) != len(self.stage_dims):
            raise ValueError("num_heads needs one entry per stage_dims entry")
        for d, h in zip(self.stage_dims, self.num_heads):
            if d % h:
                raise ValueError(f"dim {d} not divisible by {h} heads")
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch "
                             f"size {self.patch_size}")
        g = self.image_size // self.patch_size
        if g % (2 ** n):
            raise ValueError(f"token grid {g} cannot be halved {n} times")
        if self.head not in ("dense", "token"):
            raise ValueError(f"unknown head type {self.head!r}")
        if self.head == "token" and (2 * self.K) % (self.latent_grid ** 2):
            raise ValueError("token head needs 2K divisible by the latent token count")
        if not self.P > 0:
            raise ValueError("P must be positive")
        if self.prompt_size < 1:
            raise ValueError("prompt size must be positive")
        if not self.distributions:
            raise ValueError("at least one channel distribution is required")
        if not self.level_snrs:
            raise ValueError("at least one SNR level is required")

    @property
    def K(self) -> int:
        return cbr_to_symbol_count(self.cbr, self.image_size, self.image_size)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def latent_grid(self) -> int:
        return self.grid // 2 ** len(self.blocks)

    def stage_window(self, grid: int) -> int:
        return min(self.window_size, grid)

    def encoder_csp_dims(self) -> list[int]:
        return [self.stage_dims[j] for j in range(1, self.T + 1)]

    def decoder_csp_dims(self) -> list[int]:
        return [self.stage_dims[-1 - j] for j in range(1, self.T + 1)]

    def prompt_stage_dims(self) -> dict[Role, list[int]]:
        return {Role.ENCODER: self.encoder_csp_dims(), Role.DECODER: self.decoder_csp_dims()}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _as_spec_list(spec: Specs, batch: int) -> list[ChannelSpec]:
    if isinstance(spec, ChannelSpec):
        return [spec] * batch
    specs = list(spec)
    if len(specs) != batch:
        raise ValueError(f"got {len(specs)} channel specs for a batch of {batch}")
    return specs


def _stage_prompts(bank: PromptBank | None, specs: list[ChannelSpec], role: Role):
    """Per-stage prompts, shared ``[c,s,s]`` when one spec, else ``[B,c,s,s]``."""
    if bank is None:
        return None
    if all(s == specs[0] for s in specs):
        return bank.select(specs[0], role)
    per_sample = [bank.select(s, role) for s in specs]
    return [torch.stack(ps) for ps in zip(*per_sample)]


class SymbolHead(nn.Module):
    """Features -> 2K reals packed (re, im) into K complex symbols."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mode = cfg.head
        self.K = cfg.K
        c, g = cfg.stage_dims[-1], cfg.latent_grid
        if self.mode == "dense":
            self.proj = nn.Linear(c * g * g, 2 * self.K)
        else:
            self.proj = nn.Linear(c, 2 * self.K // (g * g))

    def forward(self, x):
        B = x.shape[0]
        if self.mode == "dense":
            reals = self.proj(x.flatten(1))
        else:
            reals = self.proj(x.permute(0, 2, 3, 1)).reshape(B, -1)
        return torch.view_as_complex(reals.reshape(B, self.K, 2).contiguous())


class FeatureHead(nn.Module):
    """K received complex symbols (plus optional gains) -> decoder entry features."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mode = cfg.head
        self.K = cfg.K
        self.csi = cfg.decoder_csi
        self.c, self.g = cfg.stage_dims[-1], cfg.latent_grid
        mult = 2 if self.csi else 1
        if self.mode == "dense":
            self.proj = nn.Linear(mult * 2 * self.K, self.c * self.g * self.g)
        else:
            self.proj = nn.Linear(mult * 2 * self.K // (self.g * self.g), self.c)

    def forward(self, symbols, gains=None):
        if symbols.shape[-1] != self.K:
            raise ValueError(f"expected {self.K} symbols, received {symbols.shape[-1]}")
        B = symbols.shape[0]
        g = self.g
        parts = [torch.view_as_real(symbols).reshape(B, g * g, -1) if self.mode == "token"
                 else torch.view_as_real(symbols).reshape(B, -1)]
        if self.csi:
            if gains is None:
                gains = torch.ones_like(symbols)
            gains = torch.view_as_real(gains.expand_as(symbols))
            parts.append(gains.reshape(parts[0].shape))
        flat = torch.cat(parts, dim=-1)
        if self.mode == "dense":
            return self.proj(flat).view(B, self.c, g, g)
        return self.proj(flat).view(B, g, g, self.c).permute(0, 3, 1, 2)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        dims, n = cfg.stage_dims, len(cfg.blocks)
        self.patch_embed = PatchEmbed((cfg.image_size, cfg.image_size), cfg.patch_size, dims[0])
        self.stages = nn.ModuleList()
        self.adapters = nn.ModuleList()
        for i in range(n):
            grid = cfg.grid // 2 ** i
            self.stages.append(TransformerStage(StageConfig(
                cfg.blocks[i], dims[i], cfg.stage_window(grid), cfg.num_heads[i],
                Resample.DOWN, dims[i + 1], cfg.mlp_ratio)))
        for j in range(1, cfg.T + 1):
            grid = cfg.grid // 2 ** j
            self.adapters.append(make_adapter(cfg.adapter, dims[j], cfg.num_heads[j],
                                              cfg.stage_window(grid), cfg.mlp_ratio))
        self.head = SymbolHead(cfg)
        self.stages.apply(init_weights)
        self.head.apply(init_weights)

    def forward(self, images, prompts, snr_db):
        x = self.patch_embed(images)
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = self.adapters[i - 1](x, prompt=prompts[i - 1] if prompts else None,
                                         snr_db=snr_db)
            x = stage(x)
        return self.head(x)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        dims, n = cfg.stage_dims, len(cfg.blocks)
        rev_blocks = list(reversed(cfg.blocks))
        self.head = FeatureHead(cfg)
        self.stages = nn.ModuleList()
        self.adapters = nn.ModuleList()
        for i in range(n):
            grid = cfg.latent_grid * 2 ** i
            d_in, d_out = dims[n - i], dims[n - i - 1]
            self.stages.append(TransformerStage(StageConfig(
                rev_blocks[i], d_in, cfg.stage_window(grid), cfg.num_heads[n - i],
                Resample.UP, d_out, cfg.mlp_ratio)))
        for j in range(1, cfg.T + 1):
            grid = cfg.latent_grid * 2 ** j
            self.adapters.append(make_adapter(cfg.adapter, dims[n - j], cfg.num_heads[n - j],
                                              cfg.stage_window(grid), cfg.mlp_ratio))
        p = cfg.patch_size
        self.out_norm = nn.LayerNorm(dims[0])
        self.out_proj = nn.Linear(dims[0], 3 * p * p)
        self.head.apply(init_weights)
        self.stages.apply(init_weights)
        init_weights(self.out_proj)
        # start predictions at mid-grey so the output clamp is inactive early on
        nn.init.constant_(self.out_proj.bias, 0.5)

    def forward(self, symbols, prompts, snr_db, gains=None):
        x = self.head(symbols, gains)
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = self.adapters[i - 1](x, prompt=prompts[i - 1] if prompts else None,
                                         snr_db=snr_db)
            x = stage(x)
        t = self.out_proj(self.out_norm(x.permute(0, 2, 3, 1)))
        img = F.pixel_shuffle(t.permute(0, 3, 1, 2), self.cfg.patch_size)
        return img.clamp(0.0, 1.0)


class PJSCC(nn.Module):
    """Prompt-conditioned encoder/decoder pair around a simulated channel."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.encoder = Encoder(cfg)
            self.decoder = Decoder(cfg)
            self.prompts = init_prompt_bank(cfg) if cfg.adapter == AdapterKind.CSP.value else None

    @property
    def K(self) -> int:
        return self.cfg.K

    def _condition(self, specs: list[ChannelSpec], role: Role, like: torch.Tensor):
        prompts = _stage_prompts(self.prompts, specs, role)
        if all(s == specs[0] for s in specs):
            snr = specs[0].snr_db
        else:
            snr = torch.tensor([s.snr_db for s in specs], dtype=like.dtype, device=like.device)
        return prompts, snr

    def encode(self, images: torch.Tensor, spec: Specs) -> SemanticCode:
        single = images.dim() == 3
        x = images.unsqueeze(0) if single else images
        specs = _as_spec_list(spec, x.shape[0])
        prompts, snr = self._condition(specs, Role.ENCODER, x)
        code = normalize_power(self.encoder(x, prompts, snr), self.cfg.P)
        if single:
            code = SemanticCode(code.symbols[0], code.power_budget)
        return code

    def decode(self, received: ReceivedCode, spec: Specs) -> torch.Tensor:
        z = received.symbols
        single = z.dim() == 1
        gains = received.gains
        if single:
            z = z.unsqueeze(0)
            gains = gains.unsqueeze(0) if gains is not None else None
        if z.shape[-1] != self.K:
            raise ValueError(f"model expects {self.K} symbols, received {z.shape[-1]}")
        specs = _as_spec_list(spec, z.shape[0])
        prompts, snr = self._condition(specs, Role.DECODER, z.real)
        out = self.decoder(z, prompts, snr, gains)
        return out[0] if single else out

    def transmit(self, code: SemanticCode, spec: Specs, generator: torch.Generator,
                 noiseless: bool = False) -> ReceivedCode:
        z = code.symbols
        if isinstance(spec, ChannelSpec) or z.dim() == 1:
            return transmit(code, spec if isinstance(spec, ChannelSpec) else spec[0],
                            generator, noiseless)
        rows, gains = [], []
        for i, s in enumerate(_as_spec_list(spec, z.shape[0])):
            r = transmit(SemanticCode(z[i], code.power_budget), s, generator, noiseless)
            rows.append(r.symbols)
            gains.append(r.gains if r.gains is not None else torch.ones_like(r.symbols))
        any_fading = any(Distribution.parse(s.distribution) is Distribution.RAYLEIGH
                         for s in spec)
        return ReceivedCode(torch.stack(rows), torch.stack(gains) if any_fading else None)

    def forward(self, images: torch.Tensor, spec: Specs, generator: torch.Generator,
                noiseless: bool = False) -> torch.Tensor:
        code = self.encode(images, spec)
        received = self.transmit(code, spec, generator, noiseless)
        return self.decode(received, spec)


def encode(image: torch.Tensor, spec: Specs, model: PJSCC) -> SemanticCode:
    return model.encode(image, spec)


def decode(received: ReceivedCode, spec: Specs, model: PJSCC) -> torch.Tensor:
    return model.decode(received, spec)


def features_to_symbols(x: torch.Tensor, head: SymbolHead) -> torch.Tensor:
    return head(x.unsqueeze(0))[0] if x.dim() == 3 else head(x)


def symbols_to_features(received: ReceivedCode, head: FeatureHead) -> torch.Tensor:
    z = received.symbols
    if z.dim() == 1:
        g = received.gains.unsqueeze(0) if received.gains is not None else None
        return head(z.unsqueeze(0), g)[0]
    return head(z, received.gains)


# ---------------------------------------------------------------- checkpoints

def _prompt_key_str(key: tuple) -> str:
    role, stage, dist, level = key
    return f"{role}/{stage}/{dist}/{level}"


def save_checkpoint(path: str | os.PathLike, model: PJSCC, train_state: dict | None = None) -> None:
    """Write a versioned checkpoint; the prompt bank is stored under explicit keys."""
    params = {k: v.detach().clone() for k, v in model.state_dict().items()
              if not k.startswith("prompts.")}
    prompts = ({} if model.prompts is None else
               {_prompt_key_str(k): v for k, v in model.prompts.keyed_state().items()})
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "params": params,
        "prompts": prompts,
        "train_state": train_state,
    }
    path = os.fspath(path)
    tmp = path + ".tmp"
    try:
        torch.save(blob, tmp)
        os.replace(tmp, path)
    except OSError as e:
        raise OSError(f"failed to write checkpoint {path}: {e}") from e


def read_checkpoint(path: str | os.PathLike) -> dict:
    try:
        blob = torch.load(os.fspath(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise CheckpointVersionError(f"{path}: not a readable checkpoint ({e})") from e
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointVersionError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {blob.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})")
    return blob


def load_model(path: str | os.PathLike, expect: ModelConfig | None = None) -> tuple[PJSCC, dict]:
    """Rebuild the model stored at ``path``; returns (model, raw checkpoint dict)."""
    blob = read_checkpoint(path)
    cfg = ModelConfig.from_dict(blob["config"])
    if expect is not None and expect.to_dict() != cfg.to_dict():
        raise CheckpointVersionError(f"{path}: checkpoint model config does not match")
    model = PJSCC(cfg)
    missing, unexpected = model.load_state_dict(blob["params"], strict=False)
    missing = [m for m in missing if not m.startswith("prompts.")]
    if missing or unexpected:
        raise CheckpointVersionError(
            f"{path}: parameter mismatch (missing={missing[:3]}, unexpected={unexpected[:3]})")
    if model.prompts is not None:
        keyed = {}
        for name, value in blob["prompts"].items():
            role, stage, dist, level = name.split("/")
            keyed[(role, int(stage), dist, int(level))] = value
        expected = set(model.prompts.keyed_state())
        if set(keyed) != expected:
            raise CheckpointVersionError(f"{path}: prompt bank keys do not match the config")
        model.prompts.load_keyed_state(keyed)
    return model, blob
