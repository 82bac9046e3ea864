"""Reconstruction metrics and model accounting (parameters, FLOPs)."""
from __future__ import annotations

import math
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

PSNR_CAP_DB = 100.0
LOG_LPIPS_FLOOR = -100.0

PerceptualDistance = Callable[[torch.Tensor, torch.Tensor], float]


def _check_shapes(x, y):
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def mse(x: torch.Tensor, y: torch.Tensor) -> float:
    _check_shapes(x, y)
    return (x.double() - y.double()).square().mean().item()


def psnr_from_mse(err: float, peak: float = 1.0) -> float:
    if err <= 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / err))


def psnr(x: torch.Tensor, y: torch.Tensor, peak: float = 1.0) -> float:
    """PSNR in dB; identical inputs return the 100 dB cap."""
    if not peak > 0:
        raise ValueError("peak must be positive")
    return psnr_from_mse(mse(x, y), peak)


def psnr_per_image(x: torch.Tensor, y: torch.Tensor, peak: float = 1.0) -> list[float]:
    _check_shapes(x, y)
    errs = (x.double() - y.double()).square().flatten(1).mean(dim=1)
    return [psnr_from_mse(e, peak) for e in errs.tolist()]


def log_lpips(x: torch.Tensor, y: torch.Tensor, pd: Optional[PerceptualDistance] = None) -> float:
    """10*log10 of a perceptual distance; zero distance maps to -100."""
    d = float((pd or pyramid_distance)(x, y))
    return log_distance(d)


def log_distance(d: float) -> float:
    if d < 0 or math.isnan(d):
        raise ValueError(f"perceptual distance must be non-negative, got {d}")
    if d == 0:
        return LOG_LPIPS_FLOOR
    return 10.0 * math.log10(d)


_BLUR = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _blur_down(img: torch.Tensor) -> torch.Tensor:
    C = img.shape[1]
    k = _BLUR.to(img.dtype)
    kx = k.view(1, 1, 1, 5).repeat(C, 1, 1, 1)
    ky = k.view(1, 1, 5, 1).repeat(C, 1, 1, 1)
    img = F.conv2d(F.pad(img, (2, 2, 0, 0), mode="replicate"), kx, groups=C)
    img = F.conv2d(F.pad(img, (0, 0, 2, 2), mode="replicate"), ky, groups=C)
    return img[:, :, ::2, ::2]


def pyramid_distance(x: torch.Tensor, y: torch.Tensor, levels: int = 3) -> float:
    """NOT-LPIPS stand-in: mean MSE over Gaussian-pyramid levels.

    Satisfies d(x, x) = 0 and d >= 0 so the LogLPIPS plumbing can be exercised
    without a pretrained perceptual network. Plug real LPIPS in through the
    ``pd`` argument of :func:`log_lpips` when comparing with published numbers.
    """
    _check_shapes(x, y)
    a = x.double().reshape(-1, *x.shape[-3:])
    b = y.double().reshape(-1, *y.shape[-3:])
    total = 0.0
    used = 0
    for _ in range(levels):
        total += (a - b).square().mean().item()
        used += 1
        if min(a.shape[-2:]) < 2:
            break
        a, b = _blur_down(a), _blur_down(b)
    return total / used


# ------------------------------------------------------------------ accounting

def count_params(model: nn.Module) -> dict[str, int]:
    """Learnable scalars by group: backbone, adapters, prompts, heads (+ total)."""
    groups = {"backbone": 0, "adapters": 0, "prompts": 0, "heads": 0}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        groups[_param_group(name)] += p.numel()
    groups["total"] = sum(groups.values())
    return groups


def _param_group(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "prompts":
        return "prompts"
    if len(parts) > 1 and parts[1] == "adapters":
        return "adapters"
    if len(parts) > 1 and parts[1] == "head":
        return "heads"
    return "backbone"


class UnsupportedLayerError(TypeError):
    pass


# leaves whose cost is ignored (normalisation, activations, reshapes, parameter stores)
_FREE_LAYERS = (nn.LayerNorm, nn.GELU, nn.ReLU, nn.Sigmoid, nn.Identity, nn.Dropout,
                nn.Softmax, nn.Flatten, nn.ParameterDict, nn.ParameterList)


def _linear_flops(m: nn.Linear, inp, out) -> int:
    tokens = inp[0].numel() // m.in_features
    return 2 * m.in_features * m.out_features * tokens


def _conv_flops(m: nn.Conv2d, inp, out) -> int:
    kh, kw = m.kernel_size
    per_out = (m.in_channels // m.groups) * kh * kw
    return 2 * per_out * out.numel()


def _attention_core_flops(m, inp, out) -> int:
    # q @ k^T and attn @ v: 2 * (2 * N * N * C) per window
    x = inp[0]
    B_, N, C = x.shape
    return 4 * B_ * N * N * C


def estimate_flops(model: nn.Module, input_shape, forward: Optional[Callable] = None) -> int:
    """Analytic FLOP count (2 x multiply-accumulates) of one forward pass.

    Per-layer formulas: Linear 2*in*out per token; Conv2d
    2*(C_in/groups)*k_h*k_w per output element; windowed attention adds
    4*N^2*C per window for its two matmuls. LayerNorm, activations, softmax,
    resizing and element-wise products are not counted.
    ``forward(model, x)`` overrides the default ``model(x)`` call.
    """
    from .backbone import WindowAttention
    from .csp import IdentityAdapter

    rules = {nn.Linear: _linear_flops, nn.Conv2d: _conv_flops}
    handles = []
    total = [0]

    def hook_for(fn):
        def hook(m, inp, out):
            total[0] += fn(m, inp, out)
        return hook

    for name, m in model.named_modules():
        if isinstance(m, WindowAttention):
            handles.append(m.register_forward_hook(hook_for(_attention_core_flops)))
            continue
        if any(True for _ in m.children()):
            continue
        rule = next((r for t, r in rules.items() if isinstance(m, t)), None)
        if rule is not None:
            handles.append(m.register_forward_hook(hook_for(rule)))
        elif not isinstance(m, _FREE_LAYERS + (IdentityAdapter,)):
            for h in handles:
                h.remove()
            raise UnsupportedLayerError(f"no FLOP formula for layer {name or '<root>'} "
                                        f"({type(m).__name__})")
    param = next(model.parameters(), None)
    dtype = param.dtype if param is not None else torch.float32
    x = torch.zeros(tuple(input_shape), dtype=dtype)
    try:
        with torch.no_grad():
            if forward is None:
                model(x)
            else:
                forward(model, x)
    finally:
        for h in handles:
            h.remove()
    return total[0]


def model_flops(model: nn.Module, batch: int = 1) -> int:
    """FLOPs of encode + decode for a ``PJSCC`` model at its configured size."""
    from .channel import ChannelSpec, Distribution

    cfg = model.cfg
    spec = ChannelSpec(Distribution.parse(cfg.distributions[0]), cfg.level_snrs[0])
    gen = torch.Generator().manual_seed(0)

    def run(m, x):
        # all-zero images still give a non-degenerate code thanks to pos embeddings
        m(x, spec, gen, noiseless=True)

    return estimate_flops(model, (batch, 3, cfg.image_size, cfg.image_size), run)
