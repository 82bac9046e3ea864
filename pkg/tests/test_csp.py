import dataclasses

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from conftest import micro_config
from fd_oracle import check_gradients, projection_loss
from pjscc.channel import ChannelSpec, Distribution
from pjscc.csp import (AFAdapter, CSPAdapter, IdentityAdapter, PromptBank, PromptKey, Role,
                       af_forward, csp_forward, identity_forward, init_prompt_bank,
                       interpolation_weights, make_adapter, select_prompts, snr_level)
from pjscc.metrics import count_params

ANCHORS = [1.0, 4.0, 7.0, 10.0, 13.0]


def bank_for(T=1, L=5, dists=("awgn", "rayleigh"), dim=8, size=32, interpolate=False):
    levels = [float(1 + 3 * i) for i in range(L)]
    dims = [dim * 2 ** j for j in range(T)]
    torch.manual_seed(0)
    return PromptBank({Role.ENCODER: dims, Role.DECODER: dims[::-1]}, levels, dists, size,
                      interpolate=interpolate)


@pytest.mark.parametrize("T, L, dists, expected", [
    (1, 5, ("awgn", "rayleigh"), 20),
    (3, 5, ("awgn",), 30),
])
def test_bank_counts(T, L, dists, expected):
    bank = bank_for(T, L, dists)
    assert len(bank) == expected == 2 * T * L * len(dists)


def test_bank_channel_dims_follow_stages():
    bank = bank_for(T=3, L=5, dists=("awgn",))
    for key in bank.keys():
        assert bank[key].shape == (bank.stage_dims[key.role][key.stage - 1], 32, 32)


def test_init_is_seeded():
    cfg = micro_config(seed=3)
    a, b = init_prompt_bank(cfg), init_prompt_bank(cfg)
    for k in a.keys():
        assert torch.equal(a[k], b[k])
    c = init_prompt_bank(dataclasses.replace(cfg, seed=4))
    assert not torch.equal(a[a.keys()[0]], c[c.keys()[0]])


def test_init_rejects_empty_levels_or_distributions():
    with pytest.raises(ValueError):
        PromptBank({Role.ENCODER: [8]}, [], ["awgn"])
    with pytest.raises(ValueError):
        PromptBank({Role.ENCODER: [8]}, [1.0], [])
    with pytest.raises(ValueError):
        PromptBank({Role.ENCODER: [8]}, [4.0, 1.0], ["awgn"])


def test_prompt_init_statistics():
    bank = bank_for(T=1, L=5, dim=16)
    vals = torch.cat([p.detach().flatten() for p in bank.parameters()])
    assert abs(vals.std().item() - 0.02) < 0.003  # truncated at +-2 so std ~0.0176
    assert vals.abs().max().item() <= 2.0


@pytest.mark.parametrize("snr, level", [
    (4.0, 2),
    (2.5, 1),      # equidistant between 1 and 4 -> lower
    (100.0, 5),    # clamps high
    (-20.0, 1),    # clamps low
    (5.6, 3),
    (11.5, 4),
    (11.6, 5),
])
def test_snr_level(snr, level):
    assert snr_level(snr, ANCHORS) == level


@given(st.floats(-50, 50))
def test_snr_level_is_nearest(snr):
    lvl = snr_level(snr, ANCHORS)
    best = min(abs(snr - a) for a in ANCHORS)
    assert abs(snr - ANCHORS[lvl - 1]) == best


@given(st.floats(-50, 50))
def test_interpolation_weights_sum_to_one(snr):
    mix = interpolation_weights(snr, ANCHORS)
    assert abs(sum(w for _, w in mix) - 1.0) < 1e-12
    assert all(0 <= w <= 1 for _, w in mix)


def test_select_prompts_order_and_identity():
    bank = bank_for(T=3, L=5, dists=("awgn",))
    ps = select_prompts(bank, ChannelSpec("awgn", 4.0), Role.ENCODER)
    assert len(ps) == 3
    for stage, p in enumerate(ps, 1):
        assert p is bank[PromptKey(Role.ENCODER, stage, Distribution.AWGN, 2)]


def test_select_prompts_unknown_distribution():
    bank = bank_for(dists=("awgn",))
    with pytest.raises(KeyError):
        select_prompts(bank, ChannelSpec("rayleigh", 4.0), Role.ENCODER)


def test_select_interpolated():
    bank = bank_for(interpolate=True)
    p = select_prompts(bank, ChannelSpec("awgn", 5.0), Role.DECODER)[0]
    lo = bank[PromptKey(Role.DECODER, 1, Distribution.AWGN, 2)]
    hi = bank[PromptKey(Role.DECODER, 1, Distribution.AWGN, 3)]
    assert torch.allclose(p, (2 / 3) * lo + (1 / 3) * hi)


def test_prompt_key_names_round_trip():
    for key in bank_for(T=2).keys():
        assert PromptKey.from_name(key.name) == key


def _feature(c=8, h=8, w=8, b=2, seed=0, dtype=torch.float32):
    return torch.randn(b, c, h, w, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def test_csp_shape_preserved():
    torch.manual_seed(0)
    for h in (4, 8, 16):
        ad = CSPAdapter(8, 2, 4)
        y1 = _feature(h=h, w=h)
        assert ad(y1, prompt=torch.randn(8, 32, 32)).shape == y1.shape


def test_csp_channel_mismatch():
    ad = CSPAdapter(8, 2, 4)
    with pytest.raises(ValueError):
        csp_forward(_feature(), torch.randn(6, 32, 32), ad)


def test_csp_gated_fusion_equals_transformer_on_feature_channels():
    torch.manual_seed(0)
    c = 8
    ad = CSPAdapter(c, 2, 4)
    with torch.no_grad():
        w = torch.zeros(c, 2 * c, 1, 1)
        w[:, c:, 0, 0] = torch.eye(c)
        ad.fuse.weight.copy_(w)
        ad.fuse.bias.zero_()
    y1, prompt = _feature(), torch.randn(c, 32, 32)
    out = ad(y1, prompt=prompt)
    cat = torch.cat([ad.prompt_branch(y1, prompt), y1], dim=1)
    assert torch.allclose(out, ad.transformer(cat)[:, c:], atol=1e-6)
    # with the prompt branch silenced too, the prompt no longer matters
    with torch.no_grad():
        ad.prompt_conv.weight.zero_()
        ad.prompt_conv.bias.zero_()
    a = ad(y1, prompt=prompt)
    b = ad(y1, prompt=torch.randn(c, 32, 32))
    expected = ad.transformer(torch.cat([torch.zeros_like(y1), y1], 1))[:, c:]
    assert torch.equal(a, b) and torch.allclose(a, expected, atol=1e-6)


def test_csp_per_sample_prompts_match_shared():
    torch.manual_seed(0)
    ad = CSPAdapter(8, 2, 4)
    y1, p = _feature(b=3), torch.randn(8, 32, 32)
    assert torch.allclose(ad(y1, prompt=p), ad(y1, prompt=p.expand(3, -1, -1, -1)), atol=1e-6)


def _perturb(module, seed=0, scale=0.1):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return module


def test_csp_finite_differences_including_prompt():
    torch.manual_seed(0)
    ad = _perturb(CSPAdapter(8, 2, 4).double())
    y1 = _feature(dtype=torch.float64, seed=2)
    prompt = torch.randn(8, 32, 32, dtype=torch.float64,
                         generator=torch.Generator().manual_seed(3)).requires_grad_()
    with torch.no_grad():
        loss_of = projection_loss(y1.shape)
    named = list(ad.named_parameters()) + [("prompt", prompt)]
    errs = check_gradients(lambda: loss_of(ad(y1, prompt=prompt)), named, max_coords=6)
    assert max(errs.values()) < 1e-3, errs
    ad.zero_grad()
    prompt.grad = None
    loss_of(ad(y1, prompt=prompt)).backward()
    assert prompt.grad.abs().sum() > 0


def test_af_shape_and_saturation_hook():
    ad = AFAdapter(8)
    y1 = _feature()
    assert ad(y1, snr_db=5.0).shape == y1.shape
    with torch.no_grad():
        ad.fc2.bias.fill_(1e4)
    assert torch.equal(af_forward(y1, ChannelSpec("awgn", 5.0), ad), y1)


def test_af_conditioning_is_live():
    torch.manual_seed(0)
    ad = _perturb(AFAdapter(8), scale=0.5)
    y1 = _feature()
    assert not torch.equal(ad(y1, snr_db=1.0), ad(y1, snr_db=13.0))


def test_af_finite_differences():
    torch.manual_seed(0)
    ad = _perturb(AFAdapter(8).double(), scale=0.3)
    y1 = _feature(dtype=torch.float64)
    loss_of = projection_loss(y1.shape)
    errs = check_gradients(lambda: loss_of(ad(y1, snr_db=7.0)), ad.named_parameters())
    assert max(errs.values()) < 1e-3, errs


def test_identity_adapter():
    y1 = _feature()
    assert identity_forward(y1) is y1
    assert IdentityAdapter()(y1, prompt=None, snr_db=3.0) is y1
    assert count_params(IdentityAdapter())["total"] == 0


def test_af_param_count_by_hand():
    # fc1 (16+1)*4+4 = 72, fc2 4*16+16 = 80
    assert sum(p.numel() for p in AFAdapter(16).parameters()) == 152


def test_adapter_factory_and_ordering():
    sizes = {k: sum(p.numel() for p in make_adapter(k, 16, 2, 4).parameters())
             for k in ("csp", "af", "identity")}
    assert sizes["identity"] == 0 < sizes["af"] <= sizes["csp"]
