import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from conftest import micro_config
from pjscc.codec import PJSCC
from pjscc.metrics import (LOG_LPIPS_FLOOR, PSNR_CAP_DB, UnsupportedLayerError, count_params,
                           estimate_flops, log_distance, log_lpips, model_flops, psnr,
                           psnr_per_image, pyramid_distance)


def test_psnr_uniform_error():
    x = torch.zeros(3, 8, 8, dtype=torch.float64)
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_peak_255():
    x = torch.zeros(3, 8, 8, dtype=torch.float64)
    assert psnr(x, x + 1.0, peak=255.0) == pytest.approx(48.1308, abs=1e-4)


def test_psnr_identical_is_capped():
    x = torch.rand(3, 8, 8)
    assert psnr(x, x) == PSNR_CAP_DB


def test_psnr_errors():
    with pytest.raises(ValueError):
        psnr(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))
    with pytest.raises(ValueError):
        psnr(torch.zeros(3, 4, 4), torch.zeros(3, 4, 4), peak=0)


def test_psnr_matches_brute_force():
    g = torch.Generator().manual_seed(0)
    x, y = torch.rand(2, 3, 4, 4, generator=g), torch.rand(2, 3, 4, 4, generator=g)
    vals = [(a - b) ** 2 for a, b in zip(x.flatten().tolist(), y.flatten().tolist())]
    expected = 10 * math.log10(1 / (sum(vals) / len(vals)))
    assert psnr(x, y) == pytest.approx(expected, abs=1e-9)
    per = psnr_per_image(x, y)
    assert per[0] == pytest.approx(psnr(x[0], y[0]), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-4, 0.4), st.floats(1.01, 3.0))
def test_psnr_decreases_with_error(eps, factor):
    x = torch.zeros(3, 4, 4, dtype=torch.float64)
    assert psnr(x, x + eps * factor) < psnr(x, x + eps)


@pytest.mark.parametrize("d, expected", [(0.0458, -13.39), (1.0, 0.0), (0.0, LOG_LPIPS_FLOOR)])
def test_log_distance_fixtures(d, expected):
    assert log_distance(d) == pytest.approx(expected, abs=5e-3)


def test_log_distance_rejects_negative():
    with pytest.raises(ValueError):
        log_distance(-1e-3)
    with pytest.raises(ValueError):
        log_lpips(torch.zeros(3, 4, 4), torch.zeros(3, 4, 4), pd=lambda a, b: -0.5)


def test_log_lpips_uses_plugged_distance():
    x = torch.zeros(3, 4, 4)
    assert log_lpips(x, x, pd=lambda a, b: 0.0458) == pytest.approx(-13.39, abs=5e-3)
    assert log_lpips(x, x) == LOG_LPIPS_FLOOR


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-8, 10.0), st.floats(1.01, 10.0))
def test_log_distance_monotone(d, factor):
    assert log_distance(d * factor) > log_distance(d)


def test_pyramid_distance_properties():
    g = torch.Generator().manual_seed(1)
    x = torch.rand(3, 32, 32, generator=g)
    assert pyramid_distance(x, x) == 0.0
    near, far = x + 0.01, x + 0.1
    assert 0 < pyramid_distance(x, near) < pyramid_distance(x, far)


def test_count_params_groups_sum():
    model = PJSCC(micro_config())
    p = count_params(model)
    assert p["total"] == sum(x.numel() for x in model.parameters())
    assert p["total"] == p["backbone"] + p["adapters"] + p["prompts"] + p["heads"]
    assert min(p.values()) > 0


def test_doubling_levels_doubles_prompts_only():
    a = count_params(PJSCC(micro_config(level_snrs=[1, 7, 13])))
    b = count_params(PJSCC(micro_config(level_snrs=[1, 3, 5, 7, 9, 13])))
    assert b["prompts"] == 2 * a["prompts"]
    for k in ("backbone", "adapters", "heads"):
        assert a[k] == b[k]


def test_identity_adapter_has_no_adapter_params():
    assert count_params(PJSCC(micro_config(adapter="identity")))["adapters"] == 0
    assert count_params(PJSCC(micro_config(adapter="identity")))["prompts"] == 0


def test_linear_flops_fixture():
    k, m = 7, 5
    assert estimate_flops(nn.Linear(k, m), (1, k)) == 2 * k * m
    assert estimate_flops(nn.Linear(k, m), (4, 3, k)) == 2 * k * m * 12


def test_conv_flops_scale_with_area():
    conv = nn.Conv2d(3, 4, 3, padding=1)
    small = estimate_flops(conv, (1, 3, 8, 8))
    assert small == 2 * 3 * 9 * 4 * 64
    assert estimate_flops(conv, (1, 3, 16, 16)) == 4 * small


def test_flops_unsupported_layer():
    with pytest.raises(UnsupportedLayerError, match="ConvTranspose2d"):
        estimate_flops(nn.Sequential(nn.ConvTranspose2d(3, 3, 2)), (1, 3, 4, 4))


def test_model_flops_deterministic_and_positive():
    model = PJSCC(micro_config())
    a, b = model_flops(model), model_flops(model)
    assert a == b > 0
    assert model_flops(model, batch=2) == 2 * a


def test_model_flops_match_torch_flop_counter():
    # independent oracle: torch's dispatcher-level matmul/conv counter
    from torch.utils.flop_counter import FlopCounterMode

    from pjscc.channel import ChannelSpec

    model = PJSCC(micro_config())
    counter = FlopCounterMode(display=False)
    with counter, torch.no_grad():
        model(torch.zeros(1, 3, 32, 32), ChannelSpec("awgn", 1), torch.Generator(),
              noiseless=True)
    assert model_flops(model) == counter.get_total_flops()


@pytest.mark.parametrize("adapter", ["af", "identity"])
def test_model_flops_all_adapter_kinds(adapter):
    csp = model_flops(PJSCC(micro_config()))
    assert 0 < model_flops(PJSCC(micro_config(adapter=adapter))) < csp
