import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fd_oracle import check_gradients, projection_loss
from pjscc.backbone import (PatchEmbed, PatchExpand, PatchMerging, Resample, StageConfig,
                            SwinBlock, TransformerStage, downsample, patch_embed, upsample)
from pjscc.metrics import count_params


def rand(*shape, seed=0, dtype=torch.float32):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


@pytest.mark.parametrize("H, patch, dim, expected", [
    (32, 2, 64, (64, 16, 16)),
    (256, 4, 96, (96, 64, 64)),
])
def test_patch_embed_shapes(H, patch, dim, expected):
    out = patch_embed(torch.rand(3, H, H), patch, dim)
    assert tuple(out.shape) == expected


def test_patch_embed_rejects_indivisible():
    with pytest.raises(ValueError, match="height"):
        patch_embed(torch.rand(3, 32, 32), 5, 16)
    layer = PatchEmbed((32, 32), 2, 8)
    with pytest.raises(ValueError, match="width"):
        layer(torch.rand(1, 3, 32, 31))


def test_patch_embed_adds_position_embedding():
    layer = PatchEmbed((8, 8), 2, 4)
    out = layer(torch.zeros(1, 3, 8, 8))
    assert torch.allclose(out, layer.pos_embed + layer.proj.bias.view(1, -1, 1, 1))


@pytest.mark.parametrize("shape, out_dim, expected", [
    ((64, 16, 16), 128, (128, 8, 8)),
    ((96, 64, 64), 192, (192, 32, 32)),
])
def test_downsample_shapes(shape, out_dim, expected):
    assert tuple(downsample(torch.rand(*shape), out_dim).shape) == expected


def test_downsample_rejects_odd_grid():
    with pytest.raises(ValueError):
        downsample(torch.rand(64, 15, 16), 128)


def test_upsample_shape():
    assert tuple(upsample(torch.rand(128, 8, 8), 64).shape) == (64, 16, 16)


@settings(max_examples=20, deadline=None)
@given(c=st.integers(1, 8), h=st.integers(1, 6), w=st.integers(1, 6), out=st.integers(1, 8))
def test_resample_round_trip_shape(c, h, w, out):
    x = torch.rand(c, 2 * h, 2 * w)
    assert upsample(downsample(x, out), c).shape == x.shape


@settings(max_examples=15, deadline=None)
@given(dim_heads=st.sampled_from([(4, 1), (8, 2), (12, 3)]), ws=st.sampled_from([2, 4]),
       gh=st.integers(1, 3), gw=st.integers(1, 3), batch=st.integers(1, 2))
def test_swin_block_preserves_shape(dim_heads, ws, gh, gw, batch):
    dim, heads = dim_heads
    block = SwinBlock(dim, heads, ws)
    x = torch.rand(batch, dim, gh * ws, gw * ws)
    assert block(x).shape == x.shape


def test_swin_block_window_misalignment():
    with pytest.raises(ValueError, match="window"):
        SwinBlock(8, 2, 4)(torch.rand(1, 8, 6, 8))


def test_swin_block_zero_output_projections_is_identity():
    block = SwinBlock(8, 2, 4)
    with torch.no_grad():
        for layer in block.layers:
            for lin in (layer.attn.proj, layer.mlp.fc2):
                lin.weight.zero_()
                lin.bias.zero_()
    x = torch.rand(2, 8, 8, 8)
    assert torch.equal(block(x), x)


def test_swin_block_deterministic():
    block = SwinBlock(8, 2, 4)
    x = torch.rand(1, 8, 8, 8)
    assert torch.equal(block(x), block(x))


def test_shifted_layer_differs_from_plain():
    # the shift changes which tokens attend to each other
    torch.manual_seed(0)
    block = SwinBlock(8, 2, 4)
    x = torch.rand(1, 8, 8, 8)
    y1 = block.layers[1](x.permute(0, 2, 3, 1))
    block.layers[1].shift = False
    y2 = block.layers[1](x.permute(0, 2, 3, 1))
    assert not torch.allclose(y1, y2)


def test_stage_compositions():
    down = TransformerStage(StageConfig(1, 64, 4, 2, Resample.DOWN, 128))
    assert tuple(down(torch.rand(1, 64, 16, 16)).shape) == (1, 128, 8, 8)
    flat = TransformerStage(StageConfig(2, 64, 4, 2, Resample.NONE))
    assert tuple(flat(torch.rand(1, 64, 16, 16)).shape) == (1, 64, 16, 16)
    up = TransformerStage(StageConfig(1, 32, 4, 2, Resample.UP, 16))
    assert tuple(up(torch.rand(1, 32, 8, 8)).shape) == (1, 16, 16, 16)


def test_low_res_encoder_stages():
    # [N1, N2] = [1, 2] from a 16x16 token grid
    s1 = TransformerStage(StageConfig(1, 64, 4, 2, Resample.DOWN, 128))
    s2 = TransformerStage(StageConfig(2, 128, 4, 4, Resample.DOWN, 256))
    y = s2(s1(torch.rand(1, 64, 16, 16)))
    assert tuple(y.shape) == (1, 256, 4, 4)


def test_stage_config_validation():
    with pytest.raises(ValueError):
        StageConfig(0, 8, 4, 2)
    with pytest.raises(ValueError):
        StageConfig(1, 10, 4, 3)


def test_swin_block_param_count_by_hand():
    # One layer at dim 8, 2 heads, window 4, MLP ratio 4:
    #   norm1 2*8=16, qkv 8*24+24=216, proj 8*8+8=72,
    #   relative bias (2*4-1)^2*2=98, norm2 16, fc1 8*32+32=288, fc2 32*8+8=264
    #   -> 970 per layer, 1940 per (regular + shifted) block.
    assert sum(p.numel() for p in SwinBlock(8, 2, 4).parameters()) == 1940
    # patch merging 8 -> 16: norm 2*32=64, linear 32*16+16=528
    assert sum(p.numel() for p in PatchMerging(8, 16).parameters()) == 592
    stage = TransformerStage(StageConfig(1, 8, 4, 2, Resample.DOWN, 16))
    assert count_params(stage)["total"] == 1940 + 592
    # patch expand 16 -> 8: norm 32, linear 16*32+32=544
    assert sum(p.numel() for p in PatchExpand(16, 8).parameters()) == 576


def _gradcheck_module(module, x):
    module = module.double()
    x = x.double()
    with torch.no_grad():
        loss_of = projection_loss(module(x).shape)
    params = [(n, p) for n, p in module.named_parameters()]
    return check_gradients(lambda: loss_of(module(x)), params, max_coords=6)


def _perturb(module, seed=0):
    # move weights off their special init so no gradient is trivially zero
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return module


def test_swin_block_finite_differences():
    torch.manual_seed(0)
    block = _perturb(SwinBlock(8, 2, 4).double())
    errs = _gradcheck_module(block, rand(1, 8, 8, 8, seed=3, dtype=torch.float64))
    assert max(errs.values()) < 1e-3, errs


@pytest.mark.parametrize("layer", [PatchMerging(8, 6), PatchExpand(8, 4)],
                         ids=["downsample", "upsample"])
def test_resample_finite_differences(layer):
    layer = _perturb(layer.double())
    errs = _gradcheck_module(layer, rand(2, 8, 4, 4, seed=4, dtype=torch.float64))
    assert max(errs.values()) < 1e-3, errs


def test_patch_embed_finite_differences():
    layer = _perturb(PatchEmbed((8, 8), 2, 8).double())
    errs = _gradcheck_module(layer, rand(1, 3, 8, 8, seed=5, dtype=torch.float64))
    assert max(errs.values()) < 1e-3, errs


def test_every_parameter_gets_gradient():
    torch.manual_seed(1)
    stage = TransformerStage(StageConfig(1, 8, 4, 2, Resample.DOWN, 16))
    x = torch.rand(2, 8, 8, 8)
    loss = (stage(x) - torch.rand(2, 16, 4, 4)).square().mean()
    loss.backward()
    dead = [n for n, p in stage.named_parameters() if p.grad is None or not p.grad.abs().sum() > 0]
    assert not dead
