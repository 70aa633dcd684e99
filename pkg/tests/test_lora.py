import pytest
import torch
import torch.nn as nn

from mitolora.lora import (
    LoraConfig,
    LoraError,
    LoraLinear,
    LoraRankWarning,
    adapted_forward,
    adapter_state_dict,
    describe_model,
    freeze_base,
    init_adapter,
    inject_lora,
    load_adapter_state_dict,
    merge,
    trainable_param_count,
    unmerge,
)
from mitolora.vit import VisionTransformer


def rand_state(d_in, d_out, r, seed=0, p=0.0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    s = init_adapter(d_in, d_out, LoraConfig(rank=r, dropout_p=p), g, dtype=dtype)
    s.B = torch.randn(d_out, r, generator=g, dtype=dtype)
    return s, g


def test_config_scaling_and_validation():
    assert LoraConfig(rank=8).scaling == 2.0
    assert LoraConfig(rank=4).scaling == 4.0
    with pytest.raises(LoraError):
        LoraConfig(rank=0)
    with pytest.raises(LoraError):
        LoraConfig(dropout_p=1.0)
    cfg = LoraConfig(rank=4, blocks=(0, 2))
    assert LoraConfig.from_dict(cfg.to_dict()) == cfg


def test_init_shapes_and_zero_delta():
    s = init_adapter(64, 64, LoraConfig(rank=8), torch.Generator().manual_seed(0))
    assert s.A.shape == (8, 64) and s.B.shape == (64, 8)
    assert s.scaling == 2.0
    assert torch.count_nonzero(s.delta) == 0
    s2 = init_adapter(10, 30, LoraConfig(rank=4))
    assert torch.count_nonzero(s2.delta) == 0 and s2.delta.shape == (30, 10)


def test_rank_above_dims_warns():
    with pytest.warns(LoraRankWarning):
        init_adapter(4, 16, LoraConfig(rank=8))


def test_zero_init_forward_is_base_exactly():
    g = torch.Generator().manual_seed(1)
    W0, b = torch.randn(32, 48, generator=g), torch.randn(32, generator=g)
    x = torch.randn(5, 48, generator=g)
    s = init_adapter(48, 32, LoraConfig(rank=8), g)
    assert torch.equal(adapted_forward(x, W0, b, s), nn.functional.linear(x, W0, b))


def test_forward_matches_dense_matmul_oracle():
    s, g = rand_state(20, 12, 4)
    W0 = torch.randn(12, 20, generator=g, dtype=torch.float64)
    b = torch.randn(12, generator=g, dtype=torch.float64)
    x = torch.randn(7, 20, generator=g, dtype=torch.float64)
    oracle = x @ W0.T + b + s.scaling * x @ s.A.T @ s.B.T
    assert torch.max(torch.abs(adapted_forward(x, W0, b, s) - oracle)) < 1e-6


def test_train_mode_dropout_is_deterministic_in_rng():
    s, _ = rand_state(16, 16, 4, p=0.3)
    W0 = torch.eye(16, dtype=torch.float64)
    x = torch.ones(3, 16, dtype=torch.float64)
    y1 = adapted_forward(x, W0, None, s, True, torch.Generator().manual_seed(9))
    y2 = adapted_forward(x, W0, None, s, True, torch.Generator().manual_seed(9))
    assert torch.equal(y1, y2)
    assert not torch.equal(y1, adapted_forward(x, W0, None, s, False))


def test_dropout_acts_only_on_adapter_path():
    # with B=0 dropout must not touch the output at all
    s = init_adapter(16, 16, LoraConfig(rank=4, dropout_p=0.3))
    W0 = torch.randn(16, 16)
    x = torch.randn(4, 16)
    y = adapted_forward(x, W0, None, s, True, torch.Generator().manual_seed(0))
    assert torch.equal(y, x @ W0.T)


def test_merge_zero_b_is_exact_and_double_merge_fails():
    s = init_adapter(8, 8, LoraConfig(rank=2))
    W0 = torch.randn(8, 8)
    Wm = merge(W0, s)
    assert torch.equal(Wm, W0)
    with pytest.raises(LoraError):
        merge(Wm, s)
    unmerge(Wm, s)
    with pytest.raises(LoraError):
        unmerge(Wm, s)


def test_merged_state_skips_adapter_term():
    s, g = rand_state(10, 10, 2)
    W0 = torch.randn(10, 10, generator=g, dtype=torch.float64)
    x = torch.randn(3, 10, generator=g, dtype=torch.float64)
    before = adapted_forward(x, W0, None, s)
    Wm = merge(W0, s)
    assert torch.allclose(adapted_forward(x, Wm, None, s), before, atol=1e-12)


def test_lora_linear_module_merge_round_trip():
    torch.manual_seed(0)
    layer = LoraLinear(nn.Linear(12, 6), LoraConfig(rank=3, dropout_p=0.0))
    with torch.no_grad():
        layer.lora_B.normal_()
    x = torch.randn(4, 12)
    W_before = layer.base.weight.clone()
    y = layer(x)
    layer.merge()
    assert torch.allclose(layer(x), y, rtol=1e-5, atol=1e-6)
    layer.unmerge()
    assert torch.max(torch.abs(layer.base.weight - W_before)) < 1e-6


def tiny_vit(fused=False, depth=4, dim=64):
    return VisionTransformer(img_size=32, patch_size=16, embed_dim=dim, depth=depth, num_heads=4, qkv_fused=fused)


def test_counts_single_layer_and_tiny_vit():
    assert trainable_param_count(describe_model(LoraLinear(nn.Linear(64, 64), LoraConfig(rank=8))), LoraConfig(rank=8)) == 1024

    class Wrap(nn.Module):
        def __init__(self, r):
            super().__init__()
            self.backbone = tiny_vit()
            inject_lora(self.backbone.blocks, LoraConfig(rank=r))
            self.head = nn.Linear(64, 1)

    adapters = {}
    for r in (8, 4):
        model = freeze_base(Wrap(r))
        # enumerate: 4 blocks x 3 projections x r*(64+64), plus 64+1 head
        oracle = 4 * 3 * r * (64 + 64) + 65
        actual = sum(p.numel() for p in model.parameters() if p.requires_grad)
        assert actual == oracle == trainable_param_count(describe_model(model), LoraConfig(rank=r))
        adapters[r] = actual - 65
    assert adapters[4] * 2 == adapters[8] == 12288


def test_fused_qkv_gets_one_adapter_per_block():
    vit = tiny_vit(fused=True, depth=2)
    names = inject_lora(vit.blocks, LoraConfig(rank=4))
    assert names == ["blocks.0.attn.qkv", "blocks.1.attn.qkv"]
    assert vit.blocks[0].attn.qkv.lora_B.shape == (192, 4)


def test_block_subset_and_double_injection():
    vit = tiny_vit(depth=3)
    names = inject_lora(vit.blocks, LoraConfig(rank=2, blocks=(1,), targets=("query", "value")))
    assert names == ["blocks.1.attn.query", "blocks.1.attn.value"]
    with pytest.raises(LoraError):
        inject_lora(vit.blocks, LoraConfig(rank=2, blocks=(1,)))
    with pytest.raises(LoraError):
        inject_lora(vit.blocks, LoraConfig(rank=2, blocks=(5,)))


def test_freeze_leaves_adapters_and_head_only():
    class M(nn.Module):
        def __init__(self):
            super().__init__()
            self.backbone = tiny_vit(depth=2)
            inject_lora(self.backbone.blocks, LoraConfig(rank=2))
            self.head = nn.Linear(64, 1)

    model = freeze_base(M())
    trainable = {n for n, p in model.named_parameters() if p.requires_grad}
    assert trainable == {n for n in dict(model.named_parameters()) if "lora_" in n or n.startswith("head.")}
    assert {"head.weight", "head.bias"} <= trainable

    base = {n: p.clone() for n, p in model.named_parameters() if not p.requires_grad}
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=0.1)
    for p in model.parameters():
        p.grad = torch.randn_like(p)
    opt.step()
    assert all(torch.equal(base[n], p) for n, p in model.named_parameters() if n in base)

    state = adapter_state_dict(model)
    assert set(state) == trainable
    load_adapter_state_dict(model, state)
    state.pop("head.bias")
    with pytest.raises(LoraError):
        load_adapter_state_dict(model, state)


def test_float32_merge_drift_is_within_rounding_of_merged_weight():
    g = torch.Generator().manual_seed(2)
    layer = LoraLinear(nn.Linear(72, 92), LoraConfig(rank=1), g)
    with torch.no_grad():
        layer.lora_B.copy_(torch.randn(92, 1, generator=g))
    W0 = layer.base.weight.detach().clone()
    layer.merge()
    peak = layer.base.weight.abs().max().item()
    layer.unmerge()
    eps = torch.finfo(torch.float32).eps
    assert (layer.base.weight - W0).abs().max().item() <= 2 * eps * peak
