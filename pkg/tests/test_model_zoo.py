import pytest
import torch
from safetensors.torch import save_file

from mitolora.lora import LoraConfig
from mitolora.model_zoo import (
    FeatureMode,
    GatedWeightsError,
    InputSizeError,
    ModelZooError,
    WeightsSource,
    build_model,
    forward_logit,
    get_backbone,
    list_backbones,
    make_vit,
)

TINY = get_backbone("tiny-test")


def x_batch(n, seed=0):
    return torch.randn(n, 3, 224, 224, generator=torch.Generator().manual_seed(seed))


def test_registry_entries():
    names = {b.name for b in list_backbones()}
    assert {"virchow", "virchow2", "uni", "tiny-test"} <= names
    assert get_backbone("virchow").architecture == "ViT-H/14"
    assert get_backbone("uni").architecture == "ViT-L/16"
    assert TINY.weights_source is WeightsSource.RANDOM_TINY
    for b in list_backbones():
        assert b.feature_mode is FeatureMode.CLS
    with pytest.raises(ModelZooError):
        get_backbone("resnet50")


def test_tiny_parameter_count_matches_enumeration():
    vit = make_vit(TINY)
    d, hidden, n_patch = 64, 256, (224 // 16) ** 2
    oracle = (
        3 * 16 * 16 * d + d  # patch conv
        + d  # cls
        + (1 + n_patch) * d  # pos
        + 4 * (2 * 2 * d + 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d))
        + 2 * d  # final norm
    )
    assert sum(p.numel() for p in vit.parameters()) == oracle
    assert vit.blocks[0].attn.query.weight.shape == (64, 64)
    assert vit.blocks[0].mlp.fc1.weight.shape == (256, 64)


def test_tiny_model_forward_shape_and_counts():
    model = build_model(TINY, LoraConfig(rank=8))
    model.eval()
    with torch.no_grad():
        out = forward_logit(model, x_batch(2))
    assert out.shape == (2,)
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    assert trainable == 12288 + 65
    assert model.head.out_features == 1


def test_gated_backbone_without_weights(monkeypatch):
    monkeypatch.delenv("MITOLORA_WEIGHTS_ROOT", raising=False)
    with pytest.raises(GatedWeightsError, match="Virchow"):
        build_model(get_backbone("virchow"), LoraConfig())
    with pytest.raises(GatedWeightsError):
        build_model(get_backbone("uni"), LoraConfig(), weights_path="/nope/uni.safetensors")


def test_zero_init_model_equals_adapter_free_baseline():
    lora = build_model(TINY, LoraConfig(rank=8), seed=3).eval()
    base = build_model(TINY, None, seed=3).eval()
    assert torch.equal(lora.head.weight, base.head.weight)
    x = x_batch(3, seed=1)
    with torch.no_grad():
        assert torch.equal(lora(x), base(x))


def test_duplicates_and_probability_range():
    model = build_model(TINY, LoraConfig(rank=4)).eval()
    x = x_batch(3)
    x = torch.cat([x, x[:1]])
    with torch.no_grad():
        z = forward_logit(model, x)
    assert z.shape == (4,)
    assert torch.equal(z[0], z[3])
    p = torch.sigmoid(z)
    assert torch.all((p > 0) & (p < 1))


def test_input_size_checked():
    model = build_model(TINY, LoraConfig(rank=4))
    with pytest.raises(InputSizeError):
        forward_logit(model, torch.zeros(1, 3, 112, 112))


def test_cls_plus_meanpatch_doubles_head_input():
    spec = TINY.with_feature_mode("cls_plus_meanpatch")
    model = build_model(spec, LoraConfig(rank=4)).eval()
    assert model.head.in_features == 128
    with torch.no_grad():
        assert model(x_batch(2)).shape == (2,)


def test_external_weights_loaded_from_env_root(tmp_path, monkeypatch):
    # a tiny stand-in architecture registered as external weights
    from dataclasses import replace

    spec = replace(TINY, name="ext", weights_source=WeightsSource.PRETRAINED_EXTERNAL)
    vit = make_vit(spec)
    vit.init_random(torch.Generator().manual_seed(11))
    state = {k: v.contiguous() for k, v in vit.state_dict().items()}
    state["head.weight"] = torch.zeros(5, 64)
    save_file(state, str(tmp_path / "ext.safetensors"))
    monkeypatch.setenv("MITOLORA_WEIGHTS_ROOT", str(tmp_path))
    model = build_model(spec, LoraConfig(rank=2))
    assert torch.equal(model.backbone.patch_embed.proj.weight, vit.patch_embed.proj.weight)

    save_file({"bogus": torch.zeros(1)}, str(tmp_path / "bad.safetensors"))
    with pytest.raises(ModelZooError):
        build_model(spec, None, weights_path=tmp_path / "bad.safetensors")
