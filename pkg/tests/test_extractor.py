"""Feature extractor: attention math, shape contracts, weight archive."""

import numpy as np
import pytest
import torch
import torchvision

from contrastad import (ConfigurationError, ExtractorConfig, FeatureExtractor,
                        WeightSet, aggregate_layers, attention_heatmap,
                        build_extractor, extract_features, initial_weights)
from contrastad.extractor import CBAMBlock, aggregate_batch
from contrastad.phantom import phantom_brain


@pytest.fixture(scope="module")
def cfg():
    return ExtractorConfig(pretrained=False)


@pytest.fixture(scope="module")
def weights(cfg):
    return initial_weights(cfg, seed=0)


# ---------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ConfigurationError):
        ExtractorConfig(backbone_depth=34)
    with pytest.raises(ConfigurationError):
        ExtractorConfig(spatial_kernel=4)
    with pytest.raises(ConfigurationError):
        ExtractorConfig(stages_used=())
    with pytest.raises(ConfigurationError):
        ExtractorConfig(stages_used=(3, 1))
    with pytest.raises(ConfigurationError):
        ExtractorConfig(stages_used=(1, 5))
    with pytest.raises(ConfigurationError):
        ExtractorConfig(activation="gelu")
    with pytest.raises(ConfigurationError):
        ExtractorConfig(patch_neighborhood=2)


def test_config_channel_arithmetic():
    assert ExtractorConfig(backbone_depth=18).feature_dim == 64 + 128 + 256
    assert ExtractorConfig(backbone_depth=50).feature_dim == 256 + 512 + 1024
    assert ExtractorConfig(stages_used=(2, 4)).stage_channels == (128, 512)


# ------------------------------------------------------------- extraction

def test_stage_shapes_256(cfg, weights):
    img = phantom_brain(256, 0)
    maps, _ = extract_features(img, cfg, weights)
    assert tuple(maps[1].shape) == (64, 64, 64)
    assert tuple(maps[2].shape) == (128, 32, 32)
    assert tuple(maps[3].shape) == (256, 16, 16)


def test_zero_init_gates_quarter_factorization():
    torch.manual_seed(0)
    block = CBAMBlock(channels=8)
    x = torch.randn(2, 8, 5, 5)
    y, cg, sg = block(x)
    assert torch.equal(cg, torch.full_like(cg, 0.5))
    assert torch.equal(sg, torch.full_like(sg, 0.5))
    assert torch.allclose(y, 0.25 * x)


def test_first_stage_is_quarter_of_plain_backbone(cfg):
    plain_cfg = ExtractorConfig(use_attention=False, pretrained=False)
    torch.manual_seed(1)
    attn_model = FeatureExtractor(cfg)
    plain_model = FeatureExtractor(plain_cfg)
    plain_model.load_trunk_state({k: v for k, v in attn_model.state_dict().items()
                                  if not k.startswith("attn.")})
    attn_model.eval(); plain_model.eval()
    x = torch.rand(1, 1, 64, 64) * 255
    with torch.no_grad():
        m_attn, _ = attn_model(x)
        m_plain, _ = plain_model(x)
    assert torch.allclose(m_attn[1], 0.25 * m_plain[1], atol=1e-6)


def test_attention_off_reproduces_vanilla_backbone():
    cfg = ExtractorConfig(use_attention=False, activation="relu", pretrained=False)
    torch.manual_seed(2)
    ref = torchvision.models.resnet18(weights=None)
    model = FeatureExtractor(cfg)
    model.load_trunk_state(ref.state_dict())
    model.eval(); ref.eval()
    x = torch.rand(1, 1, 64, 64) * 255
    with torch.no_grad():
        maps, _ = model(x)
        h = model.preprocess(x)
        h = ref.maxpool(ref.relu(ref.bn1(ref.conv1(h))))
        h1 = ref.layer1(h); h2 = ref.layer2(h1); h3 = ref.layer3(h2)
    assert torch.equal(maps[1], h1)
    assert torch.equal(maps[2], h2)
    assert torch.equal(maps[3], h3)


def test_leaky_swap_keeps_weights_changes_outputs():
    relu_cfg = ExtractorConfig(use_attention=False, activation="relu", pretrained=False)
    leaky_cfg = ExtractorConfig(use_attention=False, activation="leaky_relu", pretrained=False)
    torch.manual_seed(3)
    a = FeatureExtractor(relu_cfg)
    b = FeatureExtractor(leaky_cfg)
    b.load_trunk_state(a.state_dict())
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    a.eval(); b.eval()
    x = torch.rand(1, 1, 64, 64) * 255
    with torch.no_grad():
        ma, _ = a(x)
        mb, _ = b(x)
    assert not torch.equal(ma[3], mb[3])


def test_gate_ranges_with_random_attention(cfg):
    torch.manual_seed(4)
    model = FeatureExtractor(cfg)
    with torch.no_grad():  # break the zero init so gates move off 0.5
        for block in model.attn.values():
            block.channel.fc2.weight.normal_(0, 0.5)
            block.spatial.conv.weight.normal_(0, 0.5)
    model.eval()
    x = torch.rand(2, 1, 64, 64) * 255
    with torch.no_grad():
        _, state = model(x)
    for s in cfg.stages_used:
        for g in (state.channel_gates[s], state.spatial_gates[s]):
            assert float(g.min()) > 0.0 and float(g.max()) < 1.0


def test_features_finite(cfg, weights):
    img = np.random.default_rng(5).integers(0, 256, size=(64, 64)).astype(np.uint8)
    maps, _ = extract_features(img, cfg, weights)
    for m in maps.values():
        assert torch.isfinite(m).all()


# ------------------------------------------------------------ aggregation

def test_aggregate_single_stage_identity():
    m = torch.randn(4, 6, 6)
    grid = aggregate_layers({1: m}, patch_neighborhood=1)
    assert torch.equal(grid.features, m.permute(1, 2, 0))
    assert grid.stage_dims == (4,)


def test_aggregate_concat_dim(cfg, weights):
    img = phantom_brain(64, 1)
    maps, _ = extract_features(img, cfg, weights)
    grid = aggregate_layers(maps, cfg.patch_neighborhood, input_hw=img.shape)
    assert grid.grid_shape == (16, 16)
    assert grid.dim == 448
    assert grid.spatial_scale == 4.0
    assert torch.isfinite(grid.features).all()


def test_aggregate_constant_maps():
    maps = {1: torch.full((2, 8, 8), 3.0), 2: torch.full((3, 4, 4), -1.0)}
    grid = aggregate_layers(maps, patch_neighborhood=3)
    expected = torch.tensor([3.0, 3.0, -1.0, -1.0, -1.0])
    assert torch.allclose(grid.features.reshape(-1, 5),
                          expected.expand(64, 5), atol=1e-6)


def test_aggregate_needs_maps():
    with pytest.raises(ValueError):
        aggregate_batch({}, 3)


def test_shape_contract_various_inputs(cfg, weights):
    model = build_extractor(cfg, weights)
    for size in (64, 96, 160):
        x = torch.rand(1, 1, size, size) * 255
        with torch.no_grad():
            maps, _ = model(x)
        emb = aggregate_batch(maps, cfg.patch_neighborhood)
        assert emb.shape[-2:] == maps[1].shape[-2:]


# ---------------------------------------------------------------- heatmap

def test_heatmap_range_and_shape(cfg, weights):
    img = phantom_brain(64, 2)
    _, state = extract_features(img, cfg, weights)
    hm = attention_heatmap(state, 2)
    assert hm.shape == (64, 64)
    assert hm.min() >= 0.0 and hm.max() <= 1.0


def test_heatmap_constant_input_is_zero(cfg, weights):
    _, state = extract_features(np.full((64, 64), 128, dtype=np.uint8), cfg, weights)
    state.gated[1] = torch.full_like(state.gated[1], 2.0)
    assert np.all(attention_heatmap(state, 1) == 0.0)


def test_heatmap_invalid_stage(cfg, weights):
    _, state = extract_features(phantom_brain(64, 3), cfg, weights)
    with pytest.raises(ValueError):
        attention_heatmap(state, 4)


# --------------------------------------------------------------- weights

def test_weightset_roundtrip(tmp_path, cfg, weights):
    path = tmp_path / "w.cadw"
    weights.save(path)
    back = WeightSet.load(path)
    assert back.snapshot_id == weights.snapshot_id
    assert back.config.to_dict() == cfg.to_dict()
    assert set(back.tensors) == set(weights.tensors)
    for k in weights.tensors:
        assert np.array_equal(back.tensors[k], weights.tensors[k])
    assert back.fingerprint() == weights.fingerprint()


def test_weightset_fingerprint_sensitivity(cfg, weights):
    other = initial_weights(cfg, seed=1)
    assert other.fingerprint() != weights.fingerprint()


def test_weightset_config_mismatch(tmp_path, weights):
    path = tmp_path / "w.cadw"
    weights.save(path)
    with pytest.raises(ConfigurationError):
        WeightSet.load(path, expected_cfg=ExtractorConfig(backbone_depth=50))
    with pytest.raises(ConfigurationError):
        build_extractor(ExtractorConfig(use_attention=False), weights)


def test_weightset_bad_magic(tmp_path):
    path = tmp_path / "junk.cadw"
    path.write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(ConfigurationError):
        WeightSet.load(path)


def test_pretrained_unavailable_raises():
    # no snapshot reachable in this environment and no local file given
    with pytest.raises(ConfigurationError):
        initial_weights(ExtractorConfig(pretrained=True), seed=0)


def test_initial_weights_deterministic(cfg):
    a = initial_weights(cfg, seed=7)
    b = initial_weights(cfg, seed=7)
    assert a.fingerprint() == b.fingerprint()
    assert a.snapshot_id == "random/seed=7"
