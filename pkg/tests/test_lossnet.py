import json

import pytest
import torch
import torchvision

from styleaug import ContractError
from styleaug.losses import content_loss, gram_matrix, style_loss
from styleaug.lossnet import (
    MIN_INPUT_SIZE,
    LossNetwork,
    PreprocessSpec,
    WeightsError,
    build_vgg_features,
    clear_style_cache,
    compute_style_target,
    extract_features,
    manifest_entry,
    vgg_layer_table,
)


@pytest.fixture(scope="module")
def net():
    return LossNetwork()


@pytest.mark.parametrize("variant", ["vgg16", "vgg19"])
def test_trunk_matches_torchvision_layout(variant):
    ours = build_vgg_features(variant).state_dict()
    ref = getattr(torchvision.models, variant)(weights=None).features.state_dict()
    assert {k: v.shape for k, v in ours.items()} == {k: v.shape for k, v in ref.items()}


def test_layer_table_channels_and_strides():
    table = vgg_layer_table("vgg16")
    assert table["relu1_2"].channels == 64 and table["relu1_2"].stride == 1
    assert table["relu2_2"].channels == 128 and table["relu2_2"].stride == 2
    assert table["pool2"].channels == 128 and table["pool2"].stride == 4
    assert table["relu4_3"].channels == 512 and table["relu4_3"].stride == 8
    assert table["relu5_3"].index == 29
    assert "relu5_4" in vgg_layer_table("vgg19") and "relu5_4" not in table


def test_feature_dims_at_256(net):
    feats = extract_features(net, torch.rand(3, 256, 256) * 255, ["pool2"])
    assert (feats["pool2"].n_channels, feats["pool2"].n_positions) == (128, 64 * 64)


@pytest.mark.parametrize("h,w", [(32, 32), (37, 50), (45, 33)])
def test_positions_use_ceil_stride(net, h, w):
    layers = ["relu1_2", "relu2_2", "relu3_3", "relu4_3"]
    feats = extract_features(net, torch.rand(1, 3, h, w) * 255, layers)
    for lid in layers:
        s = net.layer_stride(lid)
        assert feats[lid].n_positions == -(-h // s) * -(-w // s)
        assert feats[lid].n_channels == net.layer_channels(lid)
    assert feats.source_shape == (h, w)


def test_extraction_is_deterministic_and_finite(net):
    img = torch.rand(3, 40, 40) * 255
    a = extract_features(net, img, net.style_layers)
    b = extract_features(net, img.clone(), net.style_layers)
    for lid in net.style_layers:
        assert torch.equal(a[lid].data, b[lid].data)
    zero = extract_features(net, torch.zeros(3, 32, 32), net.style_layers)
    assert all(torch.isfinite(zero[l].data).all() for l in net.style_layers)


def test_extraction_errors(net):
    with pytest.raises(ContractError, match="relu9_9"):
        extract_features(net, torch.rand(3, 32, 32), ["relu9_9"])
    with pytest.raises(ContractError, match=str(MIN_INPUT_SIZE)):
        extract_features(net, torch.rand(3, 31, 64), ["relu1_2"])
    with pytest.raises(ContractError):
        LossNetwork(style_layers=("relu6_1",))


def test_weights_frozen_across_calls(net):
    before = net.compute_weights_hash()
    img = (torch.rand(1, 3, 32, 32) * 255).requires_grad_(True)
    feats = extract_features(net, img, net.style_layers)
    sum(f.data.sum() for f in feats.maps.values()).backward()
    assert img.grad is not None
    assert all(p.grad is None for p in net._features.parameters())
    assert net.compute_weights_hash() == before == net.weights_hash


def test_self_consistency(net):
    img = torch.rand(3, 48, 48) * 255
    feats = extract_features(net, img, net.style_layers + net.content_layers)
    for lid in net.content_layers:
        assert content_loss(feats[lid], feats[lid]).item() == 0.0
    target = compute_style_target(net, img, use_cache=False)
    current = [gram_matrix(feats[l]) for l in net.style_layers]
    assert style_loss(current, target, feats.dims(net.style_layers)).item() == 0.0


def test_style_target_shape_independent_of_resolution(net):
    small = compute_style_target(net, torch.rand(3, 32, 32) * 255, use_cache=False)
    large = compute_style_target(net, torch.rand(3, 64, 80) * 255, use_cache=False)
    for a, b in zip(small.grams, large.grams):
        assert a.data.shape == b.data.shape == (net.layer_channels(a.layer_id),) * 2


def test_style_target_cache_is_transparent(net):
    clear_style_cache()
    img = torch.rand(3, 32, 32) * 255
    cached = compute_style_target(net, img)
    assert compute_style_target(net, img) is cached
    fresh = compute_style_target(net, img, use_cache=False)
    assert all(torch.equal(a.data, b.data) for a, b in zip(cached.grams, fresh.grams))
    other = compute_style_target(net, torch.rand(3, 32, 32) * 255)
    assert any(not torch.equal(a.data, b.data) for a, b in zip(cached.grams, other.grams))


def test_preprocess_spec():
    spec = PreprocessSpec()
    x = torch.zeros(3, 2, 2)
    assert torch.allclose(spec.apply(x)[:, 0, 0], -torch.tensor(spec.channel_means))
    bgr = PreprocessSpec(channel_order="BGR").apply(torch.stack([torch.full((2, 2), v) for v in (1.0, 2.0, 3.0)]))
    assert bgr[0, 0, 0].item() == pytest.approx(3.0 - 103.939, rel=1e-6)
    with pytest.raises(ContractError):
        PreprocessSpec(scale=0)
    with pytest.raises(ContractError):
        PreprocessSpec(channel_order="HSV")


def test_random_init_is_seeded():
    a, b, c = LossNetwork(init_seed=3), LossNetwork(init_seed=3), LossNetwork(init_seed=4)
    assert a.weights_hash == b.weights_hash != c.weights_hash
    assert a.backbone_id == "vgg16:random-init-seed3"


def test_weights_file_checked_against_manifest(tmp_path):
    state = {f"features.{k}": v for k, v in LossNetwork(init_seed=7)._features.state_dict().items()}
    weights = tmp_path / "vgg16_test.pth"
    torch.save(state, weights)
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps({"files": [manifest_entry(weights)]}))
    net = LossNetwork(weights_path=weights, manifest_path=manifest)
    assert net.backbone_id == "vgg16:vgg16_test.pth"
    assert net.weights_hash == LossNetwork(init_seed=7).weights_hash

    row = json.loads(manifest.read_text())["files"][0]
    manifest.write_text(json.dumps({"files": [dict(row, sha256="0" * 64)]}))
    with pytest.raises(WeightsError, match="sha256"):
        LossNetwork(weights_path=weights, manifest_path=manifest)
    manifest.write_text(json.dumps({"files": []}))
    with pytest.raises(WeightsError, match="not listed"):
        LossNetwork(weights_path=weights, manifest_path=manifest)
    with pytest.raises(WeightsError, match="not found"):
        LossNetwork(weights_path=tmp_path / "missing.pth", manifest_path=manifest)
