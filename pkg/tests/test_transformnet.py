import json
import struct

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from styleaug import ContractError
from styleaug._blob import MAGIC
from styleaug.transformnet import (
    CheckpointCorruptError,
    CheckpointHashError,
    CheckpointVersionError,
    TransformNetConfig,
    build,
    load_checkpoint,
    pad_to_multiple,
    read_checkpoint,
    save_checkpoint,
    stylize,
)


@pytest.fixture(scope="module")
def net():
    return build(TransformNetConfig(), seed=0).eval()


def test_same_seed_same_weights():
    a, b, c = build(TransformNetConfig(), 1), build(TransformNetConfig(), 1), build(TransformNetConfig(), 2)
    for (k, va), vb in zip(a.state_dict().items(), b.state_dict().values()):
        assert torch.equal(va, vb), k
    assert any(not torch.equal(va, vc) for va, vc in zip(a.state_dict().values(), c.state_dict().values()))


def test_build_does_not_touch_global_rng():
    torch.manual_seed(5)
    expected = torch.rand(3)
    torch.manual_seed(5)
    build(TransformNetConfig(), 0)
    assert torch.equal(torch.rand(3), expected)


@pytest.mark.parametrize("blocks", [1, 5, 7])
def test_conv_count_follows_layer_recipe(blocks):
    # one 9x9 in, two stride-2 down, two convs per residual block, two upsampling, one 9x9 out
    net = build(TransformNetConfig(num_residual_blocks=blocks), 0)
    assert net.conv_count() == 1 + 2 + 2 * blocks + 2 + 1


def test_layer_sequence():
    net = build(TransformNetConfig(), 0)
    assert [m.conv.conv.stride for m in net.down] == [(1, 1), (2, 2), (2, 2)]
    assert [m.conv.conv.kernel_size for m in net.down] == [(9, 9), (3, 3), (3, 3)]
    assert all(m.upsample for m in net.up) and len(net.up) == 2
    assert net.out.conv.kernel_size == (9, 9)
    assert all(m.norm.affine for m in net.down)


@pytest.mark.parametrize(
    "kwargs",
    [{"num_residual_blocks": 0}, {"downsample_factor": 3}, {"norm": "batch"}, {"output_activation": "sigmoid"}, {"base_channels": 1.5}],
)
def test_invalid_config_names_field(kwargs):
    with pytest.raises(ContractError, match=next(iter(kwargs))):
        TransformNetConfig(**kwargs)


def test_shape_and_range(net):
    out = stylize(net, torch.rand(3, 256, 256) * 255)
    assert out.shape == (3, 256, 256)
    assert out.min() >= 0 and out.max() <= 255 and torch.isfinite(out).all()


@settings(max_examples=20, deadline=None)
@given(st.integers(8, 41), st.integers(8, 41), st.floats(-1e4, 1e4), st.floats(0, 1e4))
def test_range_and_shape_for_any_input(h, w, shift, scale):
    net = build(TransformNetConfig(num_residual_blocks=1, base_channels=8), 0).eval()
    x = torch.randn(3, h, w) * scale + shift
    out = stylize(net, x)
    assert out.shape == (3, h, w)
    assert torch.isfinite(out).all() and out.min() >= 0 and out.max() <= 255


def test_pad_to_multiple_crops_back():
    x = torch.rand(1, 3, 10, 13)
    padded, (l, r, t, b) = pad_to_multiple(x, 4)
    assert padded.shape[-2:] == (12, 16)
    assert torch.equal(padded[..., t : 12 - b, l : 16 - r], x)


def test_batch_equals_single_calls(net):
    x = torch.rand(3, 3, 32, 40) * 255
    batched = stylize(net, x)
    singles = torch.stack([stylize(net, img) for img in x])
    assert (batched - singles).abs().max() <= 1e-5 * 255


def test_translation_covariance_on_flat_background(net):
    # an object on a flat field: shifting it by the downsample factor shifts the output
    size, obj, shift = 192, 32, 4
    patch = torch.rand(3, obj, obj, generator=torch.Generator().manual_seed(0)) * 255
    c = size // 2 - obj // 2
    a, b = torch.full((3, size, size), 90.0), torch.full((3, size, size), 90.0)
    a[:, c : c + obj, c : c + obj] = patch
    b[:, c + shift : c + shift + obj, c + shift : c + shift + obj] = patch
    ya, yb = stylize(net, a), stylize(net, b)
    ring = 8
    diff = (yb[:, shift:, shift:] - ya[:, :-shift, :-shift])[:, ring:-ring, ring:-ring]
    assert diff.abs().max() <= 1e-3


def test_checkpoint_round_trip(tmp_path, net):
    meta = {"lambda_content": 7.5, "steps": 3, "seed": 0}
    path = save_checkpoint(net, meta, tmp_path / "snow.ckpt", style_name="Snow")
    loaded, got_meta = load_checkpoint(path)
    for (k, a), b in zip(net.state_dict().items(), loaded.state_dict().values()):
        assert torch.equal(a, b), k
    assert got_meta == {**meta, "style_name": "Snow"}
    x = torch.rand(3, 36, 36) * 255
    assert torch.equal(stylize(net, x), stylize(loaded, x))
    again = save_checkpoint(loaded, meta, tmp_path / "again.ckpt", style_name="Snow")
    assert again.read_bytes() == path.read_bytes()
    assert read_checkpoint(path).config == net.config


def _rewrite_header(path, **changes):
    data = path.read_bytes()
    (n,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start : start + n])
    header.update(changes)
    head = json.dumps(header).encode()
    path.write_bytes(MAGIC + struct.pack("<Q", len(head)) + head + data[start + n :])


def test_checkpoint_errors_are_distinct(tmp_path, net):
    good = save_checkpoint(net, {}, tmp_path / "good.ckpt")

    version = tmp_path / "version.ckpt"
    version.write_bytes(good.read_bytes())
    _rewrite_header(version, format_version=99)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(version)

    tampered = tmp_path / "hash.ckpt"
    data = bytearray(good.read_bytes())
    data[-1] ^= 0xFF
    tampered.write_bytes(bytes(data))
    with pytest.raises(CheckpointHashError):
        load_checkpoint(tampered)

    for cut in (4, 30, len(data) // 2, len(data) - 1):
        truncated = tmp_path / f"trunc{cut}.ckpt"
        truncated.write_bytes(good.read_bytes()[:cut])
        with pytest.raises(CheckpointCorruptError):
            load_checkpoint(truncated)

    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_checkpoint_with_foreign_config_is_corrupt(tmp_path, net):
    path = save_checkpoint(net, {}, tmp_path / "x.ckpt")
    _rewrite_header(path, config=dict(net.config.to_dict(), num_residual_blocks=2))
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(path)
