import shutil
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from styleaug import ContractError
from styleaug import augmentor as aug_mod
from styleaug.augmentor import (
    AugmentManifest,
    AugmentPlan,
    build_augmented,
    flip_horizontal,
    rotate,
    scan_dataset,
    traditional_label,
)
from styleaug.images import load_image, save_image
from styleaug.transformnet import TransformNetConfig, build, save_checkpoint


def make_dataset(root, n_per_class=(3, 3), size=8, seed=0):
    rng = np.random.default_rng(seed)
    for c, n in enumerate(n_per_class):
        for i in range(n):
            save_image(root / f"class{c}" / f"img{i}.png", rng.integers(0, 256, size=(size, size, 3)).astype(np.uint8))
    return root


@pytest.fixture(scope="session")
def style_ckpts(tmp_path_factory):
    d = tmp_path_factory.mktemp("styles")
    paths = []
    for k, name in enumerate(("Scream", "Wave")):
        net = build(TransformNetConfig(num_residual_blocks=1, base_channels=8), seed=k)
        paths.append(str(save_checkpoint(net, {}, d / f"{name}.ckpt", style_name=name)))
    return paths


def test_rotate_examples():
    x = np.array([[1, 2], [3, 4]])
    assert rotate(x, 90).tolist() == [[2, 4], [1, 3]]
    assert rotate(x, 180).tolist() == [[4, 3], [2, 1]]
    assert rotate(rotate(x, 90), 270).tolist() == x.tolist()


@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_flip_involution_and_zero_rotation(h, w, seed):
    x = np.random.default_rng(seed).integers(0, 256, size=(h, w, 3)).astype(np.uint8)
    assert np.array_equal(flip_horizontal(flip_horizontal(x)), x)
    assert np.array_equal(flip_horizontal(x)[:, 0], x[:, -1])
    assert np.array_equal(rotate(x, 0), x)
    assert np.array_equal(rotate(x, 360), x)
    assert rotate(x, 33).shape == x.shape


def test_arbitrary_angle_keeps_size_and_range():
    x = np.random.default_rng(0).integers(0, 256, size=(10, 14, 3)).astype(np.uint8)
    for angle in (15, 90, 270.5):
        out = rotate(x, angle)
        assert out.shape == x.shape and out.dtype == np.uint8


def test_scan_dataset(tmp_path):
    root = make_dataset(tmp_path / "ds", (3, 3))
    ds = scan_dataset(root)
    assert len(ds) == 6 and ds.classes == ("class0", "class1")
    assert [p for p, _ in ds.items] == sorted(p for p, _ in ds.items)
    assert scan_dataset(root).digest() == ds.digest()
    (root / "class1" / "img9.png").write_bytes(b"corrupt")
    with pytest.warns(UserWarning, match="img9"):
        again = scan_dataset(root)
    assert len(again) == 6
    with pytest.raises(ContractError):
        scan_dataset(tmp_path / "nothing")
    (tmp_path / "empty").mkdir()
    with pytest.raises(ContractError):
        scan_dataset(tmp_path / "empty")


def test_plan_invariants():
    with pytest.raises(ContractError):
        AugmentPlan(frozenset({"rotation"}), ())
    with pytest.raises(ContractError):
        AugmentPlan(frozenset(), (90,))
    with pytest.raises(ContractError):
        AugmentPlan(frozenset({"shear"}))
    assert AugmentPlan.from_labels(["flip_horizontal", "rotation"]).expansions == 4
    assert traditional_label([]) == "None"
    assert traditional_label(["flip_horizontal"]) == "Flipping"
    assert traditional_label(["rotation", "flip_horizontal"]) == "FlippingRotation"


@pytest.mark.parametrize(
    "traditional,n_styles,expected",
    [((), 2, 30), (("flip_horizontal",), 0, 20), (("flip_horizontal",), 1, 30)],
)
def test_multiplicity_examples(tmp_path, style_ckpts, traditional, n_styles, expected):
    ds = scan_dataset(make_dataset(tmp_path / "ds", (5, 5)))
    plan = AugmentPlan.from_labels(traditional, styles=style_ckpts[:n_styles])
    manifest = build_augmented(ds, plan, tmp_path / "out")
    assert len(manifest.rows) == expected


@settings(max_examples=12, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(
    st.lists(st.integers(1, 3), min_size=1, max_size=3),
    st.booleans(),
    st.lists(st.sampled_from([90, 180, 270, 45]), unique=True, max_size=3),
    st.integers(0, 2),
)
def test_multiplicity_and_provenance(tmp_path_factory, style_ckpts, counts, flip, angles, n_styles):
    base = tmp_path_factory.mktemp("rand")
    ds = scan_dataset(make_dataset(base / "ds", counts))
    trad = (["flip_horizontal"] if flip else []) + (["rotation"] if angles else [])
    plan = AugmentPlan.from_labels(trad, angles, style_ckpts[:n_styles])
    out = base / "out"
    manifest = build_augmented(ds, plan, out)
    assert len(manifest.rows) == len(ds) * (1 + plan.expansions)
    on_disk = sorted(p.relative_to(out).as_posix() for p in out.rglob("*.png"))
    assert on_disk == sorted(r.output_path for r in manifest.rows)
    source_class = dict(ds.items)
    for r in manifest.rows:
        assert r.class_index == source_class[r.source_path]
        assert r.output_path.startswith(ds.classes[r.class_index] + "/")
    shutil.rmtree(base)


def test_manifest_files_and_round_trip(tmp_path, style_ckpts):
    ds = scan_dataset(make_dataset(tmp_path / "ds", (2, 2)))
    plan = AugmentPlan.from_labels(["flip_horizontal", "rotation"], (90,), style_ckpts[:1])
    out = tmp_path / "out"
    manifest = build_augmented(ds, plan, out)
    lines = (out / "manifest.csv").read_text().splitlines()
    assert lines[0] == "output_path,class,provenance,source_path"
    assert lines[1:5] == [
        "class0/img0__original.png,class0,original,class0/img0.png",
        "class0/img0__flip.png,class0,flip,class0/img0.png",
        "class0/img0__rot90.png,class0,rotation(90),class0/img0.png",
        "class0/img0__style-Scream.png,class0,style(Scream),class0/img0.png",
    ]
    back = AugmentManifest.read(out)
    assert back.rows == manifest.rows and back.plan == manifest.plan and back.dataset_hash == ds.digest()
    original = load_image(out / "class0/img0__original.png")
    assert np.array_equal(original, ds.load(0))
    assert np.array_equal(load_image(out / "class0/img0__flip.png"), flip_horizontal(original))
    as_ds = back.to_dataset(out)
    assert len(as_ds) == 16 and set(as_ds.provenance) == {"original", "flip", "rotation(90)", "style(Scream)"}


def test_rebuild_is_byte_identical(tmp_path, style_ckpts):
    ds = scan_dataset(make_dataset(tmp_path / "ds", (2, 3)))
    plan = AugmentPlan.from_labels(["flip_horizontal"], styles=style_ckpts)
    a, b = tmp_path / "a", tmp_path / "b"
    build_augmented(ds, plan, a, jobs=3)
    build_augmented(ds, plan, b, jobs=1)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_bad_checkpoint_aborts_before_writing(tmp_path, style_ckpts):
    ds = scan_dataset(make_dataset(tmp_path / "ds", (2,)))
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"junk")
    out = tmp_path / "out"
    with pytest.raises(ContractError, match="bad.ckpt"):
        build_augmented(ds, AugmentPlan.from_labels(styles=[style_ckpts[0], str(bad)]), out)
    assert not out.exists() or not any(out.rglob("*"))


def test_write_failure_removes_partial_output(tmp_path, monkeypatch):
    ds = scan_dataset(make_dataset(tmp_path / "ds", (3, 3)))
    real, calls = aug_mod.save_image, {"n": 0}

    def failing(path, array):
        calls["n"] += 1
        if calls["n"] == 5:
            raise OSError(28, "No space left on device")
        real(path, array)

    monkeypatch.setattr(aug_mod, "save_image", failing)
    out = tmp_path / "out"
    with pytest.raises(OSError):
        build_augmented(ds, AugmentPlan.from_labels(["flip_horizontal"]), out)
    assert not [p for p in out.rglob("*") if p.is_file()]


def test_refuses_non_empty_output(tmp_path):
    ds = scan_dataset(make_dataset(tmp_path / "ds", (2,)))
    out = tmp_path / "out"
    out.mkdir()
    (out / "keep.txt").write_text("mine")
    with pytest.raises(ContractError, match="not empty"):
        build_augmented(ds, AugmentPlan(), out)
    with pytest.raises(ContractError, match="refusing"):
        build_augmented(ds, AugmentPlan(), out, overwrite=True)
    assert (out / "keep.txt").exists()
    done = tmp_path / "done"
    build_augmented(ds, AugmentPlan(), done)
    assert len(build_augmented(ds, AugmentPlan.from_labels(["flip_horizontal"]), done, overwrite=True).rows) == 4
