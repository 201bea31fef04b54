import json
import math
import os
import subprocess

import numpy as np
import pytest

import semnerf


def square_mask(size=32, label=2, lo=10, hi=20):
    m = np.zeros((size, size), np.uint8)
    m[lo:hi, lo:hi] = label
    return m


def test_labels():
    assert semnerf.label_names() == ["background", "skin", "eye", "mouth", "ear", "nose"]


def test_homogeneous_medium():
    err256 = abs(semnerf.render_homogeneous(2.0, 256) - (1 - math.exp(-2)))
    err512 = abs(semnerf.render_homogeneous(2.0, 512) - (1 - math.exp(-2)))
    assert err256 < 1e-3
    assert err512 / err256 == pytest.approx(0.5, rel=0.2)


def test_distance_transform_matches_brute_force():
    rng = np.random.default_rng(0)
    m = np.zeros((24, 24), np.uint8)
    for _ in range(4):
        r, c = rng.integers(0, 20, 2)
        m[r : r + 5, c : c + 4] = rng.integers(1, 6)
    contour = semnerf.build_contour(m)
    d = semnerf.squared_distance_transform(contour)
    on = np.argwhere(contour > 0)
    rr, cc = np.mgrid[:24, :24]
    brute = ((rr[..., None] - on[:, 0]) ** 2 + (cc[..., None] - on[:, 1]) ** 2).min(-1)
    np.testing.assert_array_equal(d, brute)
    f = semnerf.distance_field(m)
    assert f.min() == 0.0 and f.max() == pytest.approx(255.0)


def test_unknown_label_rejected():
    with pytest.raises(ValueError):
        semnerf.build_contour(square_mask(label=42))


def test_pose_validation():
    p = semnerf.CameraPose(1.2, 1.5)
    assert p.roll == 0.0 and p.fov_degrees == 18.0
    with pytest.raises(Exception):
        semnerf.CameraPose(float("nan"), 1.5)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    manifest = json.loads(semnerf.build_dataset(out, 2, 1, seed=3, size=16))
    return out, manifest


def test_build_dataset(tiny_dataset):
    out, manifest = tiny_dataset
    assert (out / "train").is_dir() and (out / "test").is_dir()
    assert isinstance(manifest, dict)
    masks = sorted((out / "train" / "masks").glob("*.png"))
    assert len(masks) == 2
    labels = [semnerf.read_mask(p) for p in masks]
    assert all(l.shape == (16, 16) and l.max() < 6 for l in labels)


CLI = os.environ.get("SEMNERF_CLI")


@pytest.mark.skipif(not CLI or not os.path.exists(CLI), reason="CLI not built")
def test_cli_round_trip(tmp_path, tiny_dataset):
    dec = {
        "mode": "glo",
        "steps": 3,
        "batch": 2,
        "rays_per_item": 16,
        "render_steps": 8,
        "log_every": 0,
        "field": {"layers": 2, "width": 8, "latent_dim": 4, "mapping_width": 8, "mapping_layers": 1},
    }
    enc = {
        "steps": 2,
        "batch": 2,
        "gan_batch": 2,
        "region": 8,
        "render_steps": 8,
        "log_every": 0,
        "encoder": {"resolution": 16, "patch": 8, "dim": 8, "blocks": 1, "heads": 2},
    }
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"decoder": dec, "encoder": enc, "train_dir": str(tiny_dataset[0] / "train")}))
    subprocess.run([CLI, "train", "--phase", "decoder", "--config", str(cfg), "--out", str(tmp_path / "dec.ckpt")], check=True)
    subprocess.run(
        [CLI, "train", "--phase", "encoder", "--config", str(cfg), "--decoder", str(tmp_path / "dec.ckpt"),
         "--out", str(tmp_path / "model.ckpt")],
        check=True,
    )
    assert (tmp_path / "model.ckpt.loss.csv").exists() or (tmp_path / "model.loss.csv").exists()

    model = semnerf.Model.load(tmp_path / "model.ckpt")
    assert len(model.checkpoint_hash) == 64
    style = model.encode(square_mask(16, 1, 4, 12))
    assert style.shape == model.style_shape
    views = model.render(style, [semnerf.CameraPose(), semnerf.CameraPose(1.4, 1.6)], size=8, steps=8)
    assert len(views) == 2 and views[0].shape == (8, 8, 3)
    assert np.isfinite(views[0]).all()
    np.testing.assert_array_equal(model.mix(style, seed=5, t=0.0), style)
    assert not np.array_equal(model.mix(style, seed=5, t=1.0), style)
