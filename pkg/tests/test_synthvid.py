import filecmp
import json

import numpy as np
import pytest

import vidcolor.synthvid as sv
from vidcolor.errors import ValidationError
from vidcolor.lexicon import COLOR_ANCHORS
from vidcolor.synthvid import (
    DatasetConfig,
    DatasetManifest,
    PlacementError,
    VideoClip,
    generate_clip,
    generate_dataset,
    render_masks,
    to_luminance,
)


def test_luminance_is_bt601():
    frame = np.random.default_rng(0).random((4, 4, 3))
    lum = to_luminance(frame)
    expected = 0.299 * frame[..., 0] + 0.587 * frame[..., 1] + 0.114 * frame[..., 2]
    np.testing.assert_allclose(lum[..., 0], expected, rtol=0, atol=1e-12)
    with pytest.raises(ValidationError):
        to_luminance(frame + 1.0)


def test_same_seed_same_clip():
    a, b = generate_clip(7, DatasetConfig(shape_count=1)), generate_clip(7, DatasetConfig(shape_count=1))
    assert np.array_equal(a.frames, b.frames) and a.caption == b.caption


def test_different_seeds_differ():
    assert not np.array_equal(generate_clip(7).frames, generate_clip(8).frames)


@pytest.mark.parametrize("seed", range(25))
def test_clip_invariants(seed):
    clip = generate_clip(seed)
    assert clip.frames.shape == (8, 32, 32, 3) and clip.luminance.shape == (8, 32, 32, 1)
    assert clip.frames.min() >= 0 and clip.frames.max() <= 1
    assert np.abs(clip.luminance - to_luminance(clip.frames)).max() <= 1e-6
    words = clip.caption.split()
    assert len(words) >= 3
    for spec in clip.shape_specs:
        assert f"a {spec.color_name} {spec.kind}" in clip.caption
    assert clip.caption == " and ".join(f"a {s.color_name} {s.kind}" for s in clip.shape_specs)
    # every shape stays visible and the shapes actually move / deform
    masks = render_masks(clip.shape_specs, 8, (32, 32))
    assert (masks.sum(axis=(2, 3)) > 0).all()
    assert not np.array_equal(clip.frames[0], clip.frames[-1])


def test_shape_count_and_validation():
    clip = generate_clip(1, DatasetConfig(shape_count=3))
    assert len(clip.shape_specs) == 3
    with pytest.raises(ValidationError):
        DatasetConfig(shape_count=4)
    with pytest.raises(ValidationError):
        DatasetConfig(clip_length=1)


def test_exclusion_and_requirement():
    pair = ("purple", "circle")
    for seed in range(60):
        clip = generate_clip(seed, exclude_pairs=[pair])
        assert pair not in {(s.color_name, s.kind) for s in clip.shape_specs}
    forced = generate_clip(3, require=pair)
    assert (forced.shape_specs[0].color_name, forced.shape_specs[0].kind) == pair
    with pytest.raises(ValidationError):
        generate_clip(3, exclude_pairs=[pair], require=pair)


def test_shape_colors_follow_anchors():
    clip = generate_clip(5, DatasetConfig(shape_count=1))
    spec = clip.shape_specs[0]
    mask = render_masks([spec], 8, (32, 32))[0] > 0.99
    np.testing.assert_allclose(clip.frames[mask].mean(0), COLOR_ANCHORS[spec.color_name], atol=1e-6)


def test_placement_failure(monkeypatch):
    monkeypatch.setattr(sv, "_visible_enough", lambda *a: False)
    with pytest.raises(PlacementError, match="100 attempts"):
        generate_clip(0)


def test_video_clip_checks_luminance():
    clip = generate_clip(2)
    with pytest.raises(ValidationError):
        VideoClip(clip.frames, clip.luminance * 0.5, clip.caption, clip.shape_specs)


def test_small_dataset(tmp_path):
    manifest = generate_dataset(2, 1, 1, DatasetConfig(seed=4), tmp_path)
    assert len(manifest.entries) == 4
    ids = [set(e.id for e in manifest.split(s)) for s in ("train", "val", "test")]
    assert all(not (a & b) for i, a in enumerate(ids) for b in ids[i + 1 :])
    data = json.loads((tmp_path / "manifest.json").read_text())
    assert data["frame_size"] == [32, 32] and data["clip_length"] == 8
    for e in data["entries"]:
        assert set(e) >= {"id", "caption", "split", "frames"}
        assert e["frames"][0] == f"{e['id']}/frame_0000.png"
        assert all((tmp_path / p).exists() for p in e["frames"])


def test_png_round_trip(tmp_path):
    config = DatasetConfig(seed=4)
    manifest = generate_dataset(2, 0, 0, config, tmp_path)
    for k, entry in enumerate(manifest.split("train")):
        loaded = DatasetManifest.load(tmp_path).load_clip(entry)
        original = generate_clip(sv.clip_seed(4, "train", k), config)
        assert np.abs(loaded.frames - original.frames).max() <= 1 / 255
        assert loaded.caption == original.caption


def test_empty_dataset_writes_nothing(tmp_path):
    manifest = generate_dataset(0, 0, 0, DatasetConfig(), tmp_path / "empty")
    assert manifest.entries == []
    assert list((tmp_path / "empty").iterdir()) == []


def test_dataset_bit_reproducible(tmp_path):
    config = DatasetConfig(seed=9)
    generate_dataset(2, 1, 1, config, tmp_path / "a")
    generate_dataset(2, 1, 1, config, tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for sub in cmp.subdirs.values():
        assert not sub.diff_files
        _, mismatch, errors = filecmp.cmpfiles(sub.left, sub.right, sub.left_list, shallow=False)
        assert not mismatch and not errors


def test_creative_test_clips(tmp_path):
    config = DatasetConfig(seed=1, exclude_pairs=(("purple", "circle"),), creative_test_clips=2)
    manifest = generate_dataset(6, 0, 3, config, tmp_path)
    pairs = lambda e: {(s["color_name"], s["kind"]) for s in e.shapes}
    tests = manifest.split("test")
    assert ("purple", "circle") in pairs(tests[0]) and ("purple", "circle") in pairs(tests[1])
    assert all(("purple", "circle") not in pairs(e) for e in manifest.split("train"))
    with pytest.raises(ValidationError):
        DatasetConfig(creative_test_clips=1)


def test_unwritable_output_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        generate_dataset(1, 0, 0, DatasetConfig(), blocker / "sub")
