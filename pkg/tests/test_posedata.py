import json
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from numcore import ConfigError, NonFiniteError, ShapeError
from posedata import (
    FEATURES,
    LAYOUT,
    WINDOW,
    Dataset,
    FrameCountMismatchError,
    MalformedManifestError,
    MissingFileError,
    OverlappingSplitsError,
    Sample,
    augment,
    batch_windows,
    clean_sequence,
    draw_augmentation,
    filter_dataset,
    interpolate_missing,
    load_dataset,
    make_toy_dataset,
    normalize_sequence,
    oversample_balance,
    savgol_coefficients,
    savgol_smooth,
    save_dataset,
    split_validation,
    window_frames,
)


def _write_raw(root, classes, samples, splits, frames_override=None):
    """samples: list of (id, class_index, frames); values are a ramp."""
    (root / "samples").mkdir(parents=True)
    entries = []
    for sid, cls, frames in samples:
        values = np.arange(frames * FEATURES, dtype="<f4").reshape(frames, FEATURES) / 1000.0
        (root / "samples" / f"{sid}.bin").write_bytes(values.tobytes())
        declared = frames_override.get(sid, frames) if frames_override else frames
        entries.append({"id": sid, "class_index": cls, "frames": declared, "file": f"samples/{sid}.bin"})
    manifest = {"name": "raw", "num_landmarks": 60, "coords": 3, "classes": classes,
                "samples": entries, "splits": splits}
    (root / "manifest.json").write_text(json.dumps(manifest), encoding="utf-8")
    return root


# --------------------------
# layout / loading
# --------------------------
def test_layout_totals():
    assert LAYOUT.total_landmarks == 12 + 6 + 21 + 21 == 60
    assert FEATURES == 180
    assert len(LAYOUT.hand_z_columns) == 42


def test_layout_select_zeroes_hand_depth(rng):
    frames = 3
    face, body = rng.random((frames, 478, 3)), rng.random((frames, 33, 4))
    left, right = rng.random((frames, 21, 3)), rng.random((frames, 21, 2))
    seq = LAYOUT.select(face, body, left, right, face_indices=list(range(12)), body_indices=[11, 12, 13, 14, 15, 16])
    assert seq.shape == (frames, FEATURES)
    assert_array_equal(seq[:, LAYOUT.hand_z_columns], 0.0)
    assert_array_equal(seq[:, :3], face[:, 0, :3])
    with pytest.raises(ConfigError):
        LAYOUT.select(face, body, left, right, face_indices=[0], body_indices=[0])


def test_load_dataset_basic(tmp_path):
    root = _write_raw(tmp_path / "d", ["a", "b"], [("s1", 0, 3), ("s2", 1, 2), ("s3", 0, 4)],
                      {"train": ["s1", "s2"], "test": ["s3"]})
    data = load_dataset(root)
    assert data.num_classes == 2
    assert len(data.split_samples("train")) == 2
    assert data.sample("s3").sequence.shape == (4, FEATURES)
    assert_array_equal(data.sample("s1").sequence[:, LAYOUT.hand_z_columns], 0.0)


def test_load_dataset_frame_count_mismatch(tmp_path):
    root = _write_raw(tmp_path / "d", ["a"], [("s1", 0, 3)], {"train": ["s1"]}, frames_override={"s1": 4})
    with pytest.raises(FrameCountMismatchError):
        load_dataset(root)


def test_load_dataset_empty_classes(tmp_path):
    root = _write_raw(tmp_path / "d", [], [], {})
    with pytest.raises(MalformedManifestError):
        load_dataset(root)


def test_load_dataset_missing_files(tmp_path):
    with pytest.raises(MissingFileError):
        load_dataset(tmp_path / "nowhere")
    root = _write_raw(tmp_path / "d", ["a"], [("s1", 0, 3)], {"train": ["s1"]})
    (root / "samples" / "s1.bin").unlink()
    with pytest.raises(MissingFileError):
        load_dataset(root)


def test_load_dataset_overlapping_splits(tmp_path):
    root = _write_raw(tmp_path / "d", ["a"], [("s1", 0, 3), ("s2", 0, 3)], {"train": ["s1", "s2"], "test": ["s2"]})
    with pytest.raises(OverlappingSplitsError):
        load_dataset(root)


def test_load_dataset_bad_class_index(tmp_path):
    root = _write_raw(tmp_path / "d", ["a"], [("s1", 3, 3)], {"train": ["s1"]})
    with pytest.raises(MalformedManifestError):
        load_dataset(root)


def test_save_load_roundtrip(tmp_path, split_toy_dataset):
    save_dataset(split_toy_dataset, tmp_path / "out")
    loaded = load_dataset(tmp_path / "out")
    assert loaded.classes == split_toy_dataset.classes
    assert loaded.splits == split_toy_dataset.splits
    for a, b in zip(loaded.samples, split_toy_dataset.samples):
        assert a.id == b.id and a.class_index == b.class_index
        assert_allclose(a.sequence, b.sequence.astype(np.float32), atol=0)


# --------------------------
# cleaning
# --------------------------
def _column(values):
    seq = np.zeros((len(values), FEATURES))
    seq[:, 0] = values
    return seq


def test_interpolate_examples():
    assert_array_equal(interpolate_missing(_column([1, np.nan, 3]))[:, 0], [1, 2, 3])
    assert_array_equal(interpolate_missing(_column([np.nan, np.nan, 5, 7]))[:, 0], [5, 5, 5, 7])
    assert_array_equal(interpolate_missing(_column([np.nan] * 4))[:, 0], [0, 0, 0, 0])


def test_interpolate_is_idempotent(rng):
    seq = rng.normal(size=(30, FEATURES))
    seq[rng.random(seq.shape) < 0.2] = np.nan
    once = interpolate_missing(seq)
    assert np.isfinite(once).all()
    assert_array_equal(interpolate_missing(once), once)


def test_savgol_reproduces_cubics():
    t = np.linspace(-1.5, 2.0, 40)
    seq = _column(t ** 3 - 2 * t)
    seq[:, 1] = 4.0
    out = savgol_smooth(seq, 15, 3)
    assert_allclose(out[:, 0], t ** 3 - 2 * t, atol=1e-9)
    assert_allclose(out[:, 1], 4.0, atol=1e-12)


def test_savgol_central_coefficients_match_normal_equations():
    window, order = 15, 3
    positions = np.arange(window) - window // 2
    vander = np.vander(positions, order + 1, increasing=True).astype(float)
    solution = np.linalg.solve(vander.T @ vander, vander.T)
    assert_allclose(savgol_coefficients(window, order), solution[0], atol=1e-12)


def test_savgol_commutes_with_affine_maps(rng):
    seq = rng.normal(size=(25, FEATURES))
    assert_allclose(savgol_smooth(3.0 * seq - 1.5), 3.0 * savgol_smooth(seq) - 1.5, atol=1e-9)


def test_savgol_errors():
    seq = np.zeros((20, FEATURES))
    with pytest.raises(ConfigError):
        savgol_smooth(seq, window=14)
    with pytest.raises(ConfigError):
        savgol_smooth(seq, window=5, polyorder=5)
    seq[3, 3] = np.nan
    with pytest.raises(NonFiniteError):
        savgol_smooth(seq)


def test_clean_sequence_is_finite_with_flat_hand_depth(rng):
    seq = rng.normal(size=(20, FEATURES))
    seq[rng.random(seq.shape) < 0.3] = np.nan
    out = clean_sequence(seq)
    assert np.isfinite(out).all()
    assert_array_equal(out[:, LAYOUT.hand_z_columns], 0.0)


def test_normalize_centers_on_body():
    seq = np.ones((3, FEATURES))
    out = normalize_sequence(seq, center_on_body=True)
    joints = out.reshape(3, 60, 3)
    assert_allclose(joints[0, LAYOUT.body_slice, :2], 0.0)
    assert_allclose(joints[..., 2], 1.0)
    assert_array_equal(normalize_sequence(seq), seq)


# --------------------------
# windowing / balancing
# --------------------------
def test_window_random_slice_bounds(rng):
    seq = np.repeat(np.arange(40.0)[:, None], FEATURES, axis=1)
    for _ in range(50):
        clip, valid = window_frames(seq, mode="random", rng=rng)
        start = int(clip[0, 0])
        assert 0 <= start <= 8
        assert clip.shape == (WINDOW, FEATURES) and valid == 32
        assert_array_equal(clip[:, 0], np.arange(start, start + 32))


def test_window_pads_short_clips_and_centers():
    short = np.ones((20, FEATURES))
    clip, valid = window_frames(short)
    assert valid == 20
    assert_array_equal(clip[20:], 0.0)
    assert_array_equal(clip[:20], 1.0)

    exact = np.arange(32 * FEATURES, dtype=float).reshape(32, FEATURES)
    clip, valid = window_frames(exact, mode="center")
    assert_array_equal(clip, exact)
    assert valid == 32

    longer = np.repeat(np.arange(41.0)[:, None], FEATURES, axis=1)
    assert window_frames(longer, mode="center")[0][0, 0] == (41 - 32) // 2


def test_batch_windows_shapes(toy_dataset):
    clips, valid, labels = batch_windows(toy_dataset.samples[:6], mode="center")
    assert clips.shape == (6, 32, FEATURES)
    assert valid.shape == labels.shape == (6,)


def _samples(counts):
    return [Sample(id=f"{c}-{i}", class_index=c, sequence=np.zeros((2, FEATURES)))
            for c, n in enumerate(counts) for i in range(n)]


@pytest.mark.parametrize("counts", [[3, 1], [2, 2], [5, 2, 1]])
def test_oversample_balance(counts):
    samples = _samples(counts)
    out = oversample_balance(samples, seed=3)
    per_class = np.bincount([s.class_index for s in out])
    assert_array_equal(per_class, [max(counts)] * len(counts))
    assert out[:len(samples)] == samples
    assert {s.id for s in out} == {s.id for s in samples}


def test_oversample_balance_is_cyclic_and_seeded():
    samples = _samples([6, 2])
    a = oversample_balance(samples, seed=5)
    b = oversample_balance(samples, seed=5)
    assert [s.id for s in a] == [s.id for s in b]
    extra = [s.id for s in a[len(samples):]]
    assert sorted(extra[:2]) == ["1-0", "1-1"] and sorted(extra[2:]) == ["1-0", "1-1"]


def test_oversample_balance_errors():
    with pytest.raises(ConfigError):
        oversample_balance(_samples([2, 0, 1]), num_classes=3)
    with pytest.raises(ConfigError):
        oversample_balance([])


# --------------------------
# augmentation
# --------------------------
def test_augment_identity(rng):
    seq = rng.random((32, FEATURES))
    seq[:, LAYOUT.hand_z_columns] = 0.0
    assert_allclose(augment(seq, angle_deg=0.0, scale=1.0), seq, atol=1e-12)


def test_augment_rotates_unit_vector():
    seq = np.zeros((2, FEATURES))
    joints = seq.reshape(2, 60, 3)
    joints[:, 0, :2] = [1.0, 0.0]
    joints[:, 1, :2] = [-1.0, 0.0]
    out = augment(seq, angle_deg=90.0, scale=1.0).reshape(2, 60, 3)
    center = np.array([0.0, 0.0])
    assert_allclose(out[0, 0, :2], center + [0.0, 1.0], atol=1e-9)


def test_augment_preserves_distances_up_to_scale_and_padding(rng):
    seq = np.zeros((32, FEATURES))
    seq[:20] = rng.random((20, FEATURES))
    seq[:, LAYOUT.hand_z_columns] = 0.0
    out = augment(seq, valid_frames=20, angle_deg=3.0, scale=1.04)
    assert_array_equal(out[20:], 0.0)
    xy_in = seq[:20].reshape(20, 60, 3)[..., :2].reshape(-1, 2)
    xy_out = out[:20].reshape(20, 60, 3)[..., :2].reshape(-1, 2)
    d_in = np.linalg.norm(xy_in[:50, None] - xy_in[None, :50], axis=-1)
    d_out = np.linalg.norm(xy_out[:50, None] - xy_out[None, :50], axis=-1)
    assert_allclose(d_out, 1.04 * d_in, atol=1e-9)
    assert_array_equal(out[:, LAYOUT.hand_z_columns], 0.0)


def test_augmentation_draw_bounds(rng):
    draws = np.array([draw_augmentation(rng) for _ in range(1000)])
    assert np.all(np.abs(draws[:, 0]) <= 5.0)
    assert np.all((draws[:, 1] >= 0.95) & (draws[:, 1] <= 1.05))


def test_augment_is_seeded(rng):
    seq = rng.random((32, FEATURES))
    assert_array_equal(augment(seq, rng=42), augment(seq, rng=42))


# --------------------------
# dataset transforms
# --------------------------
def test_split_validation_moves_a_tenth_per_class():
    data = make_toy_dataset(num_classes=2, per_class=20, seed=1)
    out = split_validation(data, fraction=0.1, seed=0)
    assert len(out.splits["val"]) == 4
    assert_array_equal(out.class_counts("val"), [2, 2])
    assert not set(out.splits["val"]) & set(out.splits["train"])
    out.validate()


def test_filter_dataset_reindexes():
    samples = _samples([5, 1, 3])
    data = Dataset(name="f", classes=["a", "b", "c"], samples=samples,
                   splits={"train": [s.id for s in samples], "val": [], "test": []})
    out = filter_dataset(data, min_per_class=3)
    assert out.classes == ["a", "c"]
    assert_array_equal(out.class_counts(), [5, 3])
    with pytest.raises(ConfigError):
        filter_dataset(data, min_per_class=10)


def test_filter_dataset_drops_long_clips():
    data = make_toy_dataset(num_classes=2, per_class=6, min_frames=20, max_frames=80, seed=2)
    out = filter_dataset(data, max_frames=60)
    assert all(s.frames <= 60 for s in out.samples)


def test_toy_dataset_is_seeded_and_valid():
    a = make_toy_dataset(num_classes=3, per_class=4, test_fraction=0.5, seed=9)
    b = make_toy_dataset(num_classes=3, per_class=4, test_fraction=0.5, seed=9)
    a.validate()
    assert len(a.splits["test"]) == 6
    for x, y in zip(a.samples, b.samples):
        assert_array_equal(x.sequence, y.sequence)
    assert math.isclose(np.abs(a.samples[0].sequence[:, LAYOUT.hand_z_columns]).sum(), 0.0)


def test_toy_dataset_missing_values_clean_up():
    data = make_toy_dataset(num_classes=1, per_class=2, missing_rate=0.1, seed=4)
    assert np.isnan(data.samples[0].sequence).any()
    assert np.isfinite(clean_sequence(data.samples[0].sequence)).all()


def test_validate_rejects_wrong_width():
    data = Dataset(name="bad", classes=["a"], samples=[Sample("x", 0, np.zeros((3, 5)))],
                   splits={"train": ["x"], "val": [], "test": []})
    with pytest.raises(ShapeError):
        data.validate()
