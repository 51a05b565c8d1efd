"""
Pose-sequence datasets: on-disk format, cleaning filters, windowing,
class balancing and geometric augmentation.

A pose sequence is a (frames, 180) float array: 60 landmarks
(12 face, 6 body, 21 left hand, 21 right hand) flattened as x, y, z.
Quiet NaN marks a missing value until the sequence is cleaned.
"""

from __future__ import annotations

import functools
import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import savgol_coeffs

from numcore import ConfigError, HandcraftError, NonFiniteError, ShapeError

PoseSequence = np.ndarray

SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.json"
SAMPLE_DTYPE = np.dtype("<f4")


# --------------------------
# ERRORS
# --------------------------
class DatasetError(HandcraftError):
    pass


class MissingFileError(DatasetError, FileNotFoundError):
    pass


class MalformedManifestError(DatasetError, ValueError):
    pass


class FrameCountMismatchError(DatasetError, ValueError):
    pass


class OverlappingSplitsError(DatasetError, ValueError):
    pass


# --------------------------
# LAYOUT
# --------------------------
@dataclass(frozen=True)
class LandmarkLayout:
    face_count: int = 12
    body_count: int = 6
    hand_count: int = 21
    coords_per_landmark: int = 3

    @property
    def total_landmarks(self) -> int:
        return self.face_count + self.body_count + 2 * self.hand_count

    @property
    def features_per_frame(self) -> int:
        return self.total_landmarks * self.coords_per_landmark

    @property
    def depth_landmarks(self) -> int:
        """Face and body landmarks come first and are the only ones with depth."""
        return self.face_count + self.body_count

    @property
    def body_slice(self) -> slice:
        return slice(self.face_count, self.face_count + self.body_count)

    @property
    def hand_z_columns(self) -> np.ndarray:
        hands = np.arange(self.depth_landmarks, self.total_landmarks)
        return hands * self.coords_per_landmark + 2

    def select(self, face: np.ndarray, body: np.ndarray, left_hand: np.ndarray, right_hand: np.ndarray,
               face_indices: Sequence[int], body_indices: Sequence[int]) -> PoseSequence:
        """
        Subset a full upstream extraction to this layout.

        face/body are (frames, n, 3+) arrays, hands (frames, 21, 2 or 3).
        Index lists come from config; hand z is forced to 0.
        """
        if len(face_indices) != self.face_count or len(body_indices) != self.body_count:
            raise ConfigError(f"Expected {self.face_count} face and {self.body_count} body indices, "
                              f"got {len(face_indices)} and {len(body_indices)}")
        frames = face.shape[0]
        hands = []
        for hand in (left_hand, right_hand):
            if hand.shape[:2] != (frames, self.hand_count):
                raise ShapeError(f"Hand array shape {hand.shape} does not match ({frames}, {self.hand_count}, ...)")
            xy = np.asarray(hand, dtype=np.float64)[..., :2]
            hands.append(np.concatenate([xy, np.zeros(xy.shape[:2] + (1,))], axis=-1))
        parts = [
            np.asarray(face, dtype=np.float64)[:, list(face_indices), :3],
            np.asarray(body, dtype=np.float64)[:, list(body_indices), :3],
            *hands,
        ]
        return np.concatenate(parts, axis=1).reshape(frames, self.features_per_frame)


LAYOUT = LandmarkLayout()
FEATURES = LAYOUT.features_per_frame


# --------------------------
# DATASET
# --------------------------
@dataclass(frozen=True, eq=False)
class Sample:
    id: str
    class_index: int
    sequence: PoseSequence

    @property
    def frames(self) -> int:
        return int(self.sequence.shape[0])


@dataclass(eq=False)
class Dataset:
    name: str
    classes: list[str]
    samples: list[Sample]
    splits: dict[str, list[str]] = field(default_factory=lambda: {s: [] for s in SPLITS})
    synthetic: bool = False

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @functools.cached_property
    def _by_id(self) -> dict[str, Sample]:
        return {s.id: s for s in self.samples}

    def sample(self, sample_id: str) -> Sample:
        return self._by_id[sample_id]

    def split_samples(self, split: str) -> list[Sample]:
        if split not in SPLITS:
            raise ConfigError(f"Unknown split '{split}', expected one of {SPLITS}")
        return [self._by_id[i] for i in self.splits.get(split, [])]

    def class_counts(self, split: str | None = None) -> np.ndarray:
        samples = self.samples if split is None else self.split_samples(split)
        return np.bincount([s.class_index for s in samples], minlength=self.num_classes)

    def validate(self) -> None:
        if not self.classes:
            raise MalformedManifestError(f"Dataset '{self.name}' has an empty class list")
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise MalformedManifestError(f"Dataset '{self.name}' has duplicate sample ids")
        for s in self.samples:
            if not 0 <= s.class_index < self.num_classes:
                raise MalformedManifestError(f"Sample '{s.id}' has class_index {s.class_index} "
                                             f"outside [0, {self.num_classes})")
            if s.sequence.ndim != 2 or s.sequence.shape[1] != FEATURES or s.frames < 1:
                raise ShapeError(f"Sample '{s.id}' has shape {s.sequence.shape}, expected (frames>=1, {FEATURES})")
        _check_splits(self.splits, set(ids))


def _check_splits(splits: dict[str, list[str]], known: set[str]) -> None:
    unknown_keys = set(splits) - set(SPLITS)
    if unknown_keys:
        raise MalformedManifestError(f"Unknown split names: {sorted(unknown_keys)}")
    seen: dict[str, str] = {}
    for split, ids in splits.items():
        for sample_id in ids:
            if sample_id not in known:
                raise MalformedManifestError(f"Split '{split}' references unknown sample '{sample_id}'")
            if sample_id in seen:
                raise OverlappingSplitsError(f"Sample '{sample_id}' is in both '{seen[sample_id]}' and '{split}'")
            seen[sample_id] = split


def _field(data: dict, key: str, kind):
    if key not in data:
        raise MalformedManifestError(f"Manifest is missing field '{key}'")
    value = data[key]
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise MalformedManifestError(f"Manifest field '{key}' has the wrong type")
    return value


def load_dataset(path: str | Path) -> Dataset:
    """Read and validate a dataset directory (manifest.json + per-sample float32 files)."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise MissingFileError(f"Manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise MalformedManifestError(f"Manifest {manifest_path} is not valid JSON: {e}") from e
    if not isinstance(manifest, dict):
        raise MalformedManifestError(f"Manifest {manifest_path} must be a JSON object")

    name = _field(manifest, "name", str)
    classes = _field(manifest, "classes", list)
    if not classes or not all(isinstance(c, str) for c in classes):
        raise MalformedManifestError(f"Manifest {manifest_path} needs a non-empty list of class names")
    if _field(manifest, "num_landmarks", int) != LAYOUT.total_landmarks:
        raise MalformedManifestError(f"num_landmarks must be {LAYOUT.total_landmarks}")
    if _field(manifest, "coords", int) != LAYOUT.coords_per_landmark:
        raise MalformedManifestError(f"coords must be {LAYOUT.coords_per_landmark}")

    entries = _field(manifest, "samples", list)
    for entry in entries:
        if not isinstance(entry, dict):
            raise MalformedManifestError("Every sample entry must be an object")
        _field(entry, "id", str)
        _field(entry, "file", str)
        class_index = _field(entry, "class_index", int)
        if not 0 <= class_index < len(classes):
            raise MalformedManifestError(f"Sample '{entry['id']}' has class_index {class_index} "
                                         f"outside [0, {len(classes)})")
        if _field(entry, "frames", int) < 1:
            raise MalformedManifestError(f"Sample '{entry['id']}' must have at least one frame")
    ids = [e["id"] for e in entries]
    if len(set(ids)) != len(ids):
        raise MalformedManifestError("Manifest has duplicate sample ids")

    raw_splits = manifest.get("splits", {})
    if not isinstance(raw_splits, dict) or not all(isinstance(v, list) for v in raw_splits.values()):
        raise MalformedManifestError("Manifest field 'splits' must map split names to id lists")
    splits = {s: list(raw_splits.get(s, [])) for s in SPLITS}
    extra = {k: v for k, v in raw_splits.items() if k not in SPLITS}
    _check_splits({**splits, **extra}, set(ids))

    samples = []
    for entry in entries:
        file_path = root / entry["file"]
        if not file_path.is_file():
            raise MissingFileError(f"Sample file not found: {file_path}")
        raw = file_path.read_bytes()
        expected = entry["frames"] * FEATURES * SAMPLE_DTYPE.itemsize
        if len(raw) != expected:
            raise FrameCountMismatchError(f"{file_path}: {len(raw)} bytes, expected {expected} "
                                          f"for {entry['frames']} frames")
        values = np.frombuffer(raw, dtype=SAMPLE_DTYPE).reshape(entry["frames"], FEATURES).astype(np.float64)
        values[:, LAYOUT.hand_z_columns] = 0.0
        samples.append(Sample(id=entry["id"], class_index=entry["class_index"], sequence=values))

    return Dataset(name=name, classes=list(classes), samples=samples, splits=splits,
                   synthetic=bool(manifest.get("synthetic", False)))


def _sample_filename(index: int, sample_id: str) -> str:
    safe = re.sub(r"[^\w.-]", "_", sample_id)
    return f"samples/{index:06d}_{safe}.bin"


def save_dataset(dataset: Dataset, path: str | Path) -> Path:
    """Write a dataset directory in the format load_dataset reads."""
    dataset.validate()
    root = Path(path)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    for index, sample in enumerate(dataset.samples):
        rel = _sample_filename(index, sample.id)
        (root / rel).write_bytes(np.ascontiguousarray(sample.sequence, dtype=SAMPLE_DTYPE).tobytes())
        entries.append({"id": sample.id, "class_index": int(sample.class_index),
                        "frames": sample.frames, "file": rel})
    manifest = {
        "name": dataset.name,
        "num_landmarks": LAYOUT.total_landmarks,
        "coords": LAYOUT.coords_per_landmark,
        "classes": list(dataset.classes),
        "samples": entries,
        "splits": {s: list(dataset.splits.get(s, [])) for s in SPLITS},
        "synthetic": bool(dataset.synthetic),
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, ensure_ascii=False, indent=2), encoding="utf-8")
    return root


# --------------------------
# CLEANING
# --------------------------
def interpolate_missing(seq: PoseSequence) -> PoseSequence:
    """Fill non-finite values per channel: linear inside, nearest value at the edges, 0 if all missing."""
    out = np.array(seq, dtype=np.float64, copy=True)
    frames = np.arange(out.shape[0])
    valid = np.isfinite(out)
    for col in np.flatnonzero(~valid.all(axis=0)):
        ok = valid[:, col]
        if not ok.any():
            out[:, col] = 0.0
            continue
        out[~ok, col] = np.interp(frames[~ok], frames[ok], out[ok, col])
    return out


def _check_savgol(window: int, polyorder: int) -> None:
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"Savitzky-Golay window must be a positive odd number, got {window}")
    if not 0 <= polyorder < window:
        raise ConfigError(f"polyorder must be in [0, window), got {polyorder} for window {window}")


@functools.lru_cache(maxsize=None)
def _fit_coefficients(length: int, polyorder: int, pos: int) -> np.ndarray:
    coeffs = savgol_coeffs(length, polyorder, pos=pos, use="dot")
    coeffs.setflags(write=False)
    return coeffs


def savgol_coefficients(window: int = 15, polyorder: int = 3) -> np.ndarray:
    """Central smoothing weights (dot order) for a full window."""
    _check_savgol(window, polyorder)
    return _fit_coefficients(window, polyorder, window // 2)


def savgol_smooth(seq: PoseSequence, window: int = 15, polyorder: int = 3) -> PoseSequence:
    """
    Centered least-squares polynomial smoothing per channel.

    Near the ends the window is truncated and the polynomial is fitted on the
    one-sided remainder, then evaluated at the frame position.
    """
    _check_savgol(window, polyorder)
    values = np.asarray(seq, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("savgol_smooth needs a NaN-free sequence; run interpolate_missing first")
    frames = values.shape[0]
    half = window // 2
    out = np.empty_like(values)
    for t in range(frames):
        lo, hi = max(0, t - half), min(frames, t + half + 1)
        length = hi - lo
        coeffs = _fit_coefficients(length, min(polyorder, length - 1), t - lo)
        out[t] = coeffs @ values[lo:hi]
    return out


def normalize_sequence(seq: PoseSequence, center_on_body: bool = False,
                       layout: LandmarkLayout = LAYOUT) -> PoseSequence:
    """Optionally shift x, y so the first frame's body centroid sits at the origin."""
    out = np.array(seq, dtype=np.float64, copy=True)
    if not center_on_body:
        return out
    joints = out.reshape(out.shape[0], layout.total_landmarks, layout.coords_per_landmark)
    body_xy = joints[:, layout.body_slice, :2]
    usable = np.flatnonzero(np.isfinite(body_xy).all(axis=(1, 2)))
    if usable.size == 0:
        return out
    centroid = body_xy[usable[0]].mean(axis=0)
    joints[..., :2] -= centroid
    return joints.reshape(out.shape)


def clean_sequence(seq: PoseSequence, window: int = 15, polyorder: int = 3,
                   center_on_body: bool = False) -> PoseSequence:
    filled = interpolate_missing(seq)
    filled[:, LAYOUT.hand_z_columns] = 0.0
    smoothed = savgol_smooth(filled, window=window, polyorder=polyorder)
    return normalize_sequence(smoothed, center_on_body=center_on_body)


# --------------------------
# WINDOWING / BALANCING
# --------------------------
WINDOW = 32
WINDOW_MODES = ("random", "center")


def window_frames(seq: PoseSequence, window: int = WINDOW, mode: str = "center",
                  rng: np.random.Generator | int | None = None) -> tuple[PoseSequence, int]:
    """Fixed-length clip: a contiguous slice, or the whole clip followed by zero rows."""
    if mode not in WINDOW_MODES:
        raise ConfigError(f"Unknown window mode '{mode}', expected one of {WINDOW_MODES}")
    values = np.asarray(seq, dtype=np.float64)
    frames = values.shape[0]
    if frames < 1:
        raise ShapeError("Cannot window an empty sequence")
    if frames >= window:
        if mode == "random":
            start = int(np.random.default_rng(rng).integers(0, frames - window + 1))
        else:
            start = (frames - window) // 2
        return values[start:start + window].copy(), window
    clip = np.zeros((window, values.shape[1]))
    clip[:frames] = values
    return clip, frames


def batch_windows(samples: Sequence[Sample], mode: str = "center",
                  rng: np.random.Generator | int | None = None,
                  window: int = WINDOW) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack windowed clips: (B, window, L) values, (B,) valid frame counts, (B,) labels."""
    rng = np.random.default_rng(rng)
    clips, valid = [], []
    for sample in samples:
        clip, v = window_frames(sample.sequence, window=window, mode=mode, rng=rng)
        clips.append(clip)
        valid.append(v)
    labels = np.array([s.class_index for s in samples], dtype=np.int64)
    return np.stack(clips), np.array(valid, dtype=np.int64), labels


def oversample_balance(samples: Sequence[Sample], seed: int | np.random.Generator | None = 0,
                       num_classes: int | None = None) -> list[Sample]:
    """Replicate minority-class samples until every class matches the largest one."""
    if not samples:
        raise ConfigError("Cannot balance an empty sample list")
    by_class: dict[int, list[Sample]] = {}
    for sample in samples:
        by_class.setdefault(sample.class_index, []).append(sample)
    if num_classes is not None:
        empty = [c for c in range(num_classes) if c not in by_class]
        if empty:
            raise ConfigError(f"Classes without samples cannot be balanced: {empty}")

    rng = np.random.default_rng(seed)
    target = max(len(members) for members in by_class.values())
    result = list(samples)
    for class_index in sorted(by_class):
        members = by_class[class_index]
        need = target - len(members)
        if need == 0:
            continue
        order = rng.permutation(len(members))
        result.extend(members[order[i % len(members)]] for i in range(need))
    return result


# --------------------------
# AUGMENTATION
# --------------------------
MAX_ROTATION_DEG = 5.0
MAX_SCALE_DELTA = 0.05


def draw_augmentation(rng: np.random.Generator) -> tuple[float, float]:
    """One (rotation in degrees, scale) draw."""
    theta = rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG)
    scale = rng.uniform(1.0 - MAX_SCALE_DELTA, 1.0 + MAX_SCALE_DELTA)
    return float(theta), float(scale)


def augment(seq: PoseSequence, valid_frames: int | None = None,
            rng: np.random.Generator | int | None = None,
            angle_deg: float | None = None, scale: float | None = None,
            layout: LandmarkLayout = LAYOUT) -> PoseSequence:
    """
    Image-plane rotation plus uniform scaling about the clip's mean (x, y).

    Face/body z is scaled about its own mean; hand z stays 0.
    Zero-padded rows past valid_frames are left untouched.
    """
    rng = np.random.default_rng(rng)
    theta, s = draw_augmentation(rng)
    if angle_deg is not None:
        theta = angle_deg
    if scale is not None:
        s = scale

    out = np.array(seq, dtype=np.float64, copy=True)
    v = out.shape[0] if valid_frames is None else int(valid_frames)
    joints = out[:v].reshape(v, layout.total_landmarks, layout.coords_per_landmark)

    xy = joints[..., :2]
    center = xy.reshape(-1, 2).mean(axis=0)
    rad = math.radians(theta)
    rotation = np.array([[math.cos(rad), -math.sin(rad)],
                         [math.sin(rad), math.cos(rad)]])
    joints[..., :2] = center + s * (xy - center) @ rotation.T

    depth = joints[:, :layout.depth_landmarks, 2]
    z_center = depth.mean()
    joints[:, :layout.depth_landmarks, 2] = z_center + s * (depth - z_center)

    out[:v] = joints.reshape(v, -1)
    return out


# --------------------------
# DATASET TRANSFORMS
# --------------------------
def split_validation(dataset: Dataset, fraction: float = 0.1, seed: int = 0) -> Dataset:
    """Move a seeded, per-class share of the train split into val."""
    if not 0.0 <= fraction < 1.0:
        raise ConfigError(f"Validation fraction must be in [0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    train = dataset.split_samples("train")
    moved: set[str] = set()
    for class_index in range(dataset.num_classes):
        ids = [s.id for s in train if s.class_index == class_index]
        count = int(round(fraction * len(ids)))
        if count:
            moved.update(ids[i] for i in rng.permutation(len(ids))[:count])
    splits = {
        "train": [i for i in dataset.splits["train"] if i not in moved],
        "val": list(dataset.splits.get("val", [])) + [i for i in dataset.splits["train"] if i in moved],
        "test": list(dataset.splits.get("test", [])),
    }
    return replace(dataset, splits=splits)


def filter_dataset(dataset: Dataset, min_per_class: int = 1, max_frames: int | None = None) -> Dataset:
    """Drop over-long clips and classes with too few train samples; classes are re-indexed."""
    kept = [s for s in dataset.samples if max_frames is None or s.frames <= max_frames]
    kept_ids = {s.id for s in kept}
    train_counts = np.zeros(dataset.num_classes, dtype=np.int64)
    for sample_id in dataset.splits.get("train", []):
        if sample_id in kept_ids:
            train_counts[dataset.sample(sample_id).class_index] += 1
    surviving = [c for c in range(dataset.num_classes) if train_counts[c] >= min_per_class]
    if not surviving:
        raise ConfigError(f"No class has at least {min_per_class} training samples")
    remap = {old: new for new, old in enumerate(surviving)}
    samples = [replace(s, class_index=remap[s.class_index]) for s in kept if s.class_index in remap]
    ids = {s.id for s in samples}
    splits = {split: [i for i in dataset.splits.get(split, []) if i in ids] for split in SPLITS}
    return Dataset(name=dataset.name, classes=[dataset.classes[c] for c in surviving],
                   samples=samples, splits=splits, synthetic=dataset.synthetic)


def make_toy_dataset(num_classes: int = 4, per_class: int = 10, min_frames: int = 24, max_frames: int = 48,
                     noise: float = 0.01, test_fraction: float = 0.0, val_fraction: float = 0.0,
                     missing_rate: float = 0.0, seed: int = 0, name: str = "toy",
                     layout: LandmarkLayout = LAYOUT) -> Dataset:
    """
    Controlled synthetic-motion world: each class is a distinct set of
    sinusoidal trajectories over a few shared spatial patterns, plus noise.
    """
    if num_classes < 1 or per_class < 1 or not 1 <= min_frames <= max_frames:
        raise ConfigError("make_toy_dataset needs positive class/sample counts and 1 <= min_frames <= max_frames")
    rng = np.random.default_rng(seed)
    features = layout.features_per_frame
    hand_z = layout.hand_z_columns
    num_patterns = 6

    patterns = rng.normal(0.0, 0.05, size=(num_patterns, features))
    patterns[:, hand_z] = 0.0
    base = rng.uniform(0.3, 0.7, size=features)
    base[hand_z] = 0.0
    freqs = rng.uniform(0.5, 2.0, size=(num_classes, num_patterns))
    phases = rng.uniform(0.0, 2 * np.pi, size=(num_classes, num_patterns))
    amps = rng.uniform(0.5, 1.5, size=(num_classes, num_patterns))

    samples: list[Sample] = []
    splits: dict[str, list[str]] = {s: [] for s in SPLITS}
    for c in range(num_classes):
        ids = []
        for i in range(per_class):
            frames = int(rng.integers(min_frames, max_frames + 1))
            t = np.linspace(0.0, 1.0, frames)[:, None]
            coeff = amps[c] * np.sin(2 * np.pi * freqs[c] * t + phases[c])
            seq = base + coeff @ patterns + noise * rng.normal(size=(frames, features))
            seq[:, hand_z] = 0.0
            if missing_rate > 0:
                seq[rng.random(seq.shape) < missing_rate] = np.nan
            sample_id = f"{name}-{c:03d}-{i:04d}"
            samples.append(Sample(id=sample_id, class_index=c, sequence=seq))
            ids.append(sample_id)
        order = rng.permutation(per_class)
        n_test = int(round(test_fraction * per_class))
        n_val = int(round(val_fraction * per_class))
        splits["test"] += [ids[j] for j in order[:n_test]]
        splits["val"] += [ids[j] for j in order[n_test:n_test + n_val]]
        splits["train"] += [ids[j] for j in order[n_test + n_val:]]
    return Dataset(name=name, classes=[f"sign_{c}" for c in range(num_classes)],
                   samples=samples, splits=splits)
