"""
Conditional MLP motion generator (CMLPe).

A model predicts the next T frames of a pose clip from its first M frames,
conditioned on the sign label:

    DCT over time -> per-frame IN projection -> K conditional blocks
    (adaLN regressed from label embedding + noise, gated temporal FC,
    residual) -> per-frame OUT projection -> IDCT -> + last input frame

Two models trained on opposite temporal directions form a GenerationPair
that synthesizes whole 2M-frame clips for class-balanced synthetic datasets.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

import settings
from numcore import (
    ConfigError,
    LabelIndexError,
    Optimizer,
    ShapeError,
    Tensor,
    as_tensor,
    check_finite,
    dct,
    idct,
    layer_norm,
    linear,
    norm,
    ones,
    parameter,
    xavier_uniform,
    zeros,
)
from posedata import FEATURES, Dataset, Sample, batch_windows, oversample_balance, window_frames


@dataclass
class CmlpeConfig:
    num_classes: int
    num_blocks: int = 6
    embed_dim: int = 32
    input_frames: int = 16
    target_frames: int = 16
    features: int = FEATURES
    noise_scale: float = 0.1
    lr: float = 1e-4
    weight_decay: float = 1e-4
    train_steps: int = 100
    batch_size: int = 256

    def __post_init__(self):
        sizes = (self.num_classes, self.num_blocks, self.embed_dim, self.input_frames,
                 self.target_frames, self.features, self.train_steps, self.batch_size)
        if any(int(v) < 1 for v in sizes):
            raise ConfigError(f"Generator dimensions must all be positive: {self}")
        if self.input_frames != self.target_frames:
            raise ConfigError("Dual generation needs input_frames == target_frames")
        if self.noise_scale < 0 or self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("noise_scale, lr and weight_decay must be non-negative")

    @property
    def window(self) -> int:
        return self.input_frames + self.target_frames

    def to_dict(self) -> dict:
        return asdict(self)


class CmlpeModel:
    def __init__(self, config: CmlpeConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: CmlpeConfig, seed: int | np.random.Generator = 0) -> "CmlpeModel":
        rng = np.random.default_rng(seed)
        L, D, M = config.features, config.embed_dim, config.input_frames
        params = {
            "in_proj.weight": xavier_uniform(rng, L, D),
            "in_proj.bias": zeros(D),
            "label_embedding": parameter(rng.normal(0.0, 1.0, size=(config.num_classes, D))),
        }
        for k in range(config.num_blocks):
            params[f"blocks.{k}.fc.weight"] = xavier_uniform(rng, M, M)
            params[f"blocks.{k}.fc.bias"] = zeros(M)
            params[f"blocks.{k}.norm.gain"] = ones(M)
            params[f"blocks.{k}.norm.bias"] = zeros(M)
            # zero-init modulation: every block starts as identity
            params[f"blocks.{k}.mod.weight"] = zeros(D, 3 * M)
            params[f"blocks.{k}.mod.bias"] = zeros(3 * M)
        params["out_proj.weight"] = xavier_uniform(rng, D, L, gain=1e-8)
        params["out_proj.bias"] = zeros(L)
        return cls(config, params)

    def parameters(self) -> dict[str, Tensor]:
        return self.params


@dataclass
class GenerationPair:
    forward_model: CmlpeModel
    reversed_model: CmlpeModel

    def __post_init__(self):
        if self.forward_model.config != self.reversed_model.config:
            raise ConfigError("Both generators of a pair must share one CmlpeConfig")

    @property
    def config(self) -> CmlpeConfig:
        return self.forward_model.config

    @classmethod
    def init(cls, config: CmlpeConfig, seed: int = 0) -> "GenerationPair":
        fwd_seed, rev_seed = np.random.SeedSequence(seed).spawn(2)
        return cls(CmlpeModel.init(config, np.random.default_rng(fwd_seed)),
                   CmlpeModel.init(config, np.random.default_rng(rev_seed)))

    def parameters(self) -> dict[str, Tensor]:
        params = {f"forward.{k}": v for k, v in self.forward_model.parameters().items()}
        params.update({f"reversed.{k}": v for k, v in self.reversed_model.parameters().items()})
        return params


# --------------------------
# FORWARD / LOSS
# --------------------------
def _check_labels(label, batch: int, num_classes: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if labels.shape == (1,) and batch > 1:
        labels = np.repeat(labels, batch)
    if labels.shape != (batch,):
        raise ShapeError(f"Expected {batch} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise LabelIndexError(f"Labels {labels.tolist()} outside [0, {num_classes})")
    return labels


def cmlpe_forward(model: CmlpeModel, x_value, label, noise: np.ndarray | None = None,
                  rng: np.random.Generator | int | None = None) -> Tensor:
    """Predict target frames from (M, L) or (B, M, L) input frames."""
    cfg = model.config
    P = model.params
    x = as_tensor(x_value)
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    if x.shape[1:] != (cfg.input_frames, cfg.features):
        raise ShapeError(f"Generator input must be (batch, {cfg.input_frames}, {cfg.features}), got {x.shape}")
    batch, M = x.shape[0], cfg.input_frames
    labels = _check_labels(label, batch, cfg.num_classes)

    if noise is None:
        if cfg.noise_scale > 0:
            noise = np.random.default_rng(rng).normal(0.0, cfg.noise_scale, size=(batch, cfg.embed_dim))
        else:
            noise = np.zeros((batch, cfg.embed_dim))
    noise = np.broadcast_to(np.asarray(noise, dtype=np.float64), (batch, cfg.embed_dim))

    z = linear(dct(x), P["in_proj.weight"], P["in_proj.bias"])   # (B, M, D)
    z = z.transpose(0, 2, 1)                                     # (B, D, M)
    cond = P["label_embedding"][labels] + noise                  # (B, D)
    for k in range(cfg.num_blocks):
        prefix = f"blocks.{k}."
        mod = linear(cond, P[prefix + "mod.weight"], P[prefix + "mod.bias"])
        gamma = mod[:, :M].reshape(batch, 1, M)
        beta = mod[:, M:2 * M].reshape(batch, 1, M)
        alpha = mod[:, 2 * M:].reshape(batch, 1, M)
        h = layer_norm(z, P[prefix + "norm.gain"], P[prefix + "norm.bias"], axis=-1)
        h = h * (1.0 + beta) + gamma
        z = z + alpha * linear(h, P[prefix + "fc.weight"], P[prefix + "fc.bias"])
    z = z.transpose(0, 2, 1)                                     # (B, M, D)
    motion = idct(linear(z, P["out_proj.weight"], P["out_proj.bias"]))
    pred = motion + x[:, M - 1:M, :]
    return pred.reshape(cfg.target_frames, cfg.features) if single else pred


def motion_loss(x_pred, x_target) -> Tensor:
    """Mean per-frame L2 position error plus mean per-gap L2 velocity error."""
    pred, target = as_tensor(x_pred), as_tensor(x_target)
    if pred.shape != target.shape:
        raise ShapeError(f"motion_loss shapes differ: {pred.shape} vs {target.shape}")
    if pred.ndim not in (2, 3):
        raise ShapeError(f"motion_loss expects (T, L) or (B, T, L), got {pred.shape}")
    diff = pred - target
    position = norm(diff, axis=-1).mean()
    if pred.shape[-2] < 2:
        settings.log("⚠️  motion_loss: fewer than 2 frames, velocity term omitted")
        return position
    velocity = diff[..., 1:, :] - diff[..., :-1, :]
    return position + norm(velocity, axis=-1).mean()


# --------------------------
# TRAINING / GENERATION
# --------------------------
def train_generator(pair: GenerationPair, train_samples: Sequence[Sample], config: CmlpeConfig | None = None,
                    seed: int = 0, steps: int | None = None) -> tuple[GenerationPair, list[dict]]:
    """
    Train both directions in lockstep with Adam at a constant learning rate.

    Returns the pair and a per-step trace of {step, forward_loss, reversed_loss}.
    """
    config = config or pair.config
    steps = config.train_steps if steps is None else steps
    samples = list(train_samples)
    if len(samples) < config.batch_size:
        raise ConfigError(f"{len(samples)} training samples cannot fill a batch of {config.batch_size}")

    M = config.input_frames
    rng = np.random.default_rng(seed)
    samples = oversample_balance(samples, rng)
    optimizers = {
        "forward": Optimizer(pair.forward_model.parameters(), "adam", weight_decay=config.weight_decay),
        "reversed": Optimizer(pair.reversed_model.parameters(), "adam", weight_decay=config.weight_decay),
    }
    settings.log(f"🚀 Training generator pair: {steps} steps, batch {config.batch_size}, {len(samples)} clips")

    order, cursor = rng.permutation(len(samples)), 0
    trace = []
    for step in settings.progress(range(steps), desc="generator"):
        if cursor + config.batch_size > len(samples):
            order, cursor = rng.permutation(len(samples)), 0
        batch = [samples[i] for i in order[cursor:cursor + config.batch_size]]
        cursor += config.batch_size
        clips, _, labels = batch_windows(batch, mode="random", rng=rng, window=config.window)
        first, second = clips[:, :M], clips[:, M:]

        record = {"step": step + 1}
        tasks = (
            ("forward", pair.forward_model, first, second),
            ("reversed", pair.reversed_model, second[:, ::-1], first[:, ::-1]),
        )
        for direction, model, x_in, x_target in tasks:
            opt = optimizers[direction]
            opt.zero_grad()
            loss = motion_loss(cmlpe_forward(model, x_in, labels, rng=rng), x_target)
            loss.backward()
            opt.step(config.lr)
            record[f"{direction}_loss"] = loss.item()
        trace.append(record)

    if trace:
        last = trace[-1]
        settings.log(f"✅ Generator trained: forward {last['forward_loss']:.4f}, reversed {last['reversed_loss']:.4f}")
    return pair, trace


def generate_sequence(pair: GenerationPair, seed_clip: np.ndarray, label: int,
                      seed: int | np.random.Generator | None = None) -> np.ndarray:
    """Join reversed-model first half and forward-model second half into one clip."""
    cfg = pair.config
    M = cfg.input_frames
    clip = np.asarray(seed_clip, dtype=np.float64)
    if clip.shape != (cfg.window, cfg.features):
        raise ShapeError(f"Seed clip must be ({cfg.window}, {cfg.features}), got {clip.shape}")
    rng = np.random.default_rng(seed)
    if cfg.noise_scale > 0:
        eps = rng.normal(0.0, cfg.noise_scale, size=(2, cfg.embed_dim))
    else:
        eps = np.zeros((2, cfg.embed_dim))

    second = cmlpe_forward(pair.forward_model, clip[:M], label, noise=eps[0]).data
    first = cmlpe_forward(pair.reversed_model, clip[M:][::-1], label, noise=eps[1]).data[::-1]
    out = np.concatenate([first, second], axis=0)
    check_finite(out, "generated sequence")
    return out


def sample_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def build_synthetic_dataset(pair: GenerationPair, real_train: Dataset, n_per_class: int | None = None,
                            seed: int = 0, workers: int | None = None) -> Dataset:
    """Generate n_per_class clips per class from cyclically chosen real seed clips of that class."""
    cfg = pair.config
    seeds_by_class: dict[int, list[Sample]] = {c: [] for c in range(real_train.num_classes)}
    for sample in real_train.split_samples("train"):
        seeds_by_class[sample.class_index].append(sample)
    empty = [c for c, members in seeds_by_class.items() if not members]
    if empty:
        raise ConfigError(f"Classes without real seed clips: {empty}")
    if n_per_class is None:
        n_per_class = max(len(members) for members in seeds_by_class.values())
    if n_per_class < 0:
        raise ConfigError(f"n_per_class must be >= 0, got {n_per_class}")

    rng = np.random.default_rng(seed)
    jobs = []
    for class_index in range(real_train.num_classes):
        members = seeds_by_class[class_index]
        order = rng.permutation(len(members))
        jobs += [(class_index, i, members[order[i % len(members)]]) for i in range(n_per_class)]

    def make(job_index: int) -> Sample:
        class_index, i, source = jobs[job_index]
        clip, _ = window_frames(source.sequence, window=cfg.window, mode="center")
        sequence = generate_sequence(pair, clip, class_index, seed=sample_seed(seed, job_index))
        return Sample(id=f"syn-{class_index:04d}-{i:05d}", class_index=class_index, sequence=sequence)

    settings.log(f"🧪 Generating {len(jobs)} synthetic clips ({n_per_class} per class)")
    with ThreadPoolExecutor(max_workers=workers or settings.THREADS) as pool:
        samples = list(settings.progress(pool.map(make, range(len(jobs))), total=len(jobs), desc="synth"))

    return Dataset(name=f"{real_train.name}-synthetic", classes=list(real_train.classes), samples=samples,
                   splits={"train": [s.id for s in samples], "val": [], "test": []}, synthetic=True)


# --------------------------
# METRICS
# --------------------------
def as_joints(x: np.ndarray, coords: int = 3) -> np.ndarray:
    """(..., L) flat features -> (..., L / coords, coords)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % coords:
        raise ShapeError(f"Feature width {x.shape[-1]} is not a multiple of {coords}")
    return x.reshape(*x.shape[:-1], x.shape[-1] // coords, coords)


def mpjpe(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean Euclidean distance between corresponding 3D joints over frames and joints."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim < 2 or pred.shape[-1] != 3:
        raise ShapeError(f"mpjpe needs equal (..., joints, 3) shapes, got {pred.shape} and {target.shape}")
    return float(np.linalg.norm(pred - target, axis=-1).mean())


def mpjpe_per_frame(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """MPJPE per frame for (..., T, J, 3) inputs."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim < 3 or pred.shape[-1] != 3:
        raise ShapeError(f"mpjpe_per_frame needs equal (..., T, joints, 3) shapes, got {pred.shape}")
    dist = np.linalg.norm(pred - target, axis=-1)          # (..., T, J)
    return dist.reshape(-1, dist.shape[-2], dist.shape[-1]).mean(axis=(0, 2))
