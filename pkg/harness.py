"""
Experiment orchestration: config, two-phase (synthetic pretrain -> real
fine-tune) classifier training, evaluation, checkpoints and the numeric
self-test suite.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

import settings
from cmlpe import (
    CmlpeConfig,
    CmlpeModel,
    GenerationPair,
    as_joints,
    cmlpe_forward,
    motion_loss,
    mpjpe,
    mpjpe_per_frame,
)
from numcore import (
    ConfigError,
    Ema,
    HandcraftError,
    OneCycleSchedule,
    Optimizer,
    ShapeError,
    Tensor,
    clip_grad_norm,
    dct,
    gelu,
    grad_check,
    idct,
    layer_norm,
    matmul,
    norm,
    onecycle_lr,
    parameter,
    selective_scan,
    silu,
    softmax,
    softplus,
)
from posedata import Dataset, Sample, augment, batch_windows, oversample_balance
from recognizers import MAMBA_PRESETS, MODEL_KINDS, TRANSFORMER_PRESETS, Classifier, classify_loss, make_config


# --------------------------
# CONFIG
# --------------------------
@dataclass
class ExperimentConfig:
    dataset: str = ""
    model_kind: str = "transformer-sl"
    model: dict = field(default_factory=dict)
    batch_size: int = 16
    peak_lr: float = 1e-2
    weight_decay: float = 1e-4
    total_steps: int = 400
    warmup_ratio: float = 0.3
    synthetic_pretrain_steps: int = 0
    augment: bool = True
    oversample: bool = True
    seed: int = 0
    ema_decay: float | None = None
    max_grad_norm: float | None = None
    val_every: int | None = None
    eval_batch_size: int = 256
    n_per_class: int | None = None
    generator: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"Unknown model_kind '{self.model_kind}', expected one of {MODEL_KINDS}")
        if self.total_steps < 2:
            raise ConfigError(f"total_steps must be >= 2, got {self.total_steps}")
        if not 0 <= self.synthetic_pretrain_steps <= self.total_steps:
            raise ConfigError(f"synthetic_pretrain_steps {self.synthetic_pretrain_steps} "
                              f"outside [0, total_steps={self.total_steps}]")
        if not 0.0 < self.warmup_ratio < 1.0:
            raise ConfigError(f"warmup_ratio must be in (0, 1), got {self.warmup_ratio}")
        if math.ceil(self.warmup_ratio * self.total_steps) >= self.total_steps:
            raise ConfigError(f"warmup_ratio {self.warmup_ratio} leaves no annealing step out of {self.total_steps}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be positive")
        if self.val_every is not None and self.val_every < 1:
            raise ConfigError(f"val_every must be positive, got {self.val_every}")

    @property
    def val_interval(self) -> int:
        return self.val_every or max(1, self.total_steps // 10)

    def model_config(self, num_classes: int):
        return make_config(self.model_kind, num_classes, **self.model)

    def generator_config(self, num_classes: int) -> CmlpeConfig:
        known = {f.name for f in fields(CmlpeConfig)} - {"num_classes"}
        unknown = set(self.generator) - known
        if unknown:
            raise ConfigError(f"Unknown generator config keys: {sorted(unknown)}")
        return CmlpeConfig(num_classes=num_classes, **self.generator)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown experiment config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read experiment config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Experiment config {path} must be a JSON object")
        return cls.from_dict(data)


_PROTOCOLS = {
    ("transformer-sl", "lsfb"): dict(batch_size=2048, weight_decay=1e-4, peak_lr=1e-3, total_steps=50,
                                     warmup_ratio=0.3, synthetic_pretrain_steps=5),
    ("transformer-sl", "include"): dict(batch_size=16, weight_decay=1e-4, peak_lr=1e-2, total_steps=400,
                                        warmup_ratio=0.3, synthetic_pretrain_steps=75),
    ("transformer-sl", "display"): dict(batch_size=16, weight_decay=1e-4, peak_lr=1e-2, total_steps=400,
                                        warmup_ratio=0.1, synthetic_pretrain_steps=50),
    ("mamba-sl", "lsfb"): dict(batch_size=2048, weight_decay=1e-3, peak_lr=1e-4, total_steps=50,
                               warmup_ratio=0.1, synthetic_pretrain_steps=5),
    ("mamba-sl", "include"): dict(batch_size=16, weight_decay=1e-4, peak_lr=1e-2, total_steps=400,
                                  warmup_ratio=0.3, synthetic_pretrain_steps=75),
    ("mamba-sl", "display"): dict(batch_size=16, weight_decay=1e-4, peak_lr=1e-2, total_steps=400,
                                  warmup_ratio=0.1, synthetic_pretrain_steps=50),
}
_TOY_MODELS = {
    "transformer-sl": {"layers": 1, "heads": 2, "hidden_dim": 16, "mlp_dim": 32, "output_size": 32, "dropout": 0.1},
    "mamba-sl": {"layers": 1, "hidden_dim": 16, "state_dim": 4, "output_size": 32, "dropout": 0.1},
}
PRESET_NAMES = ("lsfb", "include", "display", "toy")


def preset(name: str, model_kind: str = "transformer-sl", **overrides) -> ExperimentConfig:
    """Per-dataset training protocol; 'toy' is a desk-scale run for the synthetic toy world."""
    if model_kind not in MODEL_KINDS:
        raise ConfigError(f"Unknown model_kind '{model_kind}', expected one of {MODEL_KINDS}")
    if name == "toy":
        base = dict(model=dict(_TOY_MODELS[model_kind]), batch_size=16, peak_lr=5e-3, weight_decay=1e-4,
                    total_steps=200, warmup_ratio=0.3, synthetic_pretrain_steps=20,
                    generator={"batch_size": 8, "lr": 3e-3, "weight_decay": 0.0, "train_steps": 200})
    elif name in PRESET_NAMES:
        models = TRANSFORMER_PRESETS if model_kind == "transformer-sl" else MAMBA_PRESETS
        base = dict(model=dict(models[name]), **_PROTOCOLS[(model_kind, name)])
    else:
        raise ConfigError(f"Unknown preset '{name}', expected one of {PRESET_NAMES}")
    return ExperimentConfig(model_kind=model_kind, **{**base, **overrides})


# --------------------------
# METRICS / SAMPLING
# --------------------------
class MetricsLog:
    """Per-step training records, written as JSON lines."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with self.path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(record, ensure_ascii=False) + "\n")

    def losses(self) -> list[dict]:
        return [r for r in self.records if "loss" in r]

    def validations(self) -> list[dict]:
        return [r for r in self.records if "val_accuracy" in r]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in self.records)


class BatchSampler:
    """Endless mini-batches drawn from seeded per-epoch permutations."""

    def __init__(self, samples: Sequence[Sample], batch_size: int, rng: np.random.Generator):
        if not samples:
            raise ConfigError("Cannot sample batches from an empty sample list")
        self.samples = list(samples)
        self.batch_size = min(batch_size, len(self.samples))
        self.rng = rng
        self._order = rng.permutation(len(self.samples))
        self._cursor = 0

    def next_batch(self) -> list[Sample]:
        if self._cursor + self.batch_size > len(self.samples):
            self._order = self.rng.permutation(len(self.samples))
            self._cursor = 0
        picked = self._order[self._cursor:self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return [self.samples[i] for i in picked]


# --------------------------
# TRAINING
# --------------------------
def train_two_phase(cfg: ExperimentConfig, real: Dataset, synthetic: Dataset | None = None,
                    log_path: str | Path | None = None) -> tuple[Classifier, MetricsLog]:
    """
    Pretrain on the synthetic set for cfg.synthetic_pretrain_steps, then fine-tune
    on the (oversampled, optionally augmented) real train split for the rest.

    RAdam throughout, with one OneCycle schedule spanning every step.
    """
    real_train = real.split_samples("train")
    if not real_train:
        raise ConfigError(f"Dataset '{real.name}' has an empty train split")
    pretrain = cfg.synthetic_pretrain_steps
    synthetic_train = synthetic.split_samples("train") if synthetic is not None else []
    if pretrain > 0 and not synthetic_train:
        raise ConfigError("synthetic_pretrain_steps > 0 needs a non-empty synthetic dataset")
    if synthetic is not None and synthetic.num_classes != real.num_classes:
        raise ConfigError(f"Synthetic set has {synthetic.num_classes} classes, real set {real.num_classes}")

    init_ss, balance_ss, syn_ss, real_ss, aug_ss, drop_ss = np.random.SeedSequence(cfg.seed).spawn(6)
    model = Classifier.init(cfg.model_config(real.num_classes), np.random.default_rng(init_ss))
    params = model.parameters()
    optimizer = Optimizer(params, "radam", weight_decay=cfg.weight_decay)
    schedule = OneCycleSchedule(cfg.peak_lr, cfg.total_steps, cfg.warmup_ratio)
    ema = Ema(params, cfg.ema_decay) if cfg.ema_decay else None

    real_pool = oversample_balance(real_train, np.random.default_rng(balance_ss), real.num_classes) \
        if cfg.oversample else real_train
    real_rng = np.random.default_rng(real_ss)
    real_batches = BatchSampler(real_pool, cfg.batch_size, real_rng)
    syn_rng = np.random.default_rng(syn_ss)
    syn_batches = BatchSampler(synthetic_train, cfg.batch_size, syn_rng) if pretrain > 0 else None
    aug_rng = np.random.default_rng(aug_ss)
    drop_rng = np.random.default_rng(drop_ss)
    val_samples = real.split_samples("val")

    metrics = MetricsLog(log_path)
    settings.log(f"🚀 Training {cfg.model_kind} on '{real.name}': {pretrain} synthetic + "
                 f"{cfg.total_steps - pretrain} real steps, batch {real_batches.batch_size}")

    for step in settings.progress(range(cfg.total_steps), desc=cfg.model_kind):
        phase = "pretrain" if step < pretrain else "finetune"
        if phase == "pretrain":
            clips, valid, labels = batch_windows(syn_batches.next_batch(), mode="random", rng=syn_rng)
        else:
            clips, valid, labels = batch_windows(real_batches.next_batch(), mode="random", rng=real_rng)
            if cfg.augment:
                clips = np.stack([augment(c, v, aug_rng) for c, v in zip(clips, valid)])

        lr = onecycle_lr(schedule, step)
        optimizer.zero_grad()
        loss = classify_loss(model.logits(clips, valid, training=True, rng=drop_rng), labels)
        loss.backward()
        if cfg.max_grad_norm:
            clip_grad_norm(params.values(), cfg.max_grad_norm)
        optimizer.step(lr)
        if ema is not None:
            ema.update(params)
        metrics.append({"step": step + 1, "phase": phase, "lr": lr, "loss": loss.item()})

        if val_samples and ((step + 1) % cfg.val_interval == 0 or step + 1 == cfg.total_steps):
            accuracy = evaluate_accuracy(model, val_samples, batch_size=cfg.eval_batch_size)
            metrics.append({"step": step + 1, "val_accuracy": accuracy})

        if step + 1 == pretrain:
            settings.log(f"🔁 Synthetic pretraining done after step {pretrain}, switching to real data")

    if ema is not None:
        ema.copy_to(params)
    last = metrics.losses()[-1]
    settings.log(f"✅ Training finished: final loss {last['loss']:.4f}")
    return model, metrics


def train_baseline(cfg: ExperimentConfig, real: Dataset,
                   log_path: str | Path | None = None) -> tuple[Classifier, MetricsLog]:
    """Real-data-only run: the two-phase protocol with no pretraining steps."""
    return train_two_phase(replace(cfg, synthetic_pretrain_steps=0), real, None, log_path)


# --------------------------
# EVALUATION
# --------------------------
def evaluate_accuracy(model: Classifier, samples: Sequence[Sample], batch_size: int = 256,
                      workers: int | None = None) -> float:
    """Top-1 accuracy on centered windows with dropout off."""
    samples = list(samples)
    if not samples:
        raise ConfigError("Cannot evaluate accuracy on an empty split")
    chunks = [samples[i:i + batch_size] for i in range(0, len(samples), batch_size)]

    def run(chunk: list[Sample]) -> np.ndarray:
        clips, valid, labels = batch_windows(chunk, mode="center")
        return model.predict(clips, valid) == labels

    with ThreadPoolExecutor(max_workers=workers or settings.THREADS) as pool:
        correct = np.concatenate(list(pool.map(run, chunks)))
    return float(correct.sum()) / len(samples)


@dataclass
class GeneratorReport:
    forward_mpjpe: float
    reversed_mpjpe: float
    forward_per_frame: list[float]
    reversed_per_frame: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_generator(pair: GenerationPair, samples: Sequence[Sample]) -> GeneratorReport:
    """MPJPE of each direction on centered windows, noise off."""
    samples = list(samples)
    if not samples:
        raise ConfigError("Cannot evaluate the generator on an empty split")
    cfg = pair.config
    M = cfg.input_frames
    clips, _, labels = batch_windows(samples, mode="center", window=cfg.window)
    first, second = clips[:, :M], clips[:, M:]
    silent = np.zeros((len(samples), cfg.embed_dim))

    pred_second = cmlpe_forward(pair.forward_model, first, labels, noise=silent).data
    pred_first_rev = cmlpe_forward(pair.reversed_model, second[:, ::-1], labels, noise=silent).data
    fwd = (as_joints(pred_second), as_joints(second))
    rev = (as_joints(pred_first_rev), as_joints(first[:, ::-1]))
    return GeneratorReport(
        forward_mpjpe=mpjpe(*fwd),
        reversed_mpjpe=mpjpe(*rev),
        forward_per_frame=mpjpe_per_frame(*fwd).tolist(),
        reversed_per_frame=mpjpe_per_frame(*rev).tolist(),
    )


def compare_protocols(cfg: ExperimentConfig, real: Dataset, synthetic: Dataset,
                      seeds: Sequence[int], augment_grid: bool = False) -> dict:
    """
    Baseline vs two-phase test accuracy over several seeds.

    With augment_grid, every protocol also runs with augmentation on and off.
    """
    test = real.split_samples("test")
    if not test:
        raise ConfigError(f"Dataset '{real.name}' has no test split to compare on")
    if cfg.synthetic_pretrain_steps < 1:
        raise ConfigError("compare_protocols needs synthetic_pretrain_steps >= 1")
    augment_options = (False, True) if augment_grid else (cfg.augment,)

    runs = []
    for seed in seeds:
        for use_synthetic in (False, True):
            for use_augment in augment_options:
                run_cfg = replace(cfg, seed=int(seed), augment=use_augment)
                if use_synthetic:
                    model, _ = train_two_phase(run_cfg, real, synthetic)
                else:
                    model, _ = train_baseline(run_cfg, real)
                accuracy = evaluate_accuracy(model, test, batch_size=cfg.eval_batch_size)
                runs.append({"seed": int(seed), "synthetic": use_synthetic,
                             "augment": use_augment, "test_accuracy": accuracy})
                settings.log(f"ℹ️  seed {seed} synthetic={use_synthetic} augment={use_augment}: {accuracy:.3f}")

    medians = {}
    for use_synthetic in (False, True):
        for use_augment in augment_options:
            key = f"{'two_phase' if use_synthetic else 'baseline'}{'+augment' if use_augment else ''}"
            values = [r["test_accuracy"] for r in runs
                      if r["synthetic"] == use_synthetic and r["augment"] == use_augment]
            medians[key] = float(np.median(values))
    return {"runs": runs, "median": medians}


# --------------------------
# CHECKPOINTS
# --------------------------
CHECKPOINT_MAGIC = b"HCKP"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(HandcraftError):
    pass


class BadMagicError(CheckpointError, ValueError):
    pass


class VersionMismatchError(CheckpointError, ValueError):
    pass


class CheckpointShapeError(CheckpointError, ShapeError):
    pass


class TruncatedCheckpointError(CheckpointError, EOFError):
    pass


def _metadata(model: Classifier | GenerationPair) -> dict:
    if isinstance(model, Classifier):
        return {"model": "classifier", "config": model.config_dict()}
    return {"model": "cmlpe-pair", "config": model.config.to_dict()}


def _build(meta: dict) -> Classifier | GenerationPair:
    try:
        config = dict(meta["config"])
        if meta["model"] == "classifier":
            kind = config.pop("kind")
            return Classifier.init(make_config(kind, **config))
        if meta["model"] == "cmlpe-pair":
            return GenerationPair.init(CmlpeConfig(**config))
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"Checkpoint metadata does not describe a model: {e}") from e
    raise CheckpointError(f"Unknown checkpoint model type '{meta.get('model')}'")


def round_to_storage(model: Classifier | GenerationPair) -> None:
    """Round every parameter to float32 in place, the precision checkpoints store."""
    for tensor in model.parameters().values():
        tensor.data = tensor.data.astype("<f4").astype(np.float64)


def save_checkpoint(model: Classifier | GenerationPair, path: str | Path) -> Path:
    """
    Write the model as HCKP: header, JSON metadata, then one float32 record per tensor.

    The model itself is left untouched. Call round_to_storage() first when the
    in-memory model must compute exactly what a reload of the file does.
    """
    params = model.parameters()
    meta = json.dumps(_metadata(model), ensure_ascii=False, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(meta)), meta]
    for name, tensor in params.items():
        values = np.ascontiguousarray(tensor.data, dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<B{values.ndim}Q", values.ndim, *values.shape))
        chunks.append(values.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    return path


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self.raw, self.path, self.pos = raw, path, 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.raw):
            raise TruncatedCheckpointError(f"{self.path}: truncated at byte {self.pos} (needed {count} more)")
        out = self.raw[self.pos:self.pos + count]
        self.pos += count
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    reader = _Reader(raw, path)
    if len(raw) >= 4 and raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    _, version, meta_len = reader.unpack(_HEADER.format)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, this build reads {CHECKPOINT_VERSION}")
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable metadata: {e}") from e

    tensors: dict[str, np.ndarray] = {}
    while reader.pos < len(raw):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}Q")
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(reader.take(count * 4), dtype="<f4").reshape(dims)
        tensors[name] = data.astype(np.float64)
    return meta, tensors


def _restore(params: dict[str, Tensor], tensors: dict[str, np.ndarray], path) -> None:
    if list(tensors) != list(params):
        missing = sorted(set(params) - set(tensors))
        extra = sorted(set(tensors) - set(params))
        raise CheckpointShapeError(f"{path}: tensor names do not match the architecture "
                                   f"(missing {missing[:5]}, unexpected {extra[:5]})")
    for name, values in tensors.items():
        if values.shape != params[name].shape:
            raise CheckpointShapeError(f"{path}: '{name}' has shape {values.shape}, "
                                       f"architecture expects {params[name].shape}")
    for name, values in tensors.items():
        params[name].data = values


def load_checkpoint(path: str | Path) -> Classifier | GenerationPair:
    meta, tensors = _read_checkpoint(path)
    model = _build(meta)
    _restore(model.parameters(), tensors, path)
    return model


def load_into(model: Classifier | GenerationPair, path: str | Path) -> Classifier | GenerationPair:
    """Load weights into an existing model; the architecture must match exactly."""
    _, tensors = _read_checkpoint(path)
    _restore(model.parameters(), tensors, path)
    return model


# --------------------------
# GRADIENT CHECKS
# --------------------------
GRADCHECK_TOLERANCE = 1e-3


def _randomize(params: dict[str, Tensor], rng: np.random.Generator, scale: float = 0.3) -> None:
    for p in params.values():
        p.data = rng.normal(0.0, scale, size=p.shape)


def run_gradcheck_suite(seed: int = 0, samples_per_param: int = 6) -> list[dict]:
    """Reverse-mode vs finite-difference gradients for every op and the three toy models."""
    rng = np.random.default_rng(seed)

    def p(*shape):
        return parameter(rng.normal(0.0, 0.5, size=shape))

    a, b, w, g, bias = p(3, 4), p(4, 5), p(2, 3, 4), p(4), p(4)
    u, dt = p(2, 3, 2), parameter(rng.uniform(0.1, 0.5, size=(2, 3, 2)))
    a_ssm, b_ssm, c_ssm, d_ssm = parameter(-rng.uniform(0.5, 1.5, size=(2, 3))), p(2, 3, 3), p(2, 3, 3), p(2)
    mask = np.zeros((3, 4))
    mask[:, -1] = -np.inf
    targets = rng.normal(size=(2, 3, 4))

    checks = {
        "matmul": (lambda: (matmul(a, b) ** 2).sum(), [a, b]),
        "layer_norm": (lambda: (layer_norm(w, g, bias) * Tensor(targets)).sum(), [w, g, bias]),
        "softmax": (lambda: (softmax(a, mask=mask) * Tensor(targets[0])).sum(), [a]),
        "gelu": (lambda: gelu(w).sum(), [w]),
        "silu": (lambda: silu(w).sum(), [w]),
        "softplus": (lambda: (softplus(w) ** 2).sum(), [w]),
        "norm": (lambda: norm(w, axis=-1).sum(), [w]),
        "dct": (lambda: (idct(dct(w) * Tensor(targets)) ** 2).sum(), [w]),
        "selective_scan": (lambda: (selective_scan(u, dt, a_ssm, b_ssm, c_ssm, d_ssm) ** 2).sum(),
                           [u, dt, a_ssm, b_ssm, c_ssm, d_ssm]),
    }

    gen_cfg = CmlpeConfig(num_classes=3, num_blocks=2, embed_dim=4, input_frames=4, target_frames=4, noise_scale=0.0)
    gen = CmlpeModel.init(gen_cfg, rng)
    _randomize(gen.parameters(), rng)
    x_in, x_out = rng.normal(size=(2, 4, gen_cfg.features)), rng.normal(size=(2, 4, gen_cfg.features))
    checks["cmlpe"] = (lambda: motion_loss(cmlpe_forward(gen, x_in, [0, 2]), x_out), gen.parameters())

    # ragged batch: padding masks and the class-token gather both see gradients
    clip, valid = rng.normal(size=(2, 3, gen_cfg.features)), [2, 3]
    tf = Classifier.init(make_config("transformer-sl", 3, layers=1, heads=2, hidden_dim=8, mlp_dim=8,
                                     output_size=8, dropout=0.0, max_tokens=4), rng)
    mb = Classifier.init(make_config("mamba-sl", 3, layers=1, hidden_dim=8, state_dim=2, conv_width=2,
                                     output_size=8, dropout=0.0), rng)
    for name, model in (("transformer-sl", tf), ("mamba-sl", mb)):
        _randomize(model.parameters(), rng)
        if name == "mamba-sl":
            # keep the discretization step in the softplus-linear range
            for key, value in model.parameters().items():
                if key.endswith("a_log"):
                    value.data = np.abs(value.data)
        checks[name] = (lambda m=model: classify_loss(m.logits(clip, valid), [1, 2]), model.parameters())

    results = []
    for name, (fn, params) in checks.items():
        error = grad_check(fn, params, samples_per_param=samples_per_param, rng=rng)
        results.append({"check": name, "max_rel_error": error, "ok": error < GRADCHECK_TOLERANCE})
        settings.log(f"{'✅' if error < GRADCHECK_TOLERANCE else '❌'} {name}: {error:.2e}")
    return results
