"""End-to-end training of the image + weather fusion classifier."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from agrifuse.analysis.metrics import MetricsReport, metrics
from agrifuse.autodiff.tensor import Tensor, no_grad
from agrifuse.data.assemble import Sample, check_indices, select_channels, stack_samples
from agrifuse.data.indices import INDEX_ORDER
from agrifuse.errors import CheckpointError, ConfigError, InputError
from agrifuse.models.fusion import BRANCHES, FusionModel, ModelConfig, classify_batch
from agrifuse.models.params import load_checkpoint, save_checkpoint
from agrifuse.models.vit import ViTConfig
from agrifuse.models.weather import WEATHER_FEATURES, EncoderConfig
from agrifuse.training.losses import cross_entropy
from agrifuse.training.optim import AdamState, adam_step
from agrifuse.training.schedule import Schedule, cosine_warmup_lr

log = logging.getLogger(__name__)


@dataclass
class FusionTrainConfig:
    seed: int = 0
    epochs: int = 600
    warmup: int = 100
    lr: float = 1e-6
    batch: int = 8
    patience: int = 30
    min_delta: float = 1e-4
    val_fraction: float = 0.15
    train_years: Tuple[int, ...] = (2018, 2019)
    test_years: Tuple[int, ...] = (2020, 2021)
    # weather and fusion encoders
    layers: int = 12
    heads: int = 8
    d_model: int = 64
    d_ff: int = 128
    tokens: int = 8
    dropout: float = 0.1
    # image encoder
    vit_patch: int = 16
    vit_dim: int = 768
    vit_layers: int = 12
    vit_heads: int = 8
    vit_d_ff: int = 3072
    indices: Tuple[str, ...] = INDEX_ORDER
    weather_features: Tuple[str, ...] = WEATHER_FEATURES
    branch: str = "fusion"

    def __post_init__(self):
        self.train_years = tuple(int(y) for y in self.train_years)
        self.test_years = tuple(int(y) for y in self.test_years)
        self.indices = check_indices(tuple(self.indices))
        self.weather_features = tuple(self.weather_features)
        unknown = [f for f in self.weather_features if f not in WEATHER_FEATURES]
        if unknown or not self.weather_features or len(set(self.weather_features)) != len(self.weather_features):
            raise ConfigError(f"weather_features must be distinct names from {WEATHER_FEATURES}")
        overlap = set(self.train_years) & set(self.test_years)
        if overlap:
            raise ConfigError(f"train and test years overlap: {sorted(overlap)}")
        if not self.train_years:
            raise ConfigError("need at least one training year")
        if self.branch not in BRANCHES:
            raise ConfigError(f"unknown branch {self.branch!r}; expected one of {BRANCHES}")
        if self.epochs < 1 or self.batch < 1 or self.patience < 1:
            raise ConfigError("epochs, batch and patience must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        Schedule(self.warmup, self.epochs, self.lr)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "FusionTrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown fusion training keys: {sorted(unknown)}")
        return cls(**d)

    def model_config(self, image_size: int, n_features: int) -> ModelConfig:
        vit = ViTConfig(
            image_size=image_size,
            patch=self.vit_patch,
            channels=3 * len(self.indices),
            dim=self.vit_dim,
            layers=self.vit_layers,
            heads=self.vit_heads,
            d_ff=self.vit_d_ff,
        )
        encoder = dict(tokens=self.tokens, d_model=self.d_model, layers=self.layers, heads=self.heads,
                       d_ff=self.d_ff, dropout=self.dropout)
        rows = 28 if self.branch == "fusion" else 14
        return ModelConfig(
            vit=vit,
            weather=EncoderConfig(in_features=n_features, out_features=196, **encoder),
            fusion=EncoderConfig(in_features=rows * 14, out_features=2, **encoder),
            branch=self.branch,
        )


@dataclass
class FusionData:
    images: np.ndarray
    weather: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "FusionData":
        return FusionData(self.images[idx], self.weather[idx], self.labels[idx])


def to_data(samples: Sequence[Sample], indices: Sequence[str] = INDEX_ORDER,
            available: Sequence[str] = INDEX_ORDER, features: Sequence[str] = WEATHER_FEATURES) -> FusionData:
    """Stacked arrays keeping only the requested index blocks and weather columns."""
    images, weather, labels = stack_samples(samples)
    if tuple(indices) != tuple(available):
        images = select_channels(images, indices, available)
    if tuple(features) != WEATHER_FEATURES:
        weather = weather[:, [WEATHER_FEATURES.index(f) for f in features]]
    return FusionData(images, weather, labels)


def split_years(samples: Sequence[Sample], train_years: Sequence[int], test_years: Sequence[int]):
    overlap = set(train_years) & set(test_years)
    if overlap:
        raise ConfigError(f"train and test years overlap: {sorted(overlap)}")
    train = [s for s in samples if s.date.year in train_years]
    test = [s for s in samples if s.date.year in test_years]
    return train, test


def validation_split(samples: Sequence[Sample], fraction: float) -> Tuple[List[Sample], List[Sample]]:
    """The last ``fraction`` of each year's days (all plots) is held out for validation."""
    if fraction <= 0:
        return list(samples), []
    val_dates = set()
    for year in sorted({s.date.year for s in samples}):
        days = sorted({s.date for s in samples if s.date.year == year})
        k = max(1, math.ceil(fraction * len(days)))
        val_dates.update(days[-k:])
    fit = [s for s in samples if s.date not in val_dates]
    val = [s for s in samples if s.date in val_dates]
    return fit, val


def predict_logits(model: FusionModel, data: FusionData, batch: int = 32) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(data), batch):
            part = data.take(slice(i, i + batch))
            out.append(model(part.images, part.weather, training=False).data)
    return np.concatenate(out) if out else np.empty((0, 2))


def mean_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(cross_entropy(Tensor(logits), labels).item()) if len(labels) else float("nan")


def evaluate_model(model: FusionModel, data: FusionData, meta: Optional[dict] = None) -> MetricsReport:
    logits = predict_logits(model, data)
    pred, _ = classify_batch(logits)
    return metrics(pred, data.labels, loss=mean_cross_entropy(logits, data.labels), meta=meta)


def train_step(model: FusionModel, tensors, state: AdamState, batch: FusionData, lr: float,
               rng: np.random.Generator, training: bool = True) -> float:
    model.zero_grad()
    loss = cross_entropy(model(batch.images, batch.weather, training=training, rng=rng), batch.labels)
    loss.backward()
    adam_step(tensors, state, lr=lr)
    return loss.item()


def fit_fusion(
    model: FusionModel,
    train: FusionData,
    val: Optional[FusionData],
    config: FusionTrainConfig,
    rng: np.random.Generator,
    progress: Optional[Callable[[str], None]] = None,
) -> dict:
    """Adam + warmup/cosine schedule with early stopping on validation loss.

    Patience only counts once the warmup is over.  The best validation
    checkpoint is restored before returning.
    """
    tensors = list(model.parameters().values())
    state = AdamState(lr=config.lr)
    sched = Schedule(config.warmup, config.epochs, config.lr)
    steps = math.ceil(len(train) / config.batch)
    history = {"train_loss": [], "val_loss": [], "best_epoch": None, "stopped_epoch": None}
    best_loss, best_state, best_epoch = math.inf, None, -1
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        losses = []
        for b in range(steps):
            batch = train.take(order[b * config.batch : (b + 1) * config.batch])
            lr = cosine_warmup_lr(epoch + (b + 1) / steps, sched)
            losses.append(train_step(model, tensors, state, batch, lr, rng))
        history["train_loss"].append(float(np.mean(losses)))
        if val is None or not len(val):
            continue
        val_loss = mean_cross_entropy(predict_logits(model, val), val.labels)
        history["val_loss"].append(val_loss)
        if val_loss < best_loss - config.min_delta:
            best_loss, best_state, best_epoch = val_loss, model.state_dict(), epoch
        if progress and (epoch % 10 == 0 or epoch == config.epochs - 1):
            progress(f"epoch {epoch}: train {history['train_loss'][-1]:.4f} val {val_loss:.4f}")
        if epoch >= config.warmup and epoch - max(best_epoch, config.warmup) >= config.patience:
            history["stopped_epoch"] = epoch
            break
    if best_state is not None:
        model.load_state_dict(best_state)
        history["best_epoch"] = best_epoch
    return history


@dataclass
class FusionRun:
    model: FusionModel
    report: dict
    history: dict = field(default_factory=dict)


def train_fusion(
    samples: Sequence[Sample],
    config: FusionTrainConfig,
    available: Sequence[str] = INDEX_ORDER,
    progress: Optional[Callable[[str], None]] = None,
) -> FusionRun:
    """Train on ``config.train_years`` (minus a validation tail), test on ``config.test_years``.

    The image encoder's input statistics come from the training images only.
    """
    train, test = split_years(samples, config.train_years, config.test_years)
    if not train:
        raise InputError(f"no samples in training years {list(config.train_years)}")
    fit_samples, val_samples = validation_split(train, config.val_fraction)
    fit_data = to_data(fit_samples, config.indices, available, config.weather_features)
    val_data = to_data(val_samples, config.indices, available, config.weather_features) if val_samples else None
    rng = np.random.default_rng(config.seed)
    model = FusionModel(config.model_config(fit_data.images.shape[-1], fit_data.weather.shape[-1]), rng)
    if config.branch != "weather_only":
        model.vit.set_input_stats(fit_data.images)
    history = fit_fusion(model, fit_data, val_data, config, rng, progress)
    report = {
        "config": config.to_dict(),
        "parameters": model.num_parameters(),
        "train_samples": len(fit_data),
        "val_samples": 0 if val_data is None else len(val_data),
        "history": history,
    }
    if test:
        report["test"] = evaluate_model(model, to_data(test, config.indices, available, config.weather_features)).to_dict()
    return FusionRun(model, report, history)


def overfit_one_batch(
    samples: Sequence[Sample],
    config: FusionTrainConfig,
    steps: int = 2000,
    size: int = 8,
    lr: float = 1e-3,
    target: Optional[float] = None,
    available: Sequence[str] = INDEX_ORDER,
) -> List[float]:
    """Drive the loss on ``size`` fixed samples down with dropout off and a constant rate.

    Stops early once the loss falls below ``target`` (when given).
    """
    data = to_data(list(samples)[:size], config.indices, available, config.weather_features)
    rng = np.random.default_rng(config.seed)
    model = FusionModel(config.model_config(data.images.shape[-1], data.weather.shape[-1]), rng)
    if config.branch != "weather_only":
        model.vit.set_input_stats(data.images)
    tensors = list(model.parameters().values())
    state = AdamState(lr=lr)
    losses = []
    for _ in range(steps):
        losses.append(train_step(model, tensors, state, data, lr, rng, training=False))
        if target is not None and losses[-1] < target:
            break
    return losses


# -- checkpoints ----------------------------------------------------------------------


def save_fusion(directory, model: FusionModel, meta: dict) -> None:
    meta = dict(meta)
    meta["model"] = model.config.to_dict()
    save_checkpoint(directory, model.state_dict(), meta)


def load_fusion(directory) -> Tuple[FusionModel, dict]:
    tensors, meta = load_checkpoint(directory)
    if "model" not in meta:
        raise CheckpointError(f"{directory} does not hold a fusion model")
    model = FusionModel(ModelConfig.from_dict(meta["model"]), np.random.default_rng(0))
    model.load_state_dict(tensors)
    return model, meta
