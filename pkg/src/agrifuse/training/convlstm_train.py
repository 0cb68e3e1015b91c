"""Leave-one-year-out training of the next-day ConvLSTM over a noise grid.

For every held-out year and every noise level: the other years' acquisitions
are linearly interpolated to daily frames, noise is added to the interpolated
frames, and the model learns (three days -> next day).  It is then scored on
the held-out year's real acquisitions, each predicted from its three
preceding days of the noise-free interpolated held-out series.
"""

from __future__ import annotations

import datetime as dt
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from agrifuse.autodiff.tensor import Tensor, no_grad
from agrifuse.errors import CheckpointError, ConfigError, ContractError, InputError
from agrifuse.models.convlstm import ConvLSTMConfig, ConvLSTMParams, convlstm_forward
from agrifuse.models.params import load_checkpoint, save_checkpoint
from agrifuse.series import REAL, ImageSeries, fill_gaps, split_by_year, windows
from agrifuse.training.losses import rmse_loss
from agrifuse.training.optim import AdamState, adam_step
from agrifuse.training.parallel import run_tasks
from agrifuse.training.schedule import Schedule, cosine_warmup_lr

log = logging.getLogger(__name__)

SIGMA_GRID = tuple(round(0.04 + 0.02 * k, 2) for k in range(9))


@dataclass
class ConvLSTMTrainConfig:
    seed: int = 0
    sigma_grid: Tuple[float, ...] = SIGMA_GRID
    epochs: int = 20
    warmup: int = 2
    lr: float = 1e-3
    batch: int = 4
    hidden: int = 16
    blocks: int = 4
    kernel: int = 3
    final_fit: bool = True
    final_sigma: Optional[float] = None  # default: best mean RMSE over folds
    per_index: bool = True  # one model per vegetation index, else one shared model
    clean_copies: bool = True  # pair every noised window with its noise-free counterpart

    def __post_init__(self):
        self.sigma_grid = tuple(float(s) for s in self.sigma_grid)
        if not self.sigma_grid or min(self.sigma_grid) < 0:
            raise ConfigError("sigma grid must be non-empty and non-negative")
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch must be positive")
        if self.warmup > 0:
            Schedule(self.warmup, self.epochs, self.lr)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigma_grid"] = list(self.sigma_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConvLSTMTrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown ConvLSTM training keys: {sorted(unknown)}")
        return cls(**d)

    def model_config(self, channels: int, height: int, width: int) -> ConvLSTMConfig:
        return ConvLSTMConfig(channels, height, width, self.hidden, self.blocks, self.kernel)


def task_rng(seed: int, *keys: float) -> np.random.Generator:
    """Generator keyed by run coordinates, independent of execution order."""
    return np.random.default_rng([seed] + [int(round(k * 1000)) for k in keys])


def _geometry(series: Mapping[str, ImageSeries]) -> Tuple[int, int, int]:
    shapes = {f.image.shape for s in series.values() for f in s.frames}
    if len(shapes) != 1:
        raise InputError(f"all series must share one image shape, got {sorted(shapes)}")
    shape = shapes.pop()
    if len(shape) != 3:
        raise InputError(f"frames must be [C, H, W], got {shape}")
    return shape


def training_windows(
    series: Mapping[str, ImageSeries],
    years: Sequence[int],
    sigma: float,
    rng: np.random.Generator,
    clean_copies: bool = True,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Noised interpolated windows from ``years``: (X [n,3,C,H,W], Y [n,C,H,W], dates [n,4]).

    With ``clean_copies`` the noise-free version of every window is appended,
    so the model also sees inputs like those it is evaluated on.
    """
    xs, ys, dates = [], [], []
    for key in sorted(series):
        seasons = split_by_year(ImageSeries([f for f in series[key].frames if f.provenance == REAL]))
        for year in years:
            if year not in seasons or len(seasons[year]) < 2:
                continue
            daily = fill_gaps(seasons[year], sigma=sigma, rng=rng)
            x, y, targets = windows(daily)
            if not targets:
                continue
            stamps = [[t.date - dt.timedelta(days=k) for k in (3, 2, 1, 0)] for t in targets]
            xs.append(x)
            ys.append(y)
            dates.extend(stamps)
            if clean_copies and sigma > 0:
                x, y, _ = windows(fill_gaps(seasons[year]))
                xs.append(x)
                ys.append(y)
                dates.extend(stamps)
    if not xs:
        return np.empty((0,)), np.empty((0,)), np.empty((0, 4), dtype=object)
    return np.concatenate(xs), np.concatenate(ys), np.array(dates, dtype=object)


def audit_batch(dates: np.ndarray, held_out: Optional[int]) -> None:
    """Refuse any batch that touches the held-out year."""
    if held_out is None:
        return
    leaked = [d for d in dates.ravel() if d.year == held_out]
    if leaked:
        raise ContractError(f"training batch contains held-out frame(s) from {held_out}: {leaked[0]}")


def fit(
    x: np.ndarray,
    y: np.ndarray,
    dates: np.ndarray,
    config: ConvLSTMTrainConfig,
    rng: np.random.Generator,
    held_out: Optional[int] = None,
) -> Tuple[ConvLSTMParams, List[float]]:
    """Train one model; returns the parameters and the per-epoch mean loss."""
    _, _, c, h, w = x.shape
    params = ConvLSTMParams(config.model_config(c, h, w), rng)
    tensors = list(params.parameters().values())
    state = AdamState(lr=config.lr)
    sched = Schedule(config.warmup, config.epochs, config.lr) if config.warmup > 0 else None
    n = len(x)
    steps_per_epoch = math.ceil(n / config.batch)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * config.batch : (b + 1) * config.batch]
            audit_batch(dates[idx], held_out)
            params.zero_grad()
            loss = rmse_loss(convlstm_forward(Tensor(x[idx]), params, training=True), Tensor(y[idx]))
            loss.backward()
            lr = cosine_warmup_lr(epoch + b / steps_per_epoch, sched) if sched else config.lr
            adam_step(tensors, state, lr=lr)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    return params, history


def season_test_frames(series: ImageSeries) -> Tuple[np.ndarray, np.ndarray, List[dt.date]]:
    """Real acquisitions of one season with their three noise-free interpolated predecessors."""
    real = ImageSeries([f for f in series.frames if f.provenance == REAL])
    if len(real) < 2:
        return np.empty((0,)), np.empty((0,)), []
    daily = fill_gaps(real).frames
    xs, ys, out_dates = [], [], []
    for n in range(3, len(daily)):
        if daily[n].provenance == REAL:
            xs.append(np.stack([f.image for f in daily[n - 3 : n]]))
            ys.append(daily[n].image)
            out_dates.append(daily[n].date)
    if not xs:
        return np.empty((0,)), np.empty((0,)), []
    return np.stack(xs), np.stack(ys), out_dates


def predict_batches(params: ConvLSTMParams, x: np.ndarray, batch: int = 16) -> np.ndarray:
    with no_grad():
        return np.concatenate(
            [convlstm_forward(Tensor(x[i : i + batch]), params, training=False).data for i in range(0, len(x), batch)]
        )


def _rmse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def held_out_data(series: Mapping[str, ImageSeries], year: int):
    xs, ys = [], []
    for key in sorted(series):
        seasons = split_by_year(series[key])
        if year in seasons:
            x, y, _ = season_test_frames(seasons[year])
            if len(x):
                xs.append(x)
                ys.append(y)
    if not xs:
        return None, None
    return np.concatenate(xs), np.concatenate(ys)


def _fold_task(args) -> dict:
    series, years, year, sigma, config = args
    rng = task_rng(config.seed, year, sigma)
    train_years = [y for y in years if y != year]
    x, y, dates = training_windows(series, train_years, sigma, rng, config.clean_copies)
    if not len(x):
        raise InputError(f"fold {year}: no training windows in years {train_years}")
    params, history = fit(x, y, dates, config, rng, held_out=year)
    tx, ty = held_out_data(series, year)
    pred = predict_batches(params, tx)
    return {
        "test_year": year,
        "sigma": sigma,
        "rmse": _rmse(pred, ty),
        "persistence_rmse": _rmse(tx[:, -1], ty),
        "test_frames": int(len(ty)),
        "train_windows": int(len(x)),
        "train_loss": history,
    }


def train_convlstm(
    series: Mapping[str, ImageSeries],
    config: ConvLSTMTrainConfig,
    workers: int = 1,
    progress: Optional[Callable[[str], None]] = None,
) -> Tuple[dict, Optional[ConvLSTMParams]]:
    """Cross-validate over years x sigma; optionally refit on all years.

    ``series`` maps any key (e.g. plot/index) to a multi-year series of real
    acquisitions.  Returns the JSON-ready report and the refit model (or
    ``None`` when ``config.final_fit`` is off).
    """
    _geometry(series)
    years = sorted({f.date.year for s in series.values() for f in s.frames})
    if len(years) < 2:
        raise InputError(f"leave-one-year-out needs at least 2 years, got {years}")
    folds = []
    for year in years:
        tx, _ = held_out_data(series, year)
        if tx is None:
            log.warning("fold %d has no real test frames with three predecessors; skipped", year)
            continue
        folds.append(year)
    tasks = [(series, years, year, sigma, config) for year in folds for sigma in config.sigma_grid]
    results = run_tasks(_fold_task, tasks, workers, progress=progress, label="convlstm fold")

    table = {}
    for r in results:
        table.setdefault(r["test_year"], {})[r["sigma"]] = r
    per_sigma = {
        s: float(np.mean([table[y][s]["rmse"] for y in folds])) for s in config.sigma_grid
    }
    report = {
        "config": config.to_dict(),
        "years": years,
        "folds": [
            {
                "test_year": y,
                "mean_rmse": float(np.mean([table[y][s]["rmse"] for s in config.sigma_grid])),
                "persistence_rmse": table[y][config.sigma_grid[0]]["persistence_rmse"],
                "results": [table[y][s] for s in config.sigma_grid],
            }
            for y in folds
        ],
        "skipped_years": [y for y in years if y not in folds],
        "rmse_by_sigma": [{"sigma": s, "mean_rmse": per_sigma[s]} for s in config.sigma_grid],
    }
    final = None
    if config.final_fit:
        sigma = config.final_sigma if config.final_sigma is not None else min(per_sigma, key=per_sigma.get)
        if progress:
            progress(f"final fit on {years} with sigma={sigma}")
        rng = task_rng(config.seed, 0, sigma)
        x, y, dates = training_windows(series, years, sigma, rng, config.clean_copies)
        final, history = fit(x, y, dates, config, rng)
        report["final"] = {"sigma": sigma, "train_loss": history}
    return report, final


def save_convlstm(directory, params: ConvLSTMParams, meta: Optional[dict] = None) -> None:
    save_checkpoint(directory, params.state_dict(), {**(meta or {}), "convlstm": params.config.to_dict()})


def load_convlstm(directory) -> Tuple[ConvLSTMParams, dict]:
    tensors, meta = load_checkpoint(directory)
    if "convlstm" not in meta:
        raise CheckpointError(f"{directory} does not hold a ConvLSTM model")
    params = ConvLSTMParams(ConvLSTMConfig(**meta["convlstm"]), np.random.default_rng(0))
    params.load_state_dict(tensors)
    return params, meta
