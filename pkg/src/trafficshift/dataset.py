"""Supervised windows, scenario splits and z-score normalisation."""
from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np

from .errors import DataError
from .ingestion import TrafficCube, month_ordinal

PROTOCOL_TRAIN_MONTHS = (12, 24, 48, 96)


@dataclass
class WindowSample:
    x: np.ndarray
    y: np.ndarray
    target_time: datetime
    env_month: int
    delta_months: int | None = None


@dataclass
class WindowSet:
    """A batch of windows over one series, stored as target-hour indices.

    ``x(i)`` is ``series[t-t_in:t]`` transposed to [N, t_in, 2] for target
    hour ``t``; ``env_month`` holds global month ordinals (year*12 + month-1).
    """

    series: np.ndarray
    target_index: np.ndarray
    env_month: np.ndarray
    start_time: datetime
    t_in: int = 6
    delta: np.ndarray | None = None

    def __len__(self):
        return len(self.target_index)

    @property
    def n_regions(self) -> int:
        return self.series.shape[1]

    def x(self, idx=None) -> np.ndarray:
        t = self.target_index if idx is None else self.target_index[idx]
        steps = np.asarray(t)[..., None] + np.arange(-self.t_in, 0)
        return np.moveaxis(self.series[steps], -3, -2)

    def y(self, idx=None) -> np.ndarray:
        t = self.target_index if idx is None else self.target_index[idx]
        return self.series[np.asarray(t)][..., :, None, :]

    def target_time(self, i: int) -> datetime:
        return self.start_time + timedelta(hours=int(self.target_index[i]))

    def subset(self, mask) -> "WindowSet":
        return WindowSet(
            self.series,
            self.target_index[mask],
            self.env_month[mask],
            self.start_time,
            self.t_in,
            None if self.delta is None else self.delta[mask],
        )

    def with_series(self, series: np.ndarray) -> "WindowSet":
        return WindowSet(series, self.target_index, self.env_month, self.start_time, self.t_in, self.delta)

    def __getitem__(self, i: int) -> WindowSample:
        return WindowSample(
            x=self.x(i),
            y=self.y(i),
            target_time=self.target_time(i),
            env_month=int(self.env_month[i]),
            delta_months=None if self.delta is None else int(self.delta[i]),
        )


def make_windows(cube: TrafficCube, t_in: int = 6, t_out: int = 1) -> WindowSet:
    """One window per target hour in ``[t_in, T)``; env_month is the target's month."""
    if t_out != 1:
        raise ValueError("only one-step-ahead targets are supported")
    if cube.n_hours < t_in + t_out:
        raise DataError(f"cube has {cube.n_hours} hours, need at least {t_in + t_out}")
    target = np.arange(t_in, cube.n_hours)
    month = cube.start_month + cube.month_of_hour[target]
    return WindowSet(cube.values.astype(float), target, month, cube.start_time, t_in)


def delta_months(sample_month: tuple[int, int], test_month: tuple[int, int]) -> int:
    d = month_ordinal(*test_month) - month_ordinal(*sample_month)
    if d < 1:
        raise ValueError(f"sample month {sample_month} is not before test month {test_month}")
    return d


@dataclass(frozen=True)
class ScenarioSpec:
    test_month: tuple[int, int]
    train_months: int
    t_in: int = 6
    t_out: int = 1

    def __post_init__(self):
        if self.train_months < 2:
            raise ValueError("train_months must be at least 2 (one month is held out for validation)")

    @property
    def test_ordinal(self) -> int:
        return month_ordinal(*self.test_month)

    @property
    def name(self) -> str:
        y, m = self.test_month
        return f"{y:04d}-{m:02d}_d{self.train_months}"


def split_scenario(samples: WindowSet, spec: ScenarioSpec) -> tuple[WindowSet, WindowSet, WindowSet]:
    """Split into train (2 <= delta <= D), validation (delta = 1) and test months."""
    delta = spec.test_ordinal - samples.env_month
    first = spec.test_ordinal - spec.train_months
    if samples.env_month.min() > first or samples.env_month.max() < spec.test_ordinal:
        raise DataError(
            f"scenario {spec.name} needs months {first}..{spec.test_ordinal}, data covers "
            f"{samples.env_month.min()}..{samples.env_month.max()}"
        )
    labelled = WindowSet(samples.series, samples.target_index, samples.env_month,
                         samples.start_time, samples.t_in, delta)
    test = labelled.subset(delta == 0)
    val = labelled.subset(delta == 1)
    train = labelled.subset((delta >= 2) & (delta <= spec.train_months))
    for name, part in (("train", train), ("validation", val), ("test", test)):
        if len(part) == 0:
            raise DataError(f"empty {name} split for scenario {spec.name}")
    return train, val, test


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def apply_series(self, series):
        return (series - self.mean) / self.std

    def invert_series(self, series):
        return series * self.std + self.mean

    def apply(self, a):
        """Normalise an array laid out as [..., N, t, 2]."""
        return (a - self.mean[:, None, :]) / self.std[:, None, :]

    def invert(self, a):
        return a * self.std[:, None, :] + self.mean[:, None, :]


def fit_normalizer(train: WindowSet) -> Normalizer:
    """Per (region, channel) z-score over the hours feeding the training inputs."""
    if len(train) == 0:
        raise DataError("cannot fit a normalizer on no samples")
    covered = np.zeros(train.series.shape[0], dtype=bool)
    for k in range(1, train.t_in + 1):
        covered[train.target_index - k] = True
    vals = train.series[covered]
    std = vals.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    return Normalizer(vals.mean(axis=0), std)
