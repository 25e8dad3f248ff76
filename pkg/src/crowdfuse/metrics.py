"""Counting error metrics over a dataset.

MAE = (1/N) sum |y_i - yhat_i|, RMSE = sqrt((1/N) sum (y_i - yhat_i)^2),
where y_i is the annotated count and yhat_i the density-map sum for the
full, uncropped image pair.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class EvalResult:
    mae: float
    rmse: float
    per_sample: tuple[tuple[float, float], ...]  # (y, yhat) pairs

    @property
    def n(self) -> int:
        return len(self.per_sample)


def mae_rmse(ys: Sequence[float], yhats: Sequence[float]) -> tuple[float, float]:
    y = np.asarray(ys, dtype=np.float64)
    p = np.asarray(yhats, dtype=np.float64)
    if y.shape != p.shape or y.size == 0:
        raise ValidationError("mae_rmse needs equally sized, non-empty sequences")
    err = y - p
    return float(np.abs(err).mean()), float(np.sqrt((err**2).mean()))


def evaluate(model, samples) -> EvalResult:
    """Predict every sample at full resolution and summarize the count error."""
    if not samples:
        raise ValidationError("evaluate needs a non-empty dataset")
    pairs = []
    for sample in samples:
        density = model.predict(sample)
        pairs.append((float(sample.count), density.count))
    mae, rmse = mae_rmse([y for y, _ in pairs], [p for _, p in pairs])
    return EvalResult(mae=mae, rmse=rmse, per_sample=tuple(pairs))
