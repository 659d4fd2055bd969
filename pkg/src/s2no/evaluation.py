"""Error metrics and reports.

All three metrics act on absolute coordinates of shape (N, n, 3). Aggregates
are plain means of per-sample values, so a report is fully described by its
per-sample table.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .oracle import Dataset


class LeakageError(ValueError):
    pass


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if pred.ndim == 2:
        pred, truth = pred[None], truth[None]
    return pred, truth


def per_sample_l2(pred, truth) -> np.ndarray:
    pred, truth = _pair(pred, truth)
    N = truth.shape[0]
    den = np.linalg.norm(truth.reshape(N, -1), axis=1)
    if np.any(den == 0):
        raise ValueError("relative error undefined for a zero-norm target")
    return 100.0 * np.linalg.norm((pred - truth).reshape(N, -1), axis=1) / den


def per_sample_mae(pred, truth) -> np.ndarray:
    pred, truth = _pair(pred, truth)
    return np.abs(pred - truth).reshape(truth.shape[0], -1).mean(axis=1)


def per_sample_mmax(pred, truth) -> np.ndarray:
    pred, truth = _pair(pred, truth)
    return np.linalg.norm(pred - truth, axis=-1).max(axis=1)


def metric_l2(pred, truth) -> float:
    """Mean relative L2 error in percent."""
    return float(per_sample_l2(pred, truth).mean())


def metric_mae(pred, truth) -> float:
    """Mean absolute error over every coordinate component (mm)."""
    return float(per_sample_mae(pred, truth).mean())


def metric_mmax(pred, truth) -> float:
    """Mean over samples of the largest point-to-point distance (mm)."""
    return float(per_sample_mmax(pred, truth).mean())


@dataclass
class MetricReport:
    model_id: str
    dataset_id: str
    sample_ids: np.ndarray
    l2: np.ndarray
    mae: np.ndarray
    mmax: np.ndarray
    extra: dict = field(default_factory=dict)

    @classmethod
    def compute(cls, pred, truth, sample_ids=None, model_id="model", dataset_id="dataset") -> "MetricReport":
        l2 = per_sample_l2(pred, truth)
        ids = np.arange(len(l2)) if sample_ids is None else np.asarray(sample_ids)
        return cls(model_id, dataset_id, ids, l2, per_sample_mae(pred, truth), per_sample_mmax(pred, truth))

    @property
    def count(self) -> int:
        return int(self.l2.shape[0])

    @property
    def L2(self) -> float:
        return float(self.l2.mean())

    @property
    def MAE(self) -> float:
        return float(self.mae.mean())

    @property
    def MMax(self) -> float:
        return float(self.mmax.mean())

    def aggregates(self) -> dict:
        return {"l2": self.L2, "mae": self.MAE, "mmax": self.MMax}

    def dominates(self, other: "MetricReport") -> bool:
        """Strictly lower on all three aggregate metrics."""
        return self.L2 < other.L2 and self.MAE < other.MAE and self.MMax < other.MMax

    def violations(self, thresholds: dict) -> list[str]:
        agg = self.aggregates()
        out = []
        for name, limit in thresholds.items():
            key = name.lower().replace("-", "")
            if key not in agg:
                raise KeyError(f"unknown metric {name!r}; expected one of {sorted(agg)}")
            if not agg[key] <= limit:
                out.append(f"{name}={agg[key]:.6g} exceeds {limit:g}")
        return out

    def to_text(self) -> str:
        lines = [f"model: {self.model_id}", f"dataset: {self.dataset_id}", f"samples: {self.count}",
                 f"L2 (%): {self.L2:.6f}", f"MAE (mm): {self.MAE:.6f}", f"M-Max (mm): {self.MMax:.6f}"]
        lines += [f"{k}: {v}" for k, v in sorted(self.extra.items())]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "l2_percent", "mae_mm", "mmax_mm"])
        for i, a, b, c in zip(self.sample_ids, self.l2, self.mae, self.mmax):
            w.writerow([int(i), repr(float(a)), repr(float(b)), repr(float(c))])
        return buf.getvalue()

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        txt, csv_path = out / f"{stem}.txt", out / f"{stem}.csv"
        txt.write_text(self.to_text())
        csv_path.write_text(self.to_csv())
        return txt, csv_path


def check_leakage(train: Dataset | None, test: Dataset) -> None:
    """Reject a test split that shares any sample with the training data."""
    if train is None:
        return
    shared = train.sample_keys() & test.sample_keys()
    if shared:
        ex = sorted(shared)[:5]
        raise LeakageError(f"{len(shared)} test samples also appear in training data, e.g. {ex}")


def evaluate(predict_fn, test: Dataset, train: Dataset | None = None, model_id: str = "model",
             seeds_predict_fns: list | None = None) -> MetricReport:
    """Run ``predict_fn(dataset) -> (N, n, 3)`` on ``test`` and collect metrics.

    With ``seeds_predict_fns`` (one predictor per training seed) the report
    also carries the mean and standard deviation of each aggregate.
    """
    check_leakage(train, test)
    truth = test.u.astype(np.float64)
    rep = MetricReport.compute(predict_fn(test), truth, test.sample_ids, model_id, test.geometry_id)
    if seeds_predict_fns:
        aggs = [MetricReport.compute(fn(test), truth).aggregates() for fn in seeds_predict_fns]
        for key in ("l2", "mae", "mmax"):
            vals = np.array([a[key] for a in aggs])
            rep.extra[f"{key}_seed_mean"] = float(vals.mean())
            rep.extra[f"{key}_seed_std"] = float(vals.std())
    return rep


__all__ = ["metric_l2", "metric_mae", "metric_mmax", "per_sample_l2", "per_sample_mae", "per_sample_mmax",
           "MetricReport", "evaluate", "check_leakage", "LeakageError"]
