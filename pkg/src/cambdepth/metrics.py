"""Depth-estimation error and accuracy metrics."""

from dataclasses import asdict, dataclass, fields
from typing import List, Sequence

import numpy as np

from .errors import ContractError, EvaluationError, ShapeError

THRESHOLDS = (1.25, 1.25 ** 2, 1.25 ** 3)

# report column order: accuracies first, then errors
COLUMNS = ("delta1", "delta2", "delta3", "rmse", "log_rel", "abs_rel", "sq_rel")
HEADERS = ("d1", "d2", "d3", "RMSE", "log.rel", "abs.rel", "sq.rel")


@dataclass(frozen=True)
class MetricsReport:
    rmse: float
    log_rel: float
    abs_rel: float
    sq_rel: float
    delta1: float
    delta2: float
    delta3: float
    n_valid: int

    def row(self) -> List[float]:
        return [getattr(self, c) for c in COLUMNS]

    def to_dict(self) -> dict:
        return asdict(self)

    def format_row(self, label: str = "", sep: str = ",") -> str:
        vals = [f"{v:.6f}" for v in self.row()]
        return sep.join(([label] if label is not None else []) + vals + [str(self.n_valid)])


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def evaluate(pred, gt, min_valid_depth: float = 1e-3) -> MetricsReport:
    """Metrics over pixels with gt >= min_valid_depth and pred > 0."""
    pred, gt = _as_array(pred), _as_array(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    mask = (gt >= min_valid_depth) & (pred > 0)
    if not mask.any():
        raise EvaluationError("no valid pixels to evaluate")
    d, g = pred[mask], gt[mask]
    err = d - g
    ratio = np.maximum(d / g, g / d)
    return MetricsReport(
        rmse=float(np.sqrt(np.mean(err ** 2))),
        log_rel=float(np.mean(np.abs(np.log10(d) - np.log10(g)))),
        abs_rel=float(np.mean(np.abs(err) / g)),
        sq_rel=float(np.mean(err ** 2 / g)),
        delta1=float(np.mean(ratio < THRESHOLDS[0])),
        delta2=float(np.mean(ratio < THRESHOLDS[1])),
        delta3=float(np.mean(ratio < THRESHOLDS[2])),
        n_valid=int(mask.sum()),
    )


def aggregate(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Pixel-count-weighted pooling; RMSE pools squared errors before the root."""
    if not reports:
        raise ContractError("cannot aggregate an empty list of reports")
    w = np.array([r.n_valid for r in reports], dtype=np.float64)
    total = w.sum()

    def pooled(name):
        return float(np.dot(w, [getattr(r, name) for r in reports]) / total)

    mse = float(np.dot(w, [r.rmse ** 2 for r in reports]) / total)
    return MetricsReport(
        rmse=float(np.sqrt(mse)),
        log_rel=pooled("log_rel"), abs_rel=pooled("abs_rel"), sq_rel=pooled("sq_rel"),
        delta1=pooled("delta1"), delta2=pooled("delta2"), delta3=pooled("delta3"),
        n_valid=int(total),
    )


def mean_of_images(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Unweighted per-image average, the alternative to pooled aggregation."""
    if not reports:
        raise ContractError("cannot average an empty list of reports")
    vals = {f.name: float(np.mean([getattr(r, f.name) for r in reports]))
            for f in fields(MetricsReport) if f.name != "n_valid"}
    return MetricsReport(**vals, n_valid=sum(r.n_valid for r in reports))
