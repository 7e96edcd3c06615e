"""Categorical verification of three-class rain forecasts.

Every score is built from a one-vs-rest contingency table for a class ``k``.
Undefined scores (zero denominators) are ``nan`` and serialize as ``null``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

CATEGORIES = {"rain": 1, "heavy_rain": 2}
CLASS_KEYS = ("no_rain", "rain", "heavy_rain")
SCORE_NAMES = ("acc", "pod", "csi", "far", "bias", "hss", "hss_alt")
UNDEFINED = math.nan


@dataclass(frozen=True)
class ContingencyTable:
    k: int
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ContingencyTable") -> "ContingencyTable":
        if other.k != self.k:
            raise ValueError(f"cannot add tables of classes {self.k} and {other.k}")
        return ContingencyTable(
            self.k, self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )

    def swapped(self) -> "ContingencyTable":
        """Table obtained by exchanging the roles of prediction and truth."""
        return ContingencyTable(self.k, self.tp, self.fn, self.tn, self.fp)


def contingency(pred, truth, k: int, mask=None) -> ContingencyTable:
    """One-vs-rest counts of class ``k``; cells where ``mask`` is False are skipped."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"pred shape {pred.shape} != truth shape {truth.shape}")
    p = pred == k
    t = truth == k
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape:
            raise ValueError(f"mask shape {mask.shape} != grid shape {pred.shape}")
        p = p[mask]
        t = t[mask]
    n = int(p.size)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p)) - tp
    fn = int(np.count_nonzero(t)) - tp
    return ContingencyTable(k, tp, fp, n - tp - fp - fn, fn)


def _ratio(num: float, den: float) -> float:
    return num / den if den else UNDEFINED


def csi(t: ContingencyTable) -> float:
    return _ratio(t.tp, t.tp + t.fn + t.fp)


def pod(t: ContingencyTable) -> float:
    return _ratio(t.tp, t.tp + t.fn)


def far(t: ContingencyTable) -> float:
    return _ratio(t.fp, t.tp + t.fp)


def bias(t: ContingencyTable) -> float:
    return _ratio(t.tp + t.fp, t.tp + t.fn)


def acc(t: ContingencyTable) -> float:
    return _ratio(t.tp + t.tn, t.total)


def hss(t: ContingencyTable, variant: str = "standard") -> float:
    """Heidke skill score.

    ``standard`` is the usual Heidke form. ``alt_denominator`` keeps the
    alternative denominator ``fp^2 + tn^2 + 2 tp fn + (fp + tn)(tp + fp)``,
    which only reaches 1 for a perfect forecast when tp == tn.
    """
    # Python ints: no overflow on large pooled counts.
    tp, fp, tn, fn = t.tp, t.fp, t.tn, t.fn
    num = 2 * (tp * tn - fn * fp)
    if variant == "standard":
        den = (tp + fn) * (fn + tn) + (tp + fp) * (fp + tn)
    elif variant == "alt_denominator":
        den = fp * fp + tn * tn + 2 * tp * fn + (fp + tn) * (tp + fp)
    else:
        raise ValueError(f"unknown HSS variant {variant!r}")
    return _ratio(num, den)


def scores(t: ContingencyTable) -> dict[str, float]:
    return {
        "acc": acc(t),
        "pod": pod(t),
        "csi": csi(t),
        "far": far(t),
        "bias": bias(t),
        "hss": hss(t, "standard"),
        "hss_alt": hss(t, "alt_denominator"),
    }


@dataclass
class MetricsReport:
    tables: dict[str, ContingencyTable]
    metrics: dict[str, dict[str, float]]
    n_samples: int
    aggregation: str = "micro"

    @property
    def n_pixels(self) -> int:
        return next(iter(self.tables.values())).total

    def get(self, category: str, score: str) -> float:
        return self.metrics[category][score]

    def to_dict(self) -> dict:
        out: dict = {"aggregation": self.aggregation, "n_samples": self.n_samples,
                     "n_pixels": self.n_pixels, "classes": {}}
        for key in CLASS_KEYS:
            t = self.tables[key]
            out["classes"][key] = {
                "k": t.k, "tp": t.tp, "fp": t.fp, "tn": t.tn, "fn": t.fn,
                **{s: _json_float(self.metrics[key][s]) for s in SCORE_NAMES},
            }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        tables, metrics = {}, {}
        for key in CLASS_KEYS:
            c = d["classes"][key]
            tables[key] = ContingencyTable(c["k"], c["tp"], c["fp"], c["tn"], c["fn"])
            metrics[key] = {s: (math.nan if c[s] is None else c[s]) for s in SCORE_NAMES}
        return cls(tables, metrics, d["n_samples"], d.get("aggregation", "micro"))


def _json_float(v: float):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)


def evaluate_split(
    preds: Sequence,
    truths: Sequence,
    thresholds=None,
    aggregation: str = "micro",
    masks: Sequence | None = None,
) -> MetricsReport:
    """Score aligned sequences of predicted and observed class grids.

    ``micro`` pools contingency counts over every pixel of every sample before
    scoring; ``macro`` averages per-sample scores, ignoring undefined ones.
    ``thresholds`` is accepted for API symmetry with the rain-rate interface;
    inputs here are already class grids.
    """
    preds = list(preds)
    truths = list(truths)
    if not preds:
        raise ValueError("evaluate_split needs at least one sample")
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} predictions for {len(truths)} observations")
    if masks is not None and len(masks) != len(preds):
        raise ValueError("one mask per sample is required")
    per_sample = [
        {key: contingency(p, t, k, None if masks is None else masks[i])
         for k, key in enumerate(CLASS_KEYS)}
        for i, (p, t) in enumerate(zip(preds, truths))
    ]
    tables = {key: per_sample[0][key] for key in CLASS_KEYS}
    for s in per_sample[1:]:
        tables = {key: tables[key] + s[key] for key in CLASS_KEYS}

    if aggregation == "micro":
        metrics = {key: scores(tables[key]) for key in CLASS_KEYS}
    elif aggregation == "macro":
        metrics = {}
        for key in CLASS_KEYS:
            rows = [scores(s[key]) for s in per_sample]
            metrics[key] = {}
            for name in SCORE_NAMES:
                vals = [r[name] for r in rows if not math.isnan(r[name])]
                metrics[key][name] = float(np.mean(vals)) if vals else UNDEFINED
    else:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    return MetricsReport(tables, metrics, len(preds), aggregation)


def _fmt(v: float) -> str:
    return "   -  " if math.isnan(v) else f"{v:6.3f}"


def format_report(report: MetricsReport, label: str = "") -> str:
    """Render Rain / Heavy Rain scores as an aligned text table."""
    cols = ("acc", "pod", "csi", "far", "bias", "hss", "hss_alt")
    heads = ("Acc", "POD", "CSI", "FAR", "Bias", "HSS", "HSS*")
    width = 6 * len(cols) + len(cols) - 1
    lines = [
        f"{'':<10} {'Rain':^{width}} | {'Heavy Rain':^{width}}",
        f"{'':<10} " + " ".join(f"{h:>6}" for h in heads) + " | "
        + " ".join(f"{h:>6}" for h in heads),
        f"{label:<10} "
        + " ".join(_fmt(report.metrics["rain"][c]) for c in cols) + " | "
        + " ".join(_fmt(report.metrics["heavy_rain"][c]) for c in cols),
        "HSS* = alternative-denominator HSS variant",
    ]
    return "\n".join(lines)
