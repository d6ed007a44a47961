"""ROC curves, detection rate at a fixed false-positive rate, per-family reports, throughput."""

from __future__ import annotations

import json
import platform
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .hashing import featurize_many
from .models import FLAT_INPUT_VARIANTS, prepare_inputs

REPORT_VERSION = 1


class ResolutionWarning(UserWarning):
    """Too few negatives to resolve the requested false-positive rate."""


def _check_scored(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if labels.all() or not labels.any():
        raise ValueError("ROC needs at least one positive and one negative")
    return scores, labels


@dataclass
class ROC:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # thresholds[i] yields (fpr[i+1], tpr[i+1]); point 0 is (0, 0)
    auc: float


def roc(scores, labels) -> ROC:
    """ROC with one operating point per distinct score (score >= threshold flags)."""
    scores, labels = _check_scored(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of each run of equal scores
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tpr = np.r_[0.0, tp[last] / tp[-1]]
    fpr = np.r_[0.0, fp[last] / fp[-1]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return ROC(fpr, tpr, s[last], auc)


def roc_auc(scores, labels) -> float:
    return roc(scores, labels).auc


def dr_at_fpr(scores, labels, target_fpr: float = 1e-3) -> Tuple[float, float]:
    """Detection rate at the lowest threshold whose empirical FPR does not exceed the target.

    Returns ``(detection_rate, threshold)``; a document is flagged when its
    score is >= threshold. If no threshold qualifies, returns ``(0.0, inf)``.
    """
    if not 0.0 < target_fpr < 1.0:
        raise ValueError("target_fpr must lie strictly between 0 and 1")
    scores, labels = _check_scored(scores, labels)
    n_neg = int((~labels).sum())
    if n_neg < 1.0 / target_fpr:
        warnings.warn(f"{n_neg} negatives cannot resolve a false-positive rate of {target_fpr:g}",
                      ResolutionWarning, stacklevel=2)
    curve = roc(scores, labels)
    ok = np.flatnonzero(curve.fpr[1:] <= target_fpr)
    if len(ok) == 0:
        return 0.0, float("inf")
    i = ok[-1]
    return float(curve.tpr[i + 1]), float(curve.thresholds[i])


@dataclass
class FamilyRow:
    family: str
    detection_rate: Optional[float]  # None when no malware carries the tag
    prevalence: float  # percent of malware carrying the tag
    count: int


@dataclass
class FamilyReport:
    rows: List[FamilyRow]
    threshold: float
    target_fpr: float = 1e-3

    @property
    def dr_column(self) -> str:
        # 1e-3 is the customary DR@10e-3 operating point
        return "DR@10e-3" if self.target_fpr == 1e-3 else f"DR@{self.target_fpr:g}"

    def to_tsv(self) -> str:
        lines = [f"family\t{self.dr_column}\tprevalence"]
        for r in self.rows:
            dr = "absent" if r.detection_rate is None else f"{r.detection_rate:.3f}"
            lines.append(f"{r.family}\t{dr}\t{r.prevalence:.1f}")
        return "\n".join(lines) + "\n"


ALL_MALWARE = "All Malware"


def family_report(scores, labels, tags: Sequence[Iterable[str]], threshold: float,
                  families: Optional[Sequence[str]] = None, target_fpr: float = 1e-3) -> FamilyReport:
    """Detection rate among malware carrying each tag, plus tag prevalence among malware.

    Rows are ordered by detection rate, highest first, like a leaderboard;
    families with no tagged malware come last with an absent rate.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    tags = [set(t) for t in tags]
    mal = np.flatnonzero(labels)
    if families is None:
        families = sorted({t for i in mal for t in tags[i]})
    flagged = scores >= threshold
    rows = []
    for fam in families:
        members = [i for i in mal if fam in tags[i]]
        prev = 100.0 * len(members) / len(mal) if len(mal) else 0.0
        dr = float(flagged[members].mean()) if members else None
        rows.append(FamilyRow(fam, dr, prev, len(members)))
    overall = float(flagged[mal].mean()) if len(mal) else None
    rows.append(FamilyRow(ALL_MALWARE, overall, 100.0 if len(mal) else 0.0, len(mal)))
    present = sorted((r for r in rows if r.detection_rate is not None),
                     key=lambda r: -r.detection_rate)
    absent = [r for r in rows if r.detection_rate is None]
    return FamilyReport(present + absent, threshold, target_fpr)


def write_roc(path: Union[str, Path], curve: ROC) -> None:
    with open(path, "w") as fh:
        fh.write("# fpr tpr\n")
        for f, t in zip(curve.fpr, curve.tpr):
            fh.write(f"{f:.10g} {t:.10g}\n")


def write_report(path: Union[str, Path], payload: dict) -> None:
    body = dict(payload, version=REPORT_VERSION)
    with open(path, "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")


def hardware_descriptor() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} {platform.system()} python{platform.python_version()}"


def bench_throughput(model, documents: Sequence[bytes], batch_size: int = 16, jobs: int = 1,
                     hardware: Optional[str] = None, warmup: int = 1) -> dict:
    """End-to-end pages/sec: tokenize, hash, pyramid and forward, in batches.

    Latency percentiles are per batch, in milliseconds.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    dtype = next(iter(model.parameters().values())).dtype
    batches = [documents[i:i + batch_size] for i in range(0, len(documents), batch_size)]
    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None

    def run(batch):
        need_flat = model.tag in FLAT_INPUT_VARIANTS
        chunked, flat = featurize_many(batch, pool=pool, need_chunked=not need_flat,
                                       need_flat=need_flat)
        x = prepare_inputs(model.tag, chunked=chunked, flat=flat, dtype=dtype).array
        return model.predict_proba(x)

    try:
        for b in batches[:warmup]:
            run(b)
        latencies = []
        t_start = time.perf_counter()
        for b in batches:
            t0 = time.perf_counter()
            run(b)
            latencies.append(time.perf_counter() - t0)
        total = time.perf_counter() - t_start
    finally:
        if pool is not None:
            pool.shutdown()
    lat_ms = np.asarray(latencies) * 1e3 if latencies else np.zeros(1)
    return {
        "variant": model.tag,
        "n_documents": len(documents),
        "total_bytes": int(sum(len(d) for d in documents)),
        "batch_size": batch_size,
        "jobs": jobs,
        "dtype": str(dtype),
        "seconds": total,
        "pages_per_sec": len(documents) / total if total > 0 else float("inf"),
        "latency_ms": {
            "p50": float(np.percentile(lat_ms, 50)),
            "p95": float(np.percentile(lat_ms, 95)),
            "p99": float(np.percentile(lat_ms, 99)),
        },
        "hardware": hardware or hardware_descriptor(),
    }
