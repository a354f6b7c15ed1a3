"""NMS trajectory selection, minADE/minFDE/MR and the regional MR matrix."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .model import MMTransformer, PredictionSet
from .partition import ProposalRegionMap, RegionPartition


@dataclass
class EvalConfig:
    k_out: int = 6
    nms_threshold: float = 2.0
    miss_threshold: float = 2.0
    batch_size: int = 64


@dataclass
class NMSResult:
    indices: list
    final_threshold: float


def nms_select(predictions: PredictionSet, threshold: float = 2.0, k_out: int = 6) -> NMSResult:
    """Greedy endpoint NMS over softmax-normalized scores.

    Candidates are visited by descending confidence (lower index first on
    ties) and dropped when their endpoint lies closer than ``threshold`` to
    an already selected endpoint. If a pass leaves fewer than ``k_out``
    picks, the threshold is halved and the leftovers are scanned again.
    """
    K = len(predictions.scores)
    if k_out > K:
        raise ConfigError(f"cannot select {k_out} trajectories from {K}")
    if k_out <= 0:
        return NMSResult([], threshold)
    probs = predictions.probabilities()
    order = np.argsort(-probs, kind="stable")
    ends = predictions.endpoints
    selected: list = []
    thr = float(threshold)
    while True:
        for i in order:
            if len(selected) == k_out:
                break
            if i in selected:
                continue
            if selected:
                d = np.linalg.norm(ends[selected] - ends[i], axis=1)
                if np.any(d < thr):
                    continue
            selected.append(int(i))
        if len(selected) == k_out:
            return NMSResult(selected, thr)
        # identical endpoints never separate; admit the rest at threshold 0
        thr = thr / 2.0 if thr > 1e-9 else 0.0


@dataclass
class CaseMetrics:
    ade: float
    fde: float
    miss: int


def compute_metrics(selected_trajectories, gt_future, miss_threshold: float = 2.0) -> CaseMetrics:
    traj = np.asarray(selected_trajectories, dtype=np.float64)
    gt = np.asarray(gt_future, dtype=np.float64)
    if traj.ndim != 3 or len(traj) == 0:
        raise ContractError("compute_metrics needs at least one (T, 2) trajectory")
    err = np.linalg.norm(traj - gt[None], axis=-1)  # (k, T)
    fde = float(err[:, -1].min())
    return CaseMetrics(float(err.mean(axis=1).min()), fde, int(fde > miss_threshold))


@dataclass
class MetricsReport:
    minADE: float
    minFDE: float
    MR: float
    K_eval: int
    miss_threshold: float
    cases: int

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate(cases: Sequence[CaseMetrics], k_eval: int, miss_threshold: float) -> MetricsReport:
    if not cases:
        return MetricsReport(float("nan"), float("nan"), float("nan"), k_eval, miss_threshold, 0)
    return MetricsReport(
        float(np.mean([c.ade for c in cases])),
        float(np.mean([c.fde for c in cases])),
        float(np.mean([c.miss for c in cases])),
        k_eval,
        miss_threshold,
        len(cases),
    )


@dataclass
class MRMatrix:
    """cell (i, j): miss rate of region-i proposals on cases whose ground
    truth lies in region j; NaN where region j has no cases."""

    values: np.ndarray
    counts: np.ndarray

    @property
    def M(self) -> int:
        return len(self.values)

    def diagonal_mean(self) -> float:
        d = np.diag(self.values)
        return float(np.nanmean(d)) if np.isfinite(d).any() else float("nan")

    def off_diagonal_mean(self) -> float:
        off = self.values[~np.eye(self.M, dtype=bool)]
        return float(np.nanmean(off)) if np.isfinite(off).any() else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["proposal_region"] + [f"gt_region_{j}" for j in range(self.M)])
        for i in range(self.M):
            w.writerow([i] + ["" if not np.isfinite(v) else repr(float(v)) for v in self.values[i]])
        return buf.getvalue()


def mr_matrix_from_predictions(
    predictions: Sequence[PredictionSet],
    gt_futures,
    partition: RegionPartition,
    proposal_map: ProposalRegionMap,
    miss_threshold: float = 2.0,
) -> MRMatrix:
    M = proposal_map.M
    misses = np.zeros((M, M))
    counts = np.zeros(M, dtype=np.int64)
    for pred, gt in zip(predictions, gt_futures):
        gt = np.asarray(gt)
        j = int(partition.assign(gt[-1])[0])
        counts[j] += 1
        err = np.linalg.norm(pred.endpoints - gt[-1], axis=1)
        for i in range(M):
            misses[i, j] += float(err[proposal_map.proposals_of(i)].min() > miss_threshold)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(counts[None, :] > 0, misses / np.maximum(counts[None, :], 1), np.nan)
    return MRMatrix(values, np.broadcast_to(counts, (M, M)).copy())


def mr_matrix(model: MMTransformer, scenarios, partition: RegionPartition, proposal_map: ProposalRegionMap, miss_threshold: float = 2.0) -> MRMatrix:
    preds = model.predict(scenarios)
    return mr_matrix_from_predictions(preds, [s.future for s in scenarios], partition, proposal_map, miss_threshold)


@dataclass
class EvalResult:
    metrics: MetricsReport
    cases: list
    selections: list
    predictions: list
    mr_matrix: Optional[MRMatrix] = None
    per_mode: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"metrics": self.metrics.to_dict(), "per_mode": self.per_mode}
        if self.mr_matrix is not None:
            out["mr_matrix"] = {
                "values": [[None if not np.isfinite(v) else float(v) for v in row] for row in self.mr_matrix.values],
                "diagonal_mean": self.mr_matrix.diagonal_mean(),
                "off_diagonal_mean": self.mr_matrix.off_diagonal_mean(),
            }
        return out


def evaluate_predictions(
    predictions: Sequence[PredictionSet],
    scenarios,
    config: EvalConfig = EvalConfig(),
    partition: Optional[RegionPartition] = None,
    proposal_map: Optional[ProposalRegionMap] = None,
) -> EvalResult:
    cases, selections = [], []
    for pred, s in zip(predictions, scenarios):
        if s.future is None:
            raise ContractError(f"scenario {s.id} has no ground-truth future")
        sel = nms_select(pred, config.nms_threshold, config.k_out)
        selections.append(sel)
        cases.append(compute_metrics(pred.trajectories[sel.indices], s.future, config.miss_threshold))
    result = EvalResult(aggregate(cases, config.k_out, config.miss_threshold), cases, selections, list(predictions))
    if partition is not None and proposal_map is not None and proposal_map.M > 1:
        result.mr_matrix = mr_matrix_from_predictions(predictions, [s.future for s in scenarios], partition, proposal_map, config.miss_threshold)
    labels = [s.mode_label for s in scenarios]
    if any(lab is not None for lab in labels):
        for mode in sorted({lab for lab in labels if lab is not None}):
            idx = [i for i, lab in enumerate(labels) if lab == mode]
            rep = aggregate([cases[i] for i in idx], config.k_out, config.miss_threshold)
            result.per_mode[mode] = rep.to_dict()
        if partition is not None:
            result.per_mode["coverage"] = mode_coverage(predictions, selections, scenarios, partition, config.miss_threshold)
    return result


def evaluate_split(
    model: MMTransformer,
    scenarios,
    config: EvalConfig = EvalConfig(),
    partition: Optional[RegionPartition] = None,
    proposal_map: Optional[ProposalRegionMap] = None,
) -> EvalResult:
    preds = model.predict(scenarios, config.batch_size)
    return evaluate_predictions(preds, scenarios, config, partition, proposal_map)


def mode_coverage(predictions, selections, scenarios, partition: RegionPartition, radius: float = 2.0) -> dict:
    """Per ground-truth mode: share of that mode's cases where the region of
    the ground-truth endpoint holds a selected endpoint within ``radius``."""
    hits: dict = {}
    for pred, sel, s in zip(predictions, selections, scenarios):
        if s.mode_label is None:
            continue
        gt_end = np.asarray(s.future)[-1]
        region = int(partition.assign(gt_end)[0])
        ends = pred.endpoints[sel.indices]
        in_region = partition.assign(ends) == region
        close = np.linalg.norm(ends - gt_end, axis=1) <= radius
        hits.setdefault(s.mode_label, []).append(bool(np.any(in_region & close)))
    return {mode: float(np.mean(v)) for mode, v in sorted(hits.items())}


def write_metrics_json(path, result: EvalResult, extra: Optional[dict] = None) -> None:
    from .scene import atomic_write_text

    atomic_write_text(path, json.dumps({**result.to_dict(), **(extra or {})}, indent=1))
