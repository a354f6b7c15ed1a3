"""Losses, proposal selection and the training loop."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import numerics as nx
from .errors import ConfigError, ContractError, TrainingDivergenceError
from .model import Batch, EncodedScene, MMTransformer, ModelOutput, collate, encode_scene, save_checkpoint
from .partition import ProposalRegionMap, RegionPartition, map_proposals_to_regions

log = logging.getLogger(__name__)

STRATEGIES = ("vanilla", "rts")


@dataclass
class TrainConfig:
    strategy: str = "rts"
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 1e-4
    max_norm: float = 0.1
    huber_delta: float = 1.0
    augment: bool = True
    p_flip: float = 0.5
    p_mask: float = 0.5
    lr_schedule: str = "cosine"  # or "constant"
    min_lr_ratio: float = 0.01
    checkpoint_every: int = 0  # epochs between periodic checkpoints, 0 disables
    partition: Optional[str] = None  # path of the partition file, recorded in outputs

    def validate(self, K: int, partition: Optional[RegionPartition] = None) -> "TrainConfig":
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.strategy == "rts":
            if partition is None:
                raise ConfigError("strategy 'rts' requires a partition (missing field: partition)")
            if K % partition.M:
                raise ConfigError(f"K={K} not divisible by partition M={partition.M}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"lr_schedule must be 'cosine' or 'constant', got {self.lr_schedule!r}")
        return self

    def learning_rate(self, epoch: int) -> float:
        """Rate used during 0-based ``epoch``: cosine from ``lr`` down to
        ``lr * min_lr_ratio`` over the run, or flat."""
        if self.lr_schedule == "constant" or self.epochs <= 1:
            return self.lr
        frac = min(epoch, self.epochs - 1) / (self.epochs - 1)
        return self.lr * (self.min_lr_ratio + (1 - self.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


class UncertaintyWeights(nn.Module):
    """sigma_i = exp(u_i), u initialised at 0 so every sigma starts at 1."""

    def __init__(self, dtype=torch.float32):
        super().__init__()
        self.log_sigma = nn.Parameter(torch.zeros(3, dtype=dtype))

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(self.log_sigma)


# -- selection ---------------------------------------------------------------


def endpoint_distances(trajectories: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """(..., K, T, 2), (..., T, 2) -> (..., K) endpoint L2 distances."""
    return torch.linalg.vector_norm(trajectories[..., -1, :] - gt[..., None, -1, :], dim=-1)


def select_supervised_proposals(
    trajectories: torch.Tensor,
    gt_future: Optional[torch.Tensor],
    strategy: str,
    proposal_map: Optional[ProposalRegionMap] = None,
    gt_region=None,
    partition: Optional[RegionPartition] = None,
) -> torch.Tensor:
    """Boolean mask (..., K) of proposals that receive regression loss.

    vanilla: the single proposal with the smallest endpoint error (first on
    ties). rts: the block of proposals mapped to the ground-truth region.
    """
    if gt_future is None:
        raise ContractError("proposal selection needs a ground-truth future")
    K = trajectories.shape[-3]
    if strategy == "vanilla":
        best = torch.argmin(endpoint_distances(trajectories, gt_future).detach(), dim=-1)
        return torch.nn.functional.one_hot(best, K).bool()
    if strategy == "rts":
        if proposal_map is None:
            raise ContractError("rts selection needs a proposal map")
        if gt_region is None:
            if partition is None:
                raise ContractError("rts selection needs the ground-truth region or a partition")
            ends = gt_future[..., -1, :].detach().cpu().double().numpy()
            gt_region = partition.assign(ends).reshape(ends.shape[:-1])
        region = torch.as_tensor(np.asarray(gt_region), dtype=torch.long)
        blocks = torch.as_tensor(proposal_map.assignment, dtype=torch.long)
        return blocks == region[..., None]
    raise ConfigError(f"unknown strategy {strategy!r}")


def selected_indices(mask: torch.Tensor) -> list:
    return torch.nonzero(mask, as_tuple=False).flatten().tolist() if mask.dim() == 1 else [
        torch.nonzero(m).flatten().tolist() for m in mask
    ]


# -- losses ------------------------------------------------------------------


def huber(err: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    a = err.abs()
    return torch.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))


def _reduce(x: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "none":
        return x
    return x.mean() if x.dim() else x


def regression_loss(trajectories, gt_future, mask=None, delta: float = 1.0, reduction: str = "mean"):
    """Huber loss averaged over steps and coordinates, then over the
    selected proposals."""
    per_prop = huber(trajectories - gt_future[..., None, :, :], delta).mean(dim=(-1, -2))
    if mask is None:
        per_case = per_prop.mean(-1)
    else:
        m = mask.to(per_prop.dtype)
        if bool((m.sum(-1) == 0).any()):
            raise ContractError("regression loss needs a nonempty selection")
        per_case = (per_prop * m).sum(-1) / m.sum(-1)
    return _reduce(per_case, reduction)


def confidence_loss(scores, trajectories, gt_future, mask=None, reduction: str = "mean"):
    """KL(lambda || tau) over the selected proposals.

    tau is the softmax of the raw scores and lambda the softmax of negative
    endpoint errors, both restricted to the selection. lambda is a target
    and carries no gradient.
    """
    dist = endpoint_distances(trajectories, gt_future).detach()
    if mask is None:
        mask = torch.ones_like(scores, dtype=torch.bool)
    target = nx.masked_softmax(-dist, mask)
    log_tau = torch.log_softmax(scores.masked_fill(~mask, float("-inf")), dim=-1)
    log_tau = log_tau.masked_fill(~mask, 0.0)
    kl = torch.xlogy(target, target) - target * log_tau
    return _reduce(kl.sum(-1), reduction)


def region_log_probabilities(scores: torch.Tensor, proposal_map: ProposalRegionMap) -> torch.Tensor:
    """(..., K) raw scores -> (..., M) log of summed softmax mass per region."""
    blocks = scores.reshape(*scores.shape[:-1], proposal_map.M, proposal_map.N)
    return torch.logsumexp(blocks, dim=-1) - torch.logsumexp(scores, dim=-1, keepdim=True)


def region_probabilities(scores: torch.Tensor, proposal_map: ProposalRegionMap) -> torch.Tensor:
    return region_log_probabilities(scores, proposal_map).exp()


def classification_loss(scores, gt_region, proposal_map: ProposalRegionMap, reduction: str = "mean"):
    """Cross entropy of the ground-truth region under the region masses."""
    logp = region_log_probabilities(scores, proposal_map)
    region = torch.as_tensor(np.asarray(gt_region), dtype=torch.long)
    per_case = -torch.gather(logp, -1, region[..., None]).squeeze(-1)
    return _reduce(per_case, reduction)


def total_loss(reg, conf, cls, sigma, active=(True, True, True)):
    """sum_i L_i / sigma_i^2 + log(sigma_i + 1) over the active terms."""
    if isinstance(sigma, UncertaintyWeights):
        sigma = sigma.sigma
    sigma = torch.as_tensor(sigma)
    parts = (reg, conf, cls)
    out = 0.0
    for i, (part, on) in enumerate(zip(parts, active)):
        if on:
            out = out + part / sigma[i] ** 2 + torch.log(sigma[i] + 1.0)
    return out


@dataclass
class LossReport:
    reg: float
    conf: float
    cls: float
    total: float
    sigma: list
    per_layer: list = field(default_factory=list)
    selected: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def compute_losses(
    output: ModelOutput,
    future: torch.Tensor,
    strategy: str,
    weights: UncertaintyWeights,
    proposal_map: Optional[ProposalRegionMap] = None,
    gt_region=None,
    delta: float = 1.0,
    ids: Optional[Sequence[str]] = None,
):
    """Full loss at every decoding head, summed. Returns (total tensor, LossReport).

    Raises TrainingDivergenceError naming the offending scenario ids when any
    per-case loss is non-finite.
    """
    rts = strategy == "rts"
    active = (True, True, rts)
    total = 0.0
    per_layer = []
    for traj, scores in output.layers:
        mask = select_supervised_proposals(traj, future, strategy, proposal_map, gt_region)
        # vanilla has a single supervised proposal; its scores are trained
        # against all K so the selector still learns a ranking
        conf_mask = mask if rts else None
        reg_c = regression_loss(traj, future, mask, delta, reduction="none")
        conf_c = confidence_loss(scores, traj, future, conf_mask, reduction="none")
        cls_c = classification_loss(scores, gt_region, proposal_map, reduction="none") if rts else torch.zeros_like(reg_c)
        bad = ~(torch.isfinite(reg_c) & torch.isfinite(conf_c) & torch.isfinite(cls_c))
        if bool(bad.any()):
            names = [ids[i] for i in torch.nonzero(bad).flatten().tolist()] if ids else torch.nonzero(bad).flatten().tolist()
            raise TrainingDivergenceError(f"non-finite loss for scenarios {names}")
        reg, conf, cls = reg_c.mean(), conf_c.mean(), cls_c.mean()
        layer_total = total_loss(reg, conf, cls, weights.sigma, active)
        total = total + layer_total
        per_layer.append({"reg": float(reg.detach()), "conf": float(conf.detach()), "cls": float(cls.detach()), "total": float(layer_total.detach())})
    final = per_layer[-1]
    report = LossReport(
        reg=final["reg"],
        conf=final["conf"],
        cls=final["cls"],
        total=float(total.detach()),
        sigma=[float(s) for s in weights.sigma.detach()],
        per_layer=per_layer,
        selected=selected_indices(mask),
    )
    return total, report


# -- augmentation on batches --------------------------------------------------


def augment_batch(batch: Batch, rng: np.random.Generator, p_flip: float = 0.5, p_mask: float = 0.5) -> Batch:
    """Tensor-level counterpart of :func:`scene.augment_scenario` applied per
    scene: mirror x, and invalidate a random prefix (<= 10 steps)."""
    B = len(batch)
    flip = rng.random(B) < p_flip
    mask_len = np.where(rng.random(B) < p_mask, rng.integers(1, 11, B), 0)
    T = batch.hist.shape[2]
    mask_len = np.minimum(mask_len, T - 1)
    sign = torch.tensor(np.where(flip, -1.0, 1.0), dtype=batch.hist.dtype)

    hist = batch.hist.clone()
    hist[..., 0] *= sign.view(-1, 1, 1)
    vectors = batch.vectors.clone()
    vectors[..., 0] *= sign.view(-1, 1, 1)
    vectors[..., 2] *= sign.view(-1, 1, 1)
    future = None
    if batch.future is not None:
        future = batch.future.clone()
        future[..., 0] *= sign.view(-1, 1)

    steps = torch.arange(T)
    drop = steps[None, :] < torch.tensor(mask_len)[:, None]  # (B, T)
    hist_valid = batch.hist_valid & ~drop[:, None, :]
    vehicle_mask = batch.vehicle_mask & hist_valid.any(-1)
    vehicle_mask[:, 0] = True
    return Batch(batch.ids, hist, hist_valid, vehicle_mask, vectors, batch.vector_tags, batch.vector_valid, batch.polyline_mask, future)


# -- loop --------------------------------------------------------------------


@dataclass
class TrainState:
    model: MMTransformer
    weights: UncertaintyWeights
    optimizer: nx.OptimizerState
    config: TrainConfig
    partition: Optional[RegionPartition]
    proposal_map: ProposalRegionMap
    rng: np.random.Generator
    epoch: int = 0


def build_train_state(model: MMTransformer, config: TrainConfig, partition: Optional[RegionPartition] = None) -> TrainState:
    config.validate(model.config.K, partition)
    M = partition.M if (partition is not None and config.strategy == "rts") else 1
    pmap = map_proposals_to_regions(model.config.K, M)
    opt = nx.OptimizerState(lr=config.lr, weight_decay=config.weight_decay, max_norm=config.max_norm)
    return TrainState(
        model=model,
        weights=UncertaintyWeights(model.config.torch_dtype),
        optimizer=opt,
        config=config,
        partition=partition,
        proposal_map=pmap,
        rng=np.random.default_rng(config.seed),
    )


def _sigma_grad_mask(state: TrainState):
    # the classification weight stays fixed when that loss is disabled
    if state.config.strategy == "vanilla":
        return torch.tensor([1.0, 1.0, 0.0], dtype=state.weights.log_sigma.dtype)
    return None


def train_step(state: TrainState, batch: Batch) -> LossReport:
    cfg = state.config
    if batch.future is None:
        raise ContractError("training batch has no ground-truth futures")
    regions = None
    if cfg.strategy == "rts":
        regions = state.partition.assign(batch.future[:, -1].detach().double().numpy())
    output = state.model(batch)
    total, report = compute_losses(
        output, batch.future, cfg.strategy, state.weights, state.proposal_map, regions, cfg.huber_delta, batch.ids
    )
    params = list(state.model.parameters()) + [state.weights.log_sigma]
    grads = nx.compute_gradients(total, params)
    sigma_mask = _sigma_grad_mask(state)
    if sigma_mask is not None:
        grads[-1] = grads[-1] * sigma_mask
        keep = state.weights.log_sigma.detach().clone()
    try:
        nx.optimizer_step(params, grads, state.optimizer)
    except TrainingDivergenceError as exc:
        raise TrainingDivergenceError(f"{exc} in batch {batch.ids}") from exc
    if sigma_mask is not None:
        with torch.no_grad():
            state.weights.log_sigma[2] = keep[2]
    return report


def train_epoch(state: TrainState, scenes: Sequence[EncodedScene]) -> list:
    if not scenes:
        raise ContractError("cannot train on an empty dataset")
    cfg = state.config
    dtype = state.model.config.torch_dtype
    order = state.rng.permutation(len(scenes))
    state.optimizer.lr = cfg.learning_rate(state.epoch)
    reports = []
    for start in range(0, len(order), cfg.batch_size):
        batch = collate([scenes[i] for i in order[start : start + cfg.batch_size]], dtype)
        if cfg.augment:
            batch = augment_batch(batch, state.rng, cfg.p_flip, cfg.p_mask)
        reports.append(train_step(state, batch))
    state.epoch += 1
    return reports


def summarize_reports(reports: Sequence[LossReport], epoch: int, split: str = "train", extra: Optional[dict] = None) -> dict:
    keys = ("reg", "conf", "cls", "total")
    row = {"epoch": epoch, "split": split}
    for k in keys:
        row[k] = float(np.mean([getattr(r, k) for r in reports]))
    row["sigma"] = reports[-1].sigma
    row.update(extra or {})
    return row


def train(
    model: MMTransformer,
    scenarios,
    config: TrainConfig,
    partition: Optional[RegionPartition] = None,
    log_path=None,
    on_epoch: Optional[Callable[[TrainState, dict], None]] = None,
    checkpoint_path=None,
) -> TrainState:
    """Train on normalized scenarios; writes one JSON line per epoch to
    ``log_path`` when given, and every ``config.checkpoint_every`` epochs a
    checkpoint next to ``checkpoint_path`` (``<stem>.epochNNN.npz``)."""
    state = build_train_state(model, config, partition)
    scenes = [encode_scene(s, model.config) for s in scenarios]
    fh = open(log_path, "w") if log_path else None
    try:
        for _ in range(config.epochs):
            reports = train_epoch(state, scenes)
            row = summarize_reports(reports, state.epoch, extra={"seed": config.seed, "strategy": config.strategy, "lr": state.optimizer.lr})
            log.info("epoch %d reg %.4f conf %.4f cls %.4f total %.4f", row["epoch"], row["reg"], row["conf"], row["cls"], row["total"])
            if fh:
                fh.write(json.dumps(row) + "\n")
                fh.flush()
            if on_epoch:
                on_epoch(state, row)
            if checkpoint_path and config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
                stem = os.path.splitext(os.fspath(checkpoint_path))[0]
                save_checkpoint(model, f"{stem}.epoch{state.epoch:03d}.npz", {"seed": config.seed, "epoch": state.epoch, "train": config.to_dict()})
    finally:
        if fh:
            fh.close()
    return state


def build_model(config, seed: int = 0) -> MMTransformer:
    torch.manual_seed(seed)
    return MMTransformer(config)


def final_regression_loss(model: MMTransformer, scenes: Sequence[EncodedScene], strategy: str, proposal_map, partition=None, delta: float = 1.0) -> float:
    """Final-head regression loss over ``scenes`` without augmentation."""
    with torch.no_grad():
        batch = collate(scenes, model.config.torch_dtype)
        out = model(batch)
        regions = None
        if strategy == "rts":
            regions = partition.assign(batch.future[:, -1].double().numpy())
        mask = select_supervised_proposals(out.trajectories, batch.future, strategy, proposal_map, regions)
        return float(regression_loss(out.trajectories, batch.future, mask, delta))
