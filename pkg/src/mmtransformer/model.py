"""Stacked transformers refining a fixed set of trajectory proposals.

Pipeline for one scene (target is vehicle 0):

    histories --MotionExtractor--> (V, K, H) per-vehicle proposal features
    map       --MapAggregator----> (V, K, H) refined against the lane memory
    summarize (mean over K + MLP)  (V, H) vehicle features
    SocialConstructor decoder ---> (K, H) target features, one per layer
    ProposalHead per layer ------> K trajectories (T, 2) and K scores

Everything runs batched over scenes with padding masks.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import numerics as nx
from .errors import ConfigError, ContractError, SchemaError
from .scene import MAP_TAGS, PolylineSet, Scenario, crop_and_vectorize_map

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class ModelConfig:
    hidden_dim: int = 128
    encoder_layers: int = 2
    decoder_layers: int = 2
    social_decoder_layers: int = 4
    heads: int = 2
    ffn_mult: int = 2
    K: int = 6
    M: int = 1
    t_obs: int = 20
    t_future: int = 30
    coord_scale: float = 10.0  # inputs are divided / outputs multiplied by this
    map_window: float = 65.0
    skip_first_self_attn: bool = True
    norm_first: bool = True
    dtype: str = "float32"

    def validate(self) -> "ModelConfig":
        if self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim={self.hidden_dim} not divisible by heads={self.heads}")
        if self.M < 1 or self.K % self.M:
            raise ConfigError(f"K={self.K} not divisible by M={self.M}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        for name in ("encoder_layers", "decoder_layers", "social_decoder_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        return self

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class PredictionSet:
    """K trajectories in the normalized frame plus raw selector scores."""

    trajectories: np.ndarray  # (K, T, 2)
    scores: np.ndarray  # (K,)

    def __post_init__(self):
        if len(self.trajectories) != len(self.scores):
            raise ContractError("trajectory count and score count differ")

    @property
    def endpoints(self) -> np.ndarray:
        return self.trajectories[:, -1, :]

    def probabilities(self) -> np.ndarray:
        z = self.scores - self.scores.max()
        e = np.exp(z)
        return e / e.sum()


# -- batching ----------------------------------------------------------------


@dataclass
class EncodedScene:
    """Per-scene arrays ready for padding into a batch."""

    id: str
    hist: np.ndarray  # (V, T_obs, 2)
    hist_valid: np.ndarray  # (V, T_obs)
    vectors: np.ndarray  # (P, L, 4)
    vector_tags: np.ndarray  # (P, L)
    vector_valid: np.ndarray  # (P, L)
    future: Optional[np.ndarray]


def encode_scene(scenario: Scenario, config: ModelConfig, polylines: Optional[PolylineSet] = None) -> EncodedScene:
    if not scenario.normalized:
        raise ContractError(f"scenario {scenario.id} must be normalized")
    if not scenario.target_valid.any():
        raise ContractError(f"scenario {scenario.id}: empty target history")
    if len(scenario.target_history) != config.t_obs:
        raise ContractError(f"scenario {scenario.id}: history length {len(scenario.target_history)} != t_obs {config.t_obs}")
    hist = [scenario.target_history]
    valid = [scenario.target_valid]
    for n in scenario.neighbor_histories:
        if n.valid.any() and len(n.points) == config.t_obs:
            hist.append(n.points)
            valid.append(n.valid)
    if polylines is None:
        polylines = crop_and_vectorize_map(scenario, config.map_window)
    groups = polylines.groups()
    L = max((len(g) for g in groups), default=0)
    P = len(groups)
    vectors = np.zeros((P, L, 4))
    tags = np.zeros((P, L), dtype=np.int64)
    vvalid = np.zeros((P, L), dtype=bool)
    for i, g in enumerate(groups):
        vectors[i, : len(g)] = polylines.vectors[g]
        tags[i, : len(g)] = polylines.tags[g]
        vvalid[i, : len(g)] = True
    return EncodedScene(
        scenario.id,
        np.stack(hist).astype(np.float64),
        np.stack(valid).astype(bool),
        vectors,
        tags,
        vvalid,
        None if scenario.future is None else np.asarray(scenario.future, dtype=np.float64),
    )


@dataclass
class Batch:
    ids: list
    hist: torch.Tensor  # (B, V, T_obs, 2) meters
    hist_valid: torch.Tensor  # (B, V, T_obs)
    vehicle_mask: torch.Tensor  # (B, V)
    vectors: torch.Tensor  # (B, P, L, 4) meters
    vector_tags: torch.Tensor  # (B, P, L)
    vector_valid: torch.Tensor  # (B, P, L)
    polyline_mask: torch.Tensor  # (B, P)
    future: Optional[torch.Tensor]  # (B, T, 2)

    def __len__(self):
        return len(self.ids)

    @property
    def has_map(self) -> torch.Tensor:
        return self.polyline_mask.any(dim=-1)


def collate(scenes: Sequence[EncodedScene], dtype=torch.float64) -> Batch:
    B = len(scenes)
    V = max(len(s.hist) for s in scenes)
    T = scenes[0].hist.shape[1]
    P = max(max(len(s.vectors) for s in scenes), 1)
    L = max(max((s.vectors.shape[1] for s in scenes), default=1), 1)
    hist = np.zeros((B, V, T, 2))
    hv = np.zeros((B, V, T), dtype=bool)
    vm = np.zeros((B, V), dtype=bool)
    vec = np.zeros((B, P, L, 4))
    tags = np.zeros((B, P, L), dtype=np.int64)
    vv = np.zeros((B, P, L), dtype=bool)
    for b, s in enumerate(scenes):
        n = len(s.hist)
        hist[b, :n] = s.hist
        hv[b, :n] = s.hist_valid
        vm[b, :n] = True
        p, l = s.vectors.shape[:2]
        vec[b, :p, :l] = s.vectors
        tags[b, :p, :l] = s.vector_tags
        vv[b, :p, :l] = s.vector_valid
    has_future = all(s.future is not None for s in scenes)
    future = torch.tensor(np.stack([s.future for s in scenes]), dtype=dtype) if has_future else None
    return Batch(
        ids=[s.id for s in scenes],
        hist=torch.tensor(hist, dtype=dtype),
        hist_valid=torch.tensor(hv),
        vehicle_mask=torch.tensor(vm),
        vectors=torch.tensor(vec, dtype=dtype),
        vector_tags=torch.tensor(tags),
        vector_valid=torch.tensor(vv),
        polyline_mask=torch.tensor(vv.any(-1)),
        future=future,
    )


def make_batch(scenarios: Sequence[Scenario], config: ModelConfig) -> Batch:
    return collate([encode_scene(s, config) for s in scenarios], config.torch_dtype)


# -- transformer layers ------------------------------------------------------


def _with_pos(x, pos):
    return x if pos is None else x + pos


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_mult: int, norm_first: bool = True):
        super().__init__()
        self.norm_first = norm_first
        self.attn = nx.MultiHeadAttention(dim, heads)
        self.ffn = nx.MLP([dim, ffn_mult * dim, dim])
        self.norm1 = nx.LayerNorm(dim)
        self.norm2 = nx.LayerNorm(dim)

    def forward(self, src, pos=None, mask=None):
        if self.norm_first:
            x = self.norm1(src)
            q = _with_pos(x, pos)
            src = src + self.attn(q, q, x, mask)
            return src + self.ffn(self.norm2(src))
        q = _with_pos(src, pos)
        src = self.norm1(src + self.attn(q, q, src, mask))
        return self.norm2(src + self.ffn(src))


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_mult: int, self_attn: bool = True, norm_first: bool = True):
        super().__init__()
        self.norm_first = norm_first
        self.self_attn = nx.MultiHeadAttention(dim, heads) if self_attn else None
        self.cross_attn = nx.MultiHeadAttention(dim, heads)
        self.ffn = nx.MLP([dim, ffn_mult * dim, dim])
        self.norm1 = nx.LayerNorm(dim) if self_attn else None
        self.norm2 = nx.LayerNorm(dim)
        self.norm3 = nx.LayerNorm(dim)

    def forward(self, tgt, query_pos, memory, memory_pos=None, memory_mask=None):
        if self.norm_first:
            if self.self_attn is not None:
                x = self.norm1(tgt)
                q = _with_pos(x, query_pos)
                tgt = tgt + self.self_attn(q, q, x)
            x = self.norm2(tgt)
            tgt = tgt + self.cross_attn(_with_pos(x, query_pos), _with_pos(memory, memory_pos), memory, memory_mask)
            return tgt + self.ffn(self.norm3(tgt))
        if self.self_attn is not None:
            q = _with_pos(tgt, query_pos)
            tgt = self.norm1(tgt + self.self_attn(q, q, tgt))
        attended = self.cross_attn(_with_pos(tgt, query_pos), _with_pos(memory, memory_pos), memory, memory_mask)
        tgt = self.norm2(tgt + attended)
        return self.norm3(tgt + self.ffn(tgt))


class Transformer(nn.Module):
    """Encoder/decoder stack. With ``norm_first`` the encoder memory and
    every decoder output pass through a closing LayerNorm."""

    def __init__(self, dim, heads, ffn_mult, enc_layers, dec_layers, skip_first_self_attn=False, norm_first=True):
        super().__init__()
        self.norm_first = norm_first
        self.encoder = nn.ModuleList(EncoderLayer(dim, heads, ffn_mult, norm_first) for _ in range(enc_layers))
        self.decoder = nn.ModuleList(
            DecoderLayer(dim, heads, ffn_mult, not (skip_first_self_attn and i == 0), norm_first) for i in range(dec_layers)
        )
        if norm_first:
            self.memory_norm = nx.LayerNorm(dim)
            self.output_norm = nx.LayerNorm(dim)

    def encode(self, src, pos=None, mask=None):
        for layer in self.encoder:
            src = layer(src, pos, mask)
        return self.memory_norm(src) if self.norm_first else src

    def decode(self, tgt, query_pos, memory, memory_pos=None, memory_mask=None) -> list:
        """Returns the (normalized) output of every decoder layer; ``tgt``
        itself keeps flowing through the un-normalized residual stream."""
        outs = []
        for layer in self.decoder:
            tgt = layer(tgt, query_pos, memory, memory_pos, memory_mask)
            outs.append(self.output_norm(tgt) if self.norm_first else tgt)
        return outs


# -- stacked modules ---------------------------------------------------------


class MotionExtractor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        H = cfg.hidden_dim
        self.scale = cfg.coord_scale
        self.input = nx.Linear(3, H)
        self.time_pos = nn.Parameter(torch.empty(cfg.t_obs, H))
        nn.init.xavier_uniform_(self.time_pos)
        self.transformer = Transformer(H, cfg.heads, cfg.ffn_mult, cfg.encoder_layers, cfg.decoder_layers, cfg.skip_first_self_attn, cfg.norm_first)

    def forward(self, hist, hist_valid, proposal_emb):
        """hist (B, V, T, 2), hist_valid (B, V, T) -> (B, V, K, H)."""
        if not bool(hist_valid.any(-1).all()):
            raise ContractError("a vehicle has an empty history")
        x = torch.cat([hist / self.scale, hist_valid.to(hist.dtype).unsqueeze(-1)], dim=-1)
        src = self.input(x)
        memory = self.transformer.encode(src, self.time_pos, hist_valid)
        B, V = hist.shape[:2]
        tgt = proposal_emb.expand(B, V, *proposal_emb.shape)
        return self.transformer.decode(tgt, proposal_emb, memory, self.time_pos, hist_valid)[-1]


class PolylineEncoder(nn.Module):
    """Shared per-vector MLP followed by a max over each polyline's vectors."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        H = cfg.hidden_dim
        self.scale = cfg.coord_scale
        self.num_tags = len(MAP_TAGS)
        self.mlp = nx.MLP([4 + self.num_tags, H, H], final_activation=True)

    def forward(self, vectors, tags, valid):
        """vectors (..., P, L, 4) -> (..., P, H); fully padded polylines give zeros."""
        onehot = torch.nn.functional.one_hot(tags, self.num_tags).to(vectors.dtype)
        feats = self.mlp(torch.cat([vectors / self.scale, onehot], dim=-1))
        feats = feats.masked_fill(~valid.unsqueeze(-1), float("-inf"))
        pooled = feats.max(dim=-2).values
        return torch.where(valid.any(-1, keepdim=True), pooled, torch.zeros_like(pooled))


class MapAggregator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        H = cfg.hidden_dim
        self.polylines = PolylineEncoder(cfg)
        self.transformer = Transformer(H, cfg.heads, cfg.ffn_mult, cfg.encoder_layers, cfg.decoder_layers, norm_first=cfg.norm_first)

    def encode_map(self, vectors, tags, valid, polyline_mask):
        feats = self.polylines(vectors, tags, valid)
        # scenes without map keep one dummy key so attention stays defined;
        # their aggregator output is discarded below
        has_map = polyline_mask.any(-1, keepdim=True)
        mask = polyline_mask.clone()
        mask[..., 0] |= ~has_map[..., 0]
        return self.transformer.encode(feats, None, mask), mask

    def forward(self, proposals, proposal_emb, memory, memory_mask, has_map):
        """proposals (B, V, K, H); memory (B, P, H) shared by all vehicles."""
        out = self.transformer.decode(proposals, proposal_emb, memory.unsqueeze(1), None, memory_mask.unsqueeze(1))[-1]
        return torch.where(has_map.view(-1, 1, 1, 1), out, proposals)


class SocialConstructor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        H = cfg.hidden_dim
        self.summary = nx.MLP([H, H, H])
        self.target_flag = nn.Parameter(torch.empty(1, H))
        nn.init.xavier_uniform_(self.target_flag)
        self.transformer = Transformer(H, cfg.heads, cfg.ffn_mult, cfg.encoder_layers, cfg.social_decoder_layers, norm_first=cfg.norm_first)

    def summarize(self, proposals):
        """(..., K, H) -> (..., H): mean over proposals, then an MLP."""
        return self.summary(proposals.mean(dim=-2))

    def forward(self, proposals, proposal_emb, vehicle_mask) -> list:
        vehicles = self.summarize(proposals)  # (B, V, H)
        flag = torch.zeros_like(vehicles[..., :1])
        flag[:, 0] = 1.0
        vehicles = vehicles + flag * self.target_flag
        memory = self.transformer.encode(vehicles, None, vehicle_mask)
        target = proposals[:, 0]  # (B, K, H)
        return self.transformer.decode(target, proposal_emb, memory, None, vehicle_mask)


class ProposalHead(nn.Module):
    """Trajectory generator and selector, three-layer MLPs sharing nothing."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        H = cfg.hidden_dim
        self.T = cfg.t_future
        self.scale = cfg.coord_scale
        self.generator = nx.MLP([H, H, H, 2 * cfg.t_future])
        self.selector = nx.MLP([H, H, H, 1])

    def forward(self, features):
        traj = self.generator(features) * self.scale
        traj = traj.reshape(*features.shape[:-1], self.T, 2)
        return traj, self.selector(features).squeeze(-1)


@dataclass
class ModelOutput:
    layers: list  # [(trajectories (B, K, T, 2), scores (B, K))] one per social decoder layer

    @property
    def trajectories(self):
        return self.layers[-1][0]

    @property
    def scores(self):
        return self.layers[-1][1]

    def prediction_sets(self, layer: int = -1) -> list:
        traj, scores = self.layers[layer]
        t = traj.detach().cpu().double().numpy()
        s = scores.detach().cpu().double().numpy()
        return [PredictionSet(t[b], s[b]) for b in range(len(t))]


class MMTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        H = config.hidden_dim
        # unit-variance init keeps proposals distinguishable next to
        # layer-normed context features
        self.proposals = nn.Parameter(torch.randn(config.K, H))
        self.motion = MotionExtractor(config)
        self.map = MapAggregator(config)
        self.social = SocialConstructor(config)
        self.heads = nn.ModuleList(ProposalHead(config) for _ in range(config.social_decoder_layers))
        self.to(config.torch_dtype)

    def encode_motion(self, batch: Batch):
        hist_valid = batch.hist_valid | ~batch.vehicle_mask.unsqueeze(-1)
        return self.motion(batch.hist, hist_valid, self.proposals)

    def aggregate_map(self, batch: Batch, proposals):
        memory, mask = self.map.encode_map(batch.vectors, batch.vector_tags, batch.vector_valid, batch.polyline_mask)
        return self.map(proposals, self.proposals, memory, mask, batch.has_map)

    def encode_polylines(self, batch: Batch):
        return self.map.polylines(batch.vectors, batch.vector_tags, batch.vector_valid)

    def summarize_vehicle_feature(self, proposals):
        return self.social.summarize(proposals)

    def construct_social(self, batch: Batch, proposals) -> list:
        return self.social(proposals, self.proposals, batch.vehicle_mask)

    def decode_proposals(self, features, layer: int = -1):
        return self.heads[layer](features)

    def forward(self, batch: Batch) -> ModelOutput:
        feats = self.encode_motion(batch)
        feats = self.aggregate_map(batch, feats)
        per_layer = self.social(feats, self.proposals, batch.vehicle_mask)
        return ModelOutput([head(f) for head, f in zip(self.heads, per_layer)])

    @torch.no_grad()
    def predict(self, scenarios: Sequence[Scenario], batch_size: int = 64) -> list:
        out = []
        for i in range(0, len(scenarios), batch_size):
            batch = make_batch(scenarios[i : i + batch_size], self.config)
            out.extend(self(batch).prediction_sets())
        return out


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(model: MMTransformer, path, extra: Optional[dict] = None) -> None:
    """npz container: one array per named parameter plus a JSON ``__meta__``
    entry with the config, shapes and any ``extra`` (seed, partition ...)."""
    import io
    import os
    import tempfile

    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {
        "config": model.config.to_dict(),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        **(extra or {}),
    }
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.array(json.dumps(meta)), **state)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    with os.fdopen(fd, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None):
    """Returns ``(model, meta)``. Raises ConfigError when ``expected_config``
    disagrees with the stored one."""
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data:
            raise SchemaError("checkpoint has no __meta__ entry", field="__meta__")
        meta = json.loads(str(data["__meta__"]))
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    config = ModelConfig.from_dict(meta["config"])
    if expected_config is not None and expected_config.to_dict() != config.to_dict():
        diff = sorted(k for k, v in config.to_dict().items() if expected_config.to_dict().get(k) != v)
        raise ConfigError(f"checkpoint config mismatch in fields: {diff}")
    model = MMTransformer(config)
    own = model.state_dict()
    if set(own) != set(arrays):
        raise SchemaError("checkpoint parameter names do not match the model")
    for k, arr in arrays.items():
        if list(arr.shape) != list(own[k].shape):
            raise SchemaError(f"shape mismatch for {k}", field=k)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return model, meta
