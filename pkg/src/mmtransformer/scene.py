"""Scenario representation, target-centric normalization, map vectorization,
augmentation, the synthetic junction generator and JSONL persistence."""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ParseError, SchemaError

log = logging.getLogger(__name__)

MAP_TAGS = ("lane", "connector", "other")
STATIONARY_STEP = 1e-3  # meters; shorter last steps fall back to the long baseline


@dataclass(frozen=True)
class NormalizationFrame:
    """Rigid transform ``p' = R(rotation) (p - origin)``."""

    origin: tuple = (0.0, 0.0)
    rotation: float = 0.0

    def _matrix(self, angle: float) -> np.ndarray:
        c, s = math.cos(angle), math.sin(angle)
        return np.array([[c, -s], [s, c]])

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        if pts.size == 0:
            return pts.reshape(*pts.shape[:-1], 2) if pts.ndim else pts
        return (pts - np.asarray(self.origin)) @ self._matrix(self.rotation).T

    def invert(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        if pts.size == 0:
            return pts
        return pts @ self._matrix(-self.rotation).T + np.asarray(self.origin)


@dataclass
class Neighbor:
    points: np.ndarray  # (T_obs, 2)
    valid: np.ndarray  # (T_obs,) bool


@dataclass
class Polyline:
    points: np.ndarray  # (p, 2)
    tag: str = "lane"


@dataclass
class Scenario:
    id: str
    target_history: np.ndarray  # (T_obs, 2)
    neighbor_histories: list = field(default_factory=list)
    map_polylines: list = field(default_factory=list)
    future: Optional[np.ndarray] = None  # (T, 2)
    frame: NormalizationFrame = field(default_factory=NormalizationFrame)
    target_valid: Optional[np.ndarray] = None
    mode_label: Optional[str] = None
    flags: tuple = ()

    def __post_init__(self):
        self.target_history = np.asarray(self.target_history, dtype=np.float64)
        if self.target_valid is None:
            self.target_valid = np.ones(len(self.target_history), dtype=bool)
        else:
            self.target_valid = np.asarray(self.target_valid, dtype=bool)
        if self.future is not None:
            self.future = np.asarray(self.future, dtype=np.float64)

    @property
    def normalized(self) -> bool:
        return "normalized" in self.flags


@dataclass
class PolylineSet:
    """Map vectors. ``vectors[i] = (x0, y0, x1, y1)``; ``tags[i]`` indexes
    :data:`MAP_TAGS`; ``polyline_index[i]`` groups vectors into polylines."""

    vectors: np.ndarray
    tags: np.ndarray
    polyline_index: np.ndarray
    num_polylines: int

    @classmethod
    def empty(cls) -> "PolylineSet":
        return cls(np.zeros((0, 4)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), 0)

    def groups(self) -> list:
        return [np.flatnonzero(self.polyline_index == i) for i in range(self.num_polylines)]


@dataclass
class Dataset:
    scenarios: list
    split: str = "train"
    seed: Optional[int] = None
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.scenarios)

    def __iter__(self):
        return iter(self.scenarios)

    def __getitem__(self, i):
        return self.scenarios[i]


# -- normalization -----------------------------------------------------------


def _heading(points: np.ndarray, valid: np.ndarray):
    pts = points[valid]
    if len(pts) < 2:
        return None
    step = pts[-1] - pts[-2]
    if np.hypot(*step) > STATIONARY_STEP:
        return step
    baseline = pts[-1] - pts[0]
    if np.hypot(*baseline) > 1e-9:
        return baseline
    return None


def _map_scenario(scenario: Scenario, fn) -> dict:
    return dict(
        target_history=fn(scenario.target_history),
        neighbor_histories=[Neighbor(fn(n.points), n.valid.copy()) for n in scenario.neighbor_histories],
        map_polylines=[Polyline(fn(p.points), p.tag) for p in scenario.map_polylines],
        future=None if scenario.future is None else fn(scenario.future),
    )


def normalize_scenario(raw: Scenario) -> Scenario:
    """Move the target's last observed point to the origin and rotate its
    heading onto +y. Composes with any frame already recorded on ``raw``."""
    valid = raw.target_valid
    if not valid.any():
        raise ContractError(f"scenario {raw.id}: target has no valid history")
    last = raw.target_history[valid][-1]
    heading = _heading(raw.target_history, valid)
    flags = set(raw.flags)
    if heading is None:
        rotation = 0.0
        flags.add("stationary")
        log.warning("scenario %s: stationary target, heading defaults to rotation 0", raw.id)
    else:
        rotation = math.pi / 2 - math.atan2(heading[1], heading[0])
    local = NormalizationFrame(tuple(float(v) for v in last), rotation)
    flags.add("normalized")

    # Compose with the previous frame so denormalization returns to world.
    prev = raw.frame
    world_origin = prev.invert(np.asarray(local.origin))
    frame = NormalizationFrame(
        tuple(float(v) for v in world_origin),
        math.remainder(prev.rotation + rotation, 2 * math.pi),
    )
    return replace(
        raw,
        **_map_scenario(raw, local.apply),
        frame=frame,
        target_valid=raw.target_valid.copy(),
        flags=tuple(sorted(flags)),
    )


def denormalize_trajectory(traj, frame: NormalizationFrame) -> np.ndarray:
    return frame.invert(traj)


# -- map cropping ------------------------------------------------------------


def clip_segment(p0, p1, half: float):
    """Liang-Barsky clip of segment p0-p1 against the box [-half, half]^2.

    Returns the clipped ``(q0, q1)`` or ``None`` when the segment misses
    the box entirely.
    """
    x0, y0 = p0
    dx, dy = p1[0] - x0, p1[1] - y0
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, x0 + half), (dx, half - x0), (-dy, y0 + half), (dy, half - y0)):
        if p == 0:
            if q < 0:
                return None
            continue
        r = q / p
        if p < 0:
            if r > t1:
                return None
            t0 = max(t0, r)
        else:
            if r < t0:
                return None
            t1 = min(t1, r)
    q0 = np.array([x0 + t0 * dx, y0 + t0 * dy])
    q1 = np.array([x0 + t1 * dx, y0 + t1 * dy])
    return np.clip(q0, -half, half), np.clip(q1, -half, half)


def vectorize_polylines(polylines: Sequence[Polyline]) -> PolylineSet:
    """Unclipped vectorization: p points give p-1 vectors."""
    return _vectorize(polylines, None)


def _vectorize(polylines, half):
    vectors, tags, index = [], [], []
    count = 0
    for poly in polylines:
        pts = np.asarray(poly.points, dtype=np.float64)
        tag = MAP_TAGS.index(poly.tag) if poly.tag in MAP_TAGS else len(MAP_TAGS) - 1
        kept = []
        for a, b in zip(pts[:-1], pts[1:]):
            if half is None:
                kept.append(np.concatenate([a, b]))
                continue
            clipped = clip_segment(a, b, half)
            if clipped is not None:
                kept.append(np.concatenate(clipped))
        if kept:
            vectors.extend(kept)
            tags.extend([tag] * len(kept))
            index.extend([count] * len(kept))
            count += 1
    if not vectors:
        return PolylineSet.empty()
    return PolylineSet(np.array(vectors), np.array(tags, dtype=np.int64), np.array(index, dtype=np.int64), count)


def crop_and_vectorize_map(scenario: Scenario, window_meters: float = 65.0) -> PolylineSet:
    """Clip every map segment to the square window centred at the origin."""
    if not scenario.normalized:
        raise ContractError(f"scenario {scenario.id} must be normalized before cropping")
    out = _vectorize(scenario.map_polylines, window_meters / 2.0)
    if out.num_polylines == 0:
        log.info("scenario %s: map empty after %.1f m crop", scenario.id, window_meters)
    return out


# -- augmentation ------------------------------------------------------------


def flip_scenario(scenario: Scenario) -> Scenario:
    def flip(pts):
        pts = np.array(pts, dtype=np.float64, copy=True)
        if pts.size:
            pts[..., 0] = -pts[..., 0]
        return pts

    return replace(scenario, **_map_scenario(scenario, flip), target_valid=scenario.target_valid.copy())


def mask_history_prefix(scenario: Scenario, length: int) -> Scenario:
    """Invalidate the first ``length`` (<= 10) history steps of every vehicle."""
    length = int(min(max(length, 0), 10, len(scenario.target_history) - 1))
    tv = scenario.target_valid.copy()
    tv[:length] = False
    neighbors = []
    for n in scenario.neighbor_histories:
        v = n.valid.copy()
        v[:length] = False
        neighbors.append(Neighbor(n.points.copy(), v))
    return replace(scenario, target_valid=tv, neighbor_histories=neighbors)


def augment_scenario(scenario: Scenario, rng: np.random.Generator, p_flip: float = 0.5, p_mask: float = 0.5) -> Scenario:
    if not scenario.normalized:
        raise ContractError(f"scenario {scenario.id} must be normalized before augmentation")
    out = scenario
    if rng.random() < p_flip:
        out = flip_scenario(out)
    if rng.random() < p_mask:
        out = mask_history_prefix(out, int(rng.integers(1, 11)))
    return out


# -- synthetic junction scenarios --------------------------------------------


@dataclass
class SyntheticConfig:
    """Knobs of the synthetic junction generator.

    The target approaches a junction along a straight lane at constant
    speed, then turns left, goes straight or turns right. The history is
    identical in distribution across the three outcomes, so the future is
    genuinely multimodal.
    """

    num_scenarios: int = 3000
    modes: tuple = ("left", "straight", "right")
    mode_weights: Optional[tuple] = None
    t_obs: int = 20
    t_future: int = 30
    dt: float = 0.1
    speed_range: tuple = (6.0, 10.0)
    accel_range: tuple = (-0.3, 0.3)
    junction_distance: tuple = (10.0, 20.0)
    turn_radius: tuple = (6.0, 10.0)
    position_noise: float = 0.01
    max_neighbors: int = 3
    world_extent: float = 100.0
    lane_length: float = 70.0
    lane_spacing: float = 2.0
    id_prefix: str = "s"

    def validate(self):
        if len(self.modes) == 0:
            raise ConfigError("synthetic config needs at least one mode")
        unknown = set(self.modes) - {"left", "straight", "right"}
        if unknown:
            raise ConfigError(f"unknown synthetic modes: {sorted(unknown)}")
        if self.num_scenarios < 0 or self.t_obs < 2 or self.t_future < 1:
            raise ConfigError("scenario count, t_obs (>=2) and t_future (>=1) must be positive")
        if self.mode_weights is not None and len(self.mode_weights) != len(self.modes):
            raise ConfigError("mode_weights must match modes")
        if self.junction_distance[0] < self.turn_radius[1]:
            raise ConfigError("junction_distance must exceed the largest turn radius")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in known})


def _path_point(mode: str, s: np.ndarray, d: float, radius: float) -> np.ndarray:
    """Position after arc length ``s`` from (0, -d), heading +y, in the
    junction frame (junction centre at the origin)."""
    s = np.asarray(s, dtype=np.float64)
    if mode == "straight":
        return np.stack([np.zeros_like(s), -d + s], axis=-1)
    sign = -1.0 if mode == "left" else 1.0
    lead = d - radius
    arc = math.pi * radius / 2
    out = np.empty(s.shape + (2,))
    before = s <= lead
    out[before, 0] = 0.0
    out[before, 1] = -d + s[before]
    u = s - lead
    turning = (~before) & (u <= arc)
    phi = u[turning] / radius
    out[turning, 0] = sign * (radius - radius * np.cos(phi))
    out[turning, 1] = -radius + radius * np.sin(phi)
    after = (~before) & (~turning)
    out[after, 0] = sign * (radius + (u[after] - arc))
    out[after, 1] = 0.0
    return out


def _sample_line(a, b, spacing):
    a, b = np.asarray(a, float), np.asarray(b, float)
    n = max(int(math.ceil(np.linalg.norm(b - a) / spacing)), 1)
    t = np.linspace(0.0, 1.0, n + 1)[:, None]
    return a + t * (b - a)


def _junction_map(radius: float, cfg: SyntheticConfig) -> list:
    L, sp = cfg.lane_length, cfg.lane_spacing
    polys = [
        Polyline(_sample_line((0, -L), (0, -radius), sp), "lane"),
        Polyline(_sample_line((0, -radius), (0, L), sp), "lane"),
        Polyline(_sample_line((-3.5, L), (-3.5, -L), sp), "lane"),
        Polyline(_sample_line((L, 3.5), (-L, 3.5), sp), "lane"),
    ]
    phi = np.linspace(0.0, math.pi / 2, 9)
    for sign in (-1.0, 1.0):
        arc = np.stack([sign * (radius - radius * np.cos(phi)), -radius + radius * np.sin(phi)], axis=-1)
        polys.append(Polyline(arc, "connector"))
        polys.append(Polyline(_sample_line((sign * radius, 0.0), (sign * L, 0.0), sp), "lane"))
    return polys


def _neighbor(rng, cfg: SyntheticConfig, t_hist: np.ndarray) -> Neighbor:
    L = cfg.lane_length
    lane = rng.integers(0, 3)
    speed = rng.uniform(*cfg.speed_range)
    if lane == 0:  # oncoming lane, moving -y
        start, direction = np.array([-3.5, rng.uniform(5, 40)]), np.array([0.0, -1.0])
    elif lane == 1:  # cross road, moving -x
        start, direction = np.array([rng.uniform(5, 40), 3.5]), np.array([-1.0, 0.0])
    else:  # cross road, moving +x
        start, direction = np.array([rng.uniform(-40, -5), 0.0]), np.array([1.0, 0.0])
    pts = start + (t_hist[:, None] * speed) * direction
    pts = np.clip(pts, -L, L) + rng.normal(0.0, cfg.position_noise, pts.shape)
    valid = np.ones(len(t_hist), dtype=bool)
    if rng.random() < 0.3:
        valid[: rng.integers(1, len(t_hist) // 2)] = False
        pts[~valid] = 0.0
    return Neighbor(pts, valid)


def generate_scenario(cfg: SyntheticConfig, seed: int, index: int, split: str = "train") -> Scenario:
    rng = np.random.default_rng([seed, index, {"train": 0, "val": 1, "test": 2}.get(split, 3)])
    weights = None if cfg.mode_weights is None else np.asarray(cfg.mode_weights, float) / sum(cfg.mode_weights)
    mode = str(cfg.modes[rng.choice(len(cfg.modes), p=weights)])
    speed = rng.uniform(*cfg.speed_range)
    accel = rng.uniform(*cfg.accel_range)
    d = rng.uniform(*cfg.junction_distance)
    radius = rng.uniform(*cfg.turn_radius)

    t_hist = (np.arange(cfg.t_obs) - (cfg.t_obs - 1)) * cfg.dt  # ends at 0
    hist = np.stack([np.zeros(cfg.t_obs), -d + speed * t_hist], axis=-1)
    t_fut = np.arange(1, cfg.t_future + 1) * cfg.dt
    s = np.maximum(speed * t_fut + 0.5 * accel * t_fut**2, 0.0)
    fut = _path_point(mode, s, d, radius)
    hist = hist + rng.normal(0.0, cfg.position_noise, hist.shape)
    fut = fut + rng.normal(0.0, cfg.position_noise, fut.shape)

    neighbors = [_neighbor(rng, cfg, t_hist) for _ in range(rng.integers(0, cfg.max_neighbors + 1))]
    polys = _junction_map(radius, cfg)

    theta = rng.uniform(0.0, 2 * math.pi)
    origin = rng.uniform(-cfg.world_extent, cfg.world_extent, 2)
    to_world = NormalizationFrame(tuple(origin), theta)  # invert() maps junction -> world
    w = to_world.invert
    return Scenario(
        id=f"{cfg.id_prefix}{split}-{index:06d}",
        target_history=w(hist),
        neighbor_histories=[Neighbor(np.where(n.valid[:, None], w(n.points), 0.0), n.valid) for n in neighbors],
        map_polylines=[Polyline(w(p.points), p.tag) for p in polys],
        future=w(fut),
        mode_label=mode,
    )


def generate_synthetic_dataset(config: SyntheticConfig, seed: int, split: str = "train") -> Dataset:
    config.validate()
    scenarios = [generate_scenario(config, seed, i, split) for i in range(config.num_scenarios)]
    return Dataset(scenarios, split=split, seed=seed, config=config.to_dict())


# -- persistence -------------------------------------------------------------


def _points(rec, name, lineno, required=True):
    if name not in rec or rec[name] is None:
        if required:
            raise SchemaError(f"line {lineno}: missing required field '{name}'", field=name, line=lineno)
        return None
    arr = np.asarray(rec[name], dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise SchemaError(f"line {lineno}: field '{name}' must be a list of [x, y] pairs", field=name, line=lineno)
    return arr


def scenario_to_record(s: Scenario) -> dict:
    rec = {
        "id": s.id,
        "target_history": s.target_history.tolist(),
        "neighbor_histories": [{"points": n.points.tolist(), "valid": n.valid.tolist()} for n in s.neighbor_histories],
        "map_polylines": [{"points": np.asarray(p.points).tolist(), "tag": p.tag} for p in s.map_polylines],
    }
    if not s.target_valid.all():
        rec["target_valid"] = s.target_valid.tolist()
    if s.future is not None:
        rec["future"] = s.future.tolist()
    if s.mode_label is not None:
        rec["mode_label"] = s.mode_label
    return rec


def record_to_scenario(rec: dict, lineno: int = 0) -> Scenario:
    if "id" not in rec:
        raise SchemaError(f"line {lineno}: missing required field 'id'", field="id", line=lineno)
    hist = _points(rec, "target_history", lineno)
    neighbors = []
    for n in rec.get("neighbor_histories", []):
        if "points" not in n:
            raise SchemaError(f"line {lineno}: neighbor missing 'points'", field="neighbor_histories.points", line=lineno)
        pts = np.asarray(n["points"], dtype=np.float64).reshape(-1, 2)
        valid = np.asarray(n.get("valid", [True] * len(pts)), dtype=bool)
        neighbors.append(Neighbor(pts, valid))
    polys = []
    for p in rec.get("map_polylines", []):
        if "points" not in p:
            raise SchemaError(f"line {lineno}: polyline missing 'points'", field="map_polylines.points", line=lineno)
        polys.append(Polyline(np.asarray(p["points"], dtype=np.float64).reshape(-1, 2), p.get("tag", "lane")))
    return Scenario(
        id=str(rec["id"]),
        target_history=hist,
        neighbor_histories=neighbors,
        map_polylines=polys,
        future=_points(rec, "future", lineno, required=False),
        target_valid=rec.get("target_valid"),
        mode_label=rec.get("mode_label"),
    )


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(path, dataset: Dataset) -> None:
    ids = [s.id for s in dataset.scenarios]
    if len(set(ids)) != len(ids):
        raise SchemaError("scenario ids must be unique within a split", field="id")
    meta = {"_meta": {"split": dataset.split, "seed": dataset.seed, "config": dataset.config}}
    lines = [json.dumps(meta)] + [json.dumps(scenario_to_record(s)) for s in dataset.scenarios]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_dataset(path) -> Dataset:
    dataset = Dataset([], split="train")
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: malformed JSON ({exc.msg})", line=lineno) from exc
            if not isinstance(rec, dict):
                raise ParseError(f"line {lineno}: expected a JSON object", line=lineno)
            if "_meta" in rec:
                meta = rec["_meta"]
                dataset.split = meta.get("split", dataset.split)
                dataset.seed = meta.get("seed")
                dataset.config = meta.get("config", {})
                continue
            dataset.scenarios.append(record_to_scenario(rec, lineno))
    return dataset


def dataset_io(path, dataset: Optional[Dataset] = None):
    """Write ``dataset`` to ``path`` when given, otherwise read it back."""
    if dataset is None:
        return read_dataset(path)
    write_dataset(path, dataset)
    return None


def scenarios_equal(a: Scenario, b: Scenario) -> bool:
    if a.id != b.id or a.mode_label != b.mode_label:
        return False
    if not np.array_equal(a.target_history, b.target_history) or not np.array_equal(a.target_valid, b.target_valid):
        return False
    if (a.future is None) != (b.future is None):
        return False
    if a.future is not None and not np.array_equal(a.future, b.future):
        return False
    if len(a.neighbor_histories) != len(b.neighbor_histories) or len(a.map_polylines) != len(b.map_polylines):
        return False
    for x, y in zip(a.neighbor_histories, b.neighbor_histories):
        if not (np.array_equal(x.points, y.points) and np.array_equal(x.valid, y.valid)):
            return False
    for x, y in zip(a.map_polylines, b.map_polylines):
        if x.tag != y.tag or not np.array_equal(np.asarray(x.points), np.asarray(y.points)):
            return False
    return True


def normalize_all(scenarios: Iterable[Scenario]) -> list:
    return [normalize_scenario(s) for s in scenarios]
