"""Acceptance criteria, one test per criterion.

Each test prints a single ``[PASS]`` / ``[FAIL]`` line with the measured
numbers. The two comparative training runs (criteria 2 and 3) are cached
under ``.acceptance_cache/`` keyed by their configuration and a hash of
the package source; set ``MMT_ACCEPTANCE_RETRAIN=1`` to force a rerun.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import os
import pathlib
import time

import numpy as np
import pytest
import torch

import mmtransformer
from mmtransformer.evaluation import EvalConfig, evaluate_split, nms_select
from mmtransformer.model import MMTransformer, ModelConfig, PredictionSet, encode_scene, load_checkpoint, make_batch, save_checkpoint
from mmtransformer.partition import constrained_kmeans, fit_partition, map_proposals_to_regions
from mmtransformer.scene import (
    SyntheticConfig,
    dataset_io,
    denormalize_trajectory,
    generate_scenario,
    generate_synthetic_dataset,
    normalize_all,
    normalize_scenario,
    scenarios_equal,
)
from mmtransformer.training import (
    TrainConfig,
    build_model,
    classification_loss,
    confidence_loss,
    final_regression_loss,
    total_loss,
    train,
)

from oracles import FD_TOL, run_gradient_suite

ROOT = pathlib.Path(__file__).resolve().parent.parent
CACHE = ROOT / ".acceptance_cache"

# desk-scale comparative experiment
COMPARE = {
    "train_scenarios": 3000,
    "val_scenarios": 500,
    "data_seed": 0,
    "model_seed": 0,
    "K": 36,
    "M": 3,
    "hidden_dim": 64,
    "epochs": 30,
    "batch_size": 32,
    "k_out": 6,
    "miss_threshold": 2.0,
}
BUDGET_SECONDS = 45 * 60


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
    assert ok, detail


def _source_fingerprint() -> str:
    h = hashlib.sha256()
    for path in sorted(pathlib.Path(mmtransformer.__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


# -- 1 -----------------------------------------------------------------------


def test_criterion_1_gradient_suite(capsys):
    result = run_gradient_suite(seed=2)
    ok = result.instances >= 100 and result.worst < FD_TOL and result.seconds < 120
    report(capsys, 1, ok, f"{result.instances} finite-difference instances over {len(result.errors)} operations, "
           f"worst relative error {result.worst:.2e} (< {FD_TOL}), {result.seconds:.1f}s (< 120s)")


# -- 2 and 3 -------------------------------------------------------------------


@pytest.fixture(scope="module")
def comparison():
    """Train (or load) the RTS and vanilla models on identical data and config."""
    key = hashlib.sha256(json.dumps(COMPARE, sort_keys=True).encode() + _source_fingerprint().encode()).hexdigest()[:16]
    run_dir = CACHE / key
    run_dir.mkdir(parents=True, exist_ok=True)
    force = os.environ.get("MMT_ACCEPTANCE_RETRAIN") == "1"

    c = COMPARE
    train_set = normalize_all(generate_synthetic_dataset(SyntheticConfig(num_scenarios=c["train_scenarios"]), c["data_seed"], "train").scenarios)
    val_set = normalize_all(generate_synthetic_dataset(SyntheticConfig(num_scenarios=c["val_scenarios"]), c["data_seed"], "val").scenarios)
    partition = fit_partition(np.array([s.future[-1] for s in train_set]), c["M"], seed=c["data_seed"])

    out = {"partition": partition, "val": val_set, "runs": {}}
    for strategy in ("rts", "vanilla"):
        ckpt = run_dir / f"{strategy}.npz"
        M = c["M"] if strategy == "rts" else 1
        cfg = ModelConfig(hidden_dim=c["hidden_dim"], K=c["K"], M=M)
        if ckpt.exists() and not force:
            model, meta = load_checkpoint(ckpt, cfg)
            seconds = meta["train_seconds"]
        else:
            model = build_model(cfg, c["model_seed"])
            tc = TrainConfig(strategy=strategy, epochs=c["epochs"], batch_size=c["batch_size"], seed=c["model_seed"])
            start = time.perf_counter()
            train(model, train_set, tc, partition if strategy == "rts" else None, log_path=run_dir / f"{strategy}.log.jsonl")
            seconds = time.perf_counter() - start
            save_checkpoint(model, ckpt, {"train_seconds": seconds, "compare": c, "seed": c["model_seed"]})
        pmap = map_proposals_to_regions(c["K"], c["M"])
        result = evaluate_split(model, val_set, EvalConfig(k_out=c["k_out"], miss_threshold=c["miss_threshold"]), partition, pmap)
        out["runs"][strategy] = {"result": result, "seconds": seconds}
    summary = {s: {"metrics": r["result"].to_dict(), "train_seconds": r["seconds"]} for s, r in out["runs"].items()}
    (run_dir / "results.json").write_text(json.dumps({"config": COMPARE, **summary}, indent=1))
    return out


def test_criterion_2_rts_beats_vanilla(comparison, capsys):
    rts, van = comparison["runs"]["rts"], comparison["runs"]["vanilla"]
    mr_rts, mr_van = rts["result"].metrics.MR, van["result"].metrics.MR
    coverage = rts["result"].per_mode["coverage"]
    worst_cov = min(coverage.values())
    within = rts["seconds"] < BUDGET_SECONDS and van["seconds"] < BUDGET_SECONDS
    ok = mr_rts < mr_van and worst_cov >= 0.90 and len(coverage) == 3 and within
    cov = ", ".join(f"{m} {v:.3f}" for m, v in coverage.items())
    report(capsys, 2, ok, f"val MR rts {mr_rts:.4f} < vanilla {mr_van:.4f}; rts mode coverage [{cov}] >= 0.90; "
           f"train time rts {rts['seconds'] / 60:.1f} min, vanilla {van['seconds'] / 60:.1f} min (< 45)")


def test_criterion_3_mr_matrix_diagonal(comparison, capsys):
    mat = comparison["runs"]["rts"]["result"].mr_matrix
    diag, off = mat.diagonal_mean(), mat.off_diagonal_mean()
    ok = diag + 0.2 <= off
    report(capsys, 3, ok, f"MR matrix diagonal mean {diag:.4f}, off-diagonal mean {off:.4f}, gap {off - diag:.4f} (>= 0.2)")


# -- 4 -----------------------------------------------------------------------


def test_criterion_4_balance(capsys):
    rng = np.random.default_rng(4)
    worst = 0
    for _ in range(1000):
        m = int(rng.integers(1, 9))
        n = int(rng.integers(m, 80))
        pts = rng.normal(0, rng.uniform(0.1, 20), (n, 2))
        if rng.random() < 0.3:  # clumped data with duplicates
            pts = pts[rng.integers(0, max(1, n // 4), n)]
        labels, _ = constrained_kmeans(pts, m, seed=int(rng.integers(1 << 30)))
        sizes = np.bincount(labels, minlength=m)
        worst = max(worst, int(sizes.max() - sizes.min()))
    report(capsys, 4, worst <= 1, f"1000 random point sets, largest cluster size spread {worst} (<= 1)")


# -- 5 -----------------------------------------------------------------------


def test_criterion_5_invariances(capsys):
    torch.manual_seed(5)
    model = MMTransformer(ModelConfig(hidden_dim=32, K=12, M=3, dtype="float64")).eval()
    cfg = SyntheticConfig(max_neighbors=3)
    veh_diff = map_diff = 0.0
    index_exact = True
    for i in range(20):
        base = normalize_scenario(generate_scenario(cfg, 55, i))
        shuffled = normalize_scenario(generate_scenario(cfg, 55, i))
        rng = np.random.default_rng(i)
        shuffled.neighbor_histories = [shuffled.neighbor_histories[j] for j in rng.permutation(len(shuffled.neighbor_histories))]
        shuffled.map_polylines = [shuffled.map_polylines[j] for j in rng.permutation(len(shuffled.map_polylines))]
        only_map = normalize_scenario(generate_scenario(cfg, 55, i))
        only_map.map_polylines = shuffled.map_polylines
        with torch.no_grad():
            a = model(make_batch([base], model.config))
            b = model(make_batch([shuffled], model.config))
            c = model(make_batch([only_map], model.config))
        map_diff = max(map_diff, float((a.trajectories - c.trajectories).abs().max()), float((a.scores - c.scores).abs().max()))
        veh_diff = max(veh_diff, float((c.trajectories - b.trajectories).abs().max()), float((c.scores - b.scores).abs().max()))

        perm = torch.as_tensor(rng.permutation(12))
        saved = model.proposals.data.clone()
        with torch.no_grad():
            model.proposals.data = saved[perm]
            p = model(make_batch([base], model.config))
            model.proposals.data = saved
        # row r of the permuted run is row perm[r] of the base run
        for (t0, s0), (t1, s1) in zip(a.layers, p.layers):
            nearest = torch.cdist(t1[0].flatten(1), t0[0].flatten(1)).argmin(-1)
            index_exact &= torch.equal(nearest, perm) and torch.equal(torch.argsort(s1[0], stable=True), torch.argsort(s0[0, perm], stable=True))
    ok = veh_diff < 1e-9 and map_diff < 1e-9 and index_exact
    report(capsys, 5, ok, f"vehicle order max diff {veh_diff:.1e}, polyline order max diff {map_diff:.1e} (< 1e-9); "
           f"proposal permutation equivariant at index level: {index_exact}")


# -- 6 -----------------------------------------------------------------------


def test_criterion_6_loss_identities(capsys):
    D = torch.float64
    rng = np.random.default_rng(6)
    kl_worst = 0.0
    for _ in range(100):
        K = int(rng.integers(1, 10))
        traj = torch.tensor(rng.normal(0, 5, (K, 30, 2)), dtype=D)
        gt = torch.tensor(rng.normal(0, 5, (30, 2)), dtype=D)
        dist = torch.linalg.vector_norm(traj[:, -1] - gt[-1], dim=-1)
        shift = float(rng.normal())
        kl_worst = max(kl_worst, abs(confidence_loss(-dist + shift, traj, gt).item()))
    cls = classification_loss(torch.zeros(36, dtype=D), 2, map_proposals_to_regions(36, 6)).item()
    cls_err = abs(cls - math.log(6))
    tot_err = 0.0
    for _ in range(100):
        a, b, c = rng.uniform(0, 10, 3)
        val = total_loss(torch.tensor(a, dtype=D), torch.tensor(b, dtype=D), torch.tensor(c, dtype=D), torch.ones(3, dtype=D)).item()
        tot_err = max(tot_err, abs(val - (a + b + c + 3 * math.log(2))))
    ok = kl_worst < 1e-12 and cls_err < 1e-9 and tot_err < 1e-12
    report(capsys, 6, ok, f"KL at lambda = tau max {kl_worst:.1e} (< 1e-12); uniform M=6 classification loss {cls:.12f}, "
           f"|err| {cls_err:.1e} (< 1e-9); total loss plug-in max err {tot_err:.1e} (< 1e-12)")


# -- 7 -----------------------------------------------------------------------


def test_criterion_7_nms_contract(capsys):
    rng = np.random.default_rng(7)
    size_ok = det_ok = sep_ok = True
    for _ in range(1000):
        K = int(rng.integers(6, 40))
        spread = rng.uniform(0.1, 20)
        ends = rng.normal(0, spread, (K, 2))
        if rng.random() < 0.2:
            ends[: K // 2] = ends[0]  # heavy duplication
        traj = np.linspace(0, 1, 5)[None, :, None] * ends[:, None, :]
        pred = PredictionSet(traj, rng.normal(0, 3, K))
        a, b = nms_select(pred, 2.0, 6), nms_select(pred, 2.0, 6)
        size_ok &= len(a.indices) == 6 and len(set(a.indices)) == 6
        det_ok &= a.indices == b.indices and a.final_threshold == b.final_threshold
        for i, j in itertools.combinations(a.indices, 2):
            sep_ok &= bool(np.linalg.norm(ends[i] - ends[j]) >= a.final_threshold)
    ok = size_ok and det_ok and sep_ok
    report(capsys, 7, ok, f"1000 random prediction sets: size == K_out {size_ok}, deterministic {det_ok}, "
           f"pairwise separation >= final threshold {sep_ok}")


# -- 8 -----------------------------------------------------------------------


OVERFIT = {"scenarios": 10, "epochs": 300, "hidden_dim": 32, "K": 6, "batch_size": 2, "strategy": "vanilla", "seed": 0}


def test_criterion_8_overfit(capsys):
    o = OVERFIT
    scen = normalize_all(generate_synthetic_dataset(SyntheticConfig(num_scenarios=o["scenarios"]), o["seed"], "train").scenarios)
    cfg = ModelConfig(hidden_dim=o["hidden_dim"], K=o["K"])
    model = build_model(cfg, o["seed"])
    tc = TrainConfig(strategy=o["strategy"], epochs=o["epochs"], batch_size=o["batch_size"], seed=o["seed"], augment=False)
    start = time.perf_counter()
    state = train(model, scen, tc)
    reg = final_regression_loss(model, [encode_scene(s, cfg) for s in scen], o["strategy"], state.proposal_map)
    mr = evaluate_split(model, scen).metrics.MR
    ok = reg < 0.05 and mr == 0.0
    report(capsys, 8, ok, f"10-scenario overfit, {o['epochs']} epochs: final-head regression loss {reg:.4f} (< 0.05), "
           f"MR {mr:.3f} (== 0), {time.perf_counter() - start:.0f}s")


# -- 9 -----------------------------------------------------------------------


def test_criterion_9_round_trips(tmp_path, capsys):
    ds = generate_synthetic_dataset(SyntheticConfig(num_scenarios=50), 9, "test")
    dataset_io(tmp_path / "d.jsonl", ds)
    back = dataset_io(tmp_path / "d.jsonl")
    io_ok = len(back) == len(ds) and all(scenarios_equal(a, b) for a, b in zip(ds, back))

    worst = 0.0
    for s in ds:
        n = normalize_scenario(s)
        worst = max(worst, float(np.abs(denormalize_trajectory(n.future, n.frame) - s.future).max()),
                    float(np.abs(denormalize_trajectory(n.target_history, n.frame) - s.target_history).max()))

    scen = normalize_all(ds.scenarios[:8])
    ck_ok = True
    for dtype in ("float32", "float64"):
        torch.manual_seed(9)
        model = MMTransformer(ModelConfig(hidden_dim=16, K=6, dtype=dtype)).eval()
        save_checkpoint(model, tmp_path / f"{dtype}.npz")
        loaded, _ = load_checkpoint(tmp_path / f"{dtype}.npz")
        with torch.no_grad():
            a = model(make_batch(scen, model.config))
            b = loaded.eval()(make_batch(scen, loaded.config))
        ck_ok &= all(torch.equal(x, y) for la, lb in zip(a.layers, b.layers) for x, y in zip(la, lb))
    ok = io_ok and worst < 1e-9 and ck_ok
    report(capsys, 9, ok, f"dataset write/read equal {io_ok}; normalize/denormalize max deviation {worst:.1e} (< 1e-9); "
           f"checkpoint reload bit-identical at float32 and float64 {ck_ok}")
