"""Acceptance gate: one recorded pass/fail line per criterion, printed in the terminal summary."""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from dgtl import cli
from dgtl.config import default_config
from dgtl.embedder import Embedder, EmbedderConfig
from dgtl.experiment import ARRANGEMENT_CELLS, DEFAULT_MC_GRID, FEATURES, ROUTING_CELLS, load_data, run_experiment
from dgtl.losses import LossConfig, fine_triplet, hetero_center_triplet, id_loss
from dgtl.pooling import PoolingMethod, pool_backward, pool_forward
from dgtl.retrieval import FeatureBatch, evaluate
from dgtl.sampler import SamplerConfig
from dgtl.trainer import TrainConfig, Trainer, grad_check, relative_error

from conftest import record_acceptance
from oracles import exhaustive_center_triplet, exhaustive_fine_triplet, sort_and_count

SMALL = Path(cli.__file__).parent / "configs" / "gradcheck.json"


def random_pk(rng, P, K, D):
    ids = np.repeat(np.arange(P), 2 * K)
    mods = np.tile(np.repeat([0, 1], K), P)
    perm = rng.permutation(len(ids))
    return rng.normal(size=(len(ids), D)), ids[perm], mods[perm]


def test_1_loss_oracle_equivalence():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        P, K, D = int(rng.integers(2, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 9))
        feats, ids, mods = random_pk(rng, P, K, D)
        m, mc = rng.uniform(0, 1.5, size=2)
        worst = max(worst,
                    abs(fine_triplet(feats, ids, m)[0] - exhaustive_fine_triplet(feats.tolist(), ids.tolist(), m)),
                    abs(hetero_center_triplet(feats, ids, mods, mc)[0]
                        - exhaustive_center_triplet(feats.tolist(), ids.tolist(), mods.tolist(), mc)))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 10
    record_acceptance(1, "loss oracle equivalence", ok, f"max |diff| {worst:.1e}, {elapsed:.2f} s")
    assert ok


def _loss_input_check(f, x, mining, step=1e-4):
    """Worst relative error of f's analytic input gradient, or None when a perturbation changes mining."""
    base_mining = mining(x)
    analytic = f(x)[1]
    worst = 0.0
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        fp, mp = f(x)[0], mining(x)
        x[idx] = orig - step
        fm, mm = f(x)[0], mining(x)
        x[idx] = orig
        if mp != base_mining or mm != base_mining:
            return None
        worst = max(worst, relative_error(analytic[idx], (fp - fm) / (2 * step)))
    return worst


def test_2_gradient_suite():
    start = time.perf_counter()
    cfg = TrainConfig(
        sampler=SamplerConfig(P=3, K=2, seed=1),
        embedder=EmbedderConfig(input_shape=(3, 3, 2), spec_layers=(10,), shared_layers=(10,), feature_dim=10,
                                num_identities=3, seed=5),
        loss=LossConfig(arrangement="f2c"),
    )
    report = grad_check(cfg, num_params=20, seed=3)
    per_layer = {}
    for name, theta in Embedder(cfg.embedder).params.items():
        layer = name.rsplit(".", 1)[0]
        per_layer[layer] = per_layer.get(layer, 0) + min(20, theta.size)
    coverage = min(per_layer.values())
    model_ok = report.passed and not report.ties and coverage >= 20

    rng = np.random.default_rng(2)
    loss_worst, checked, skipped = 0.0, 0, 0
    while checked < 30:
        feats, ids, mods = random_pk(rng, int(rng.integers(2, 5)), int(rng.integers(1, 4)), int(rng.integers(2, 7)))
        m = float(rng.uniform(0.2, 1.5))
        cases = [
            (lambda x: fine_triplet(x, ids, m), lambda x: fine_triplet(x, ids, m, return_mining=True)[2].key()),
            (lambda x: hetero_center_triplet(x, ids, mods, m),
             lambda x: hetero_center_triplet(x, ids, mods, m, return_mining=True)[2].key()),
        ]
        for f, mining in cases:
            err = _loss_input_check(f, feats.copy(), mining)
            if err is None:
                skipped += 1
                continue
            loss_worst, checked = max(loss_worst, err), checked + 1
        logits, labels = rng.normal(size=(6, 5)) * 3, rng.integers(0, 5, size=6)
        loss_worst = max(loss_worst, _loss_input_check(lambda z: id_loss(z, labels), logits, lambda z: ()))
    elapsed = time.perf_counter() - start
    ok = model_ok and loss_worst <= 1e-5 and elapsed < 60
    record_acceptance(2, "gradient suite", ok,
                      f"model {report.max_rel_error:.1e} ({coverage}+ coords/layer), losses {loss_worst:.1e} "
                      f"({checked} batches, {skipped} tie-skipped), {elapsed:.1f} s")
    assert ok


def test_3_degenerate_closed_forms():
    worst = 0.0
    for P, K, m, mc in [(2, 1, 0.3, 0.3), (4, 3, 0.5, 0.8), (8, 4, 0.3, 0.3)]:
        feats = np.full((2 * P * K, 5), 0.7)
        ids = np.repeat(np.arange(P), 2 * K)
        mods = np.tile(np.repeat([0, 1], K), P)
        worst = max(worst, abs(fine_triplet(feats, ids, m)[0] - 2 * P * K * m),
                    abs(hetero_center_triplet(feats, ids, mods, mc)[0] - 2 * P * mc))
    for n in (2, 7, 32):
        worst = max(worst, abs(id_loss(np.full((5, n), 1.3), np.arange(5) % n)[0] - math.log(n)))
    ok = worst <= 1e-9
    record_acceptance(3, "degenerate closed forms", ok, f"max |diff| {worst:.1e}")
    assert ok


def _pool_backward_worst(rng, method, points=10, step=1e-4):
    worst = 0.0
    for _ in range(points):
        x = rng.uniform(0.1, 3.0, size=(3, 3, 2))
        up = rng.normal(size=2)
        analytic = pool_backward(x, method, up)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + step
            fp = pool_forward(x, method) @ up
            x[idx] = orig - step
            fm = pool_forward(x, method) @ up
            x[idx] = orig
            worst = max(worst, relative_error(analytic[idx], (fp - fm) / (2 * step)))
    return worst


def test_4_pooling_identities():
    rng = np.random.default_rng(4)
    gem1 = max(np.max(np.abs(pool_forward(x, PoolingMethod("gem", 1.0)) - pool_forward(x, PoolingMethod("avg"))))
               for x in rng.uniform(0.01, 5.0, size=(50, 3, 3, 2)))
    backward = max(_pool_backward_worst(rng, PoolingMethod(kind, 3.0)) for kind in ("avg", "max", "gem"))
    ok = gem1 <= 1e-12 and backward <= 1e-5
    record_acceptance(4, "pooling: GeM(p=1) = Avg, backward vs finite differences", ok,
                      f"GeM1 {gem1:.1e}, backward {backward:.1e}")
    assert ok


@pytest.mark.xfail(strict=True, reason="GeM at p=64 sits up to n**(-1/64) below Max; 3.4% on a 3x3 map")
def test_4_gem64_near_max():
    rng = np.random.default_rng(44)
    maps = rng.uniform(0.1, 3.0, size=(50, 3, 3, 2))
    gaps = np.array([np.max(1 - pool_forward(x, PoolingMethod("gem", 64.0)) / pool_forward(x, PoolingMethod("max")))
                     for x in maps])
    ok = bool(np.all(gaps <= 0.01))
    record_acceptance(4, "pooling: GeM(p=64) within 1% of Max", ok,
                      f"{int(np.sum(gaps <= 0.01))}/50 maps within 1%, worst gap {100 * gaps.max():.2f}%")
    assert ok


def test_5_retrieval_evaluator():
    worst, monotone, invariant = 0.0, True, True
    for seed in range(50):
        rng = np.random.default_rng(500 + seed)
        n_q, dim, n_ids = int(rng.integers(1, 9)), int(rng.integers(1, 6)), int(rng.integers(1, 5))
        q_ids = rng.integers(0, n_ids, size=n_q)
        g_ids = np.concatenate([np.unique(q_ids), rng.integers(0, n_ids, size=int(rng.integers(1, 13)))])
        g_ids = g_ids[rng.permutation(len(g_ids))]
        q, g = rng.normal(size=(n_q, dim)), rng.normal(size=(len(g_ids), dim))
        res = evaluate(FeatureBatch(q, q_ids, np.zeros(n_q, int)), FeatureBatch(g, g_ids, np.ones(len(g_ids), int)))
        cmc, mean_ap, aps = sort_and_count(q.tolist(), q_ids.tolist(), g.tolist(), g_ids.tolist())
        worst = max(worst, np.max(np.abs(res.cmc - cmc)), np.max(np.abs(res.per_query_ap - aps)),
                    abs(res.map - mean_ap))
        monotone &= bool(np.all(np.diff(res.cmc) >= 0) and res.cmc[-1] == 1.0)
        s = float(rng.uniform(1e-3, 1e3))
        scaled = evaluate(FeatureBatch(q * s, q_ids, np.zeros(n_q, int)),
                          FeatureBatch(g * s, g_ids, np.ones(len(g_ids), int)))
        invariant &= bool(np.array_equal(scaled.cmc, res.cmc) and np.array_equal(scaled.per_query_ap, res.per_query_ap))
    ok = worst <= 1e-12 and monotone and invariant
    record_acceptance(5, "retrieval evaluator", ok,
                      f"max |diff| {worst:.1e}, monotone CMC {monotone}, scale invariant {invariant}")
    assert ok


@pytest.mark.slow
def test_6_training_efficacy():
    start = time.perf_counter()
    run = default_config()
    _, results, untrained = run_experiment(run)
    elapsed = time.perf_counter() - start
    trained = [results[("f_bnf", d)] for d in ("V->T", "T->V")]
    before = [untrained[("f_bnf", d)] for d in ("V->T", "T->V")]
    rank1, mean_ap = min(r.rank(1) for r in trained), min(r.map for r in trained)
    base = max(r.rank(1) for r in before)
    ok = rank1 >= 0.90 and mean_ap >= 0.80 and base <= 0.10 and elapsed < 300
    record_acceptance(6, "toy training efficacy", ok,
                      f"f_bnf rank1 {rank1:.3f} mAP {mean_ap:.3f} (untrained rank1 {base:.3f}), {elapsed:.1f} s")
    assert ok


def test_7_ablation_structure(tmp_path):
    expected = {
        "arrangement": [cid for cid, _ in ARRANGEMENT_CELLS],
        "bnneck_routing": [cid for cid, *_ in ROUTING_CELLS],
        "margin_mc": [f"mc={v:g}" for v in DEFAULT_MC_GRID],
        "pooling": [f"{f}-{c}" for f in ("avg", "max", "gem") for c in ("avg", "max", "gem")],
        "fusion": ["sum", "cat"],
    }
    problems = []
    for axis, cells in expected.items():
        code = cli.main(["ablate", "--config", str(SMALL), "--axis", axis, "--out-dir", str(tmp_path)])
        rows = [json.loads(line) for line in (tmp_path / f"ablation_{axis}.jsonl").read_text().splitlines()]
        got = [(r["cell_id"], r["feature"]) for r in rows]
        if code != 0 or got != [(c, f) for c in cells for f in FEATURES]:
            problems.append(axis)
    counts = {k: len(v) for k, v in expected.items()}
    ok = not problems and counts["arrangement"] == 7 and counts["bnneck_routing"] == 5 and counts["margin_mc"] == 9
    record_acceptance(7, "ablation structure", ok,
                      f"cells {counts}, dual features in every cell" + (f"; bad axes {problems}" if problems else ""))
    assert ok


def test_8_determinism_and_resume(tmp_path):
    run = default_config().replace(epochs=2)
    ds = load_data(run)
    train_index, _ = ds.split(run.test_per_modality)
    cfg = run.train_config(len(train_index.identity_set))
    a, b = Trainer(ds.samples, train_index, cfg), Trainer(ds.samples, train_index, cfg)
    a.run()
    b.run()
    same = a.history.records == b.history.records
    part = Trainer(ds.samples, train_index, cfg)
    part.run(max_steps=2)
    part.save(tmp_path / "ckpt.npz")
    resumed = Trainer.resume(tmp_path / "ckpt.npz", ds.samples, train_index)
    remaining = resumed.total_steps - resumed.step
    resumed.run()
    resume_ok = resumed.history.records == a.history.records[2:] and all(
        resumed.embedder.params[k].tobytes() == a.embedder.params[k].tobytes() for k in a.embedder.params)
    ok = same and resume_ok and remaining >= 5
    record_acceptance(8, "determinism and resume", ok,
                      f"bitwise histories {same}, resume over {remaining} steps {resume_ok}")
    assert ok
