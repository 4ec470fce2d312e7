"""Exit criteria. Each test records one PASS/FAIL line, printed in the terminal summary."""

import json
import math
import statistics
import time

import numpy as np
import pytest

from vleto.config import ExperimentConfig
from vleto.continual import FisherInfo, FreezePolicy, build_freeze_mask, compute_threshold
from vleto.experiment import build_dataset, run_experiment
from vleto.nn import DenseNet, softmax, softmax_cross_entropy
from vleto.prototypes import (GlobalPrototypeList, Prototype, cosine_sim, evolve_class_prototype,
                              fuse_feature_prototype, generate_prototypes, update_global_list)
from vleto.protocol import Orchestrator

SEEDS = range(5)

# Desk-scale benchmark shared by criteria 6-10.
BENCH = {
    "data": {"n_samples": 2000, "n_features": 16, "n_classes": 8, "class_separation": 4.0},
    "k_parties": 4, "d_emb": 16, "n_tasks": 4, "local_hidden": [32], "server_hidden": [32],
    "epochs": 20, "batch_size": 32, "lr": 0.05,
}
NAIVE = ["no_a", "no_f", "no_lmo"]

PLAIN_VFL = {
    "mode": "CIL", "n_tasks": 1, "k_parties": 2, "epochs": 200,
    "data": {"n_samples": 1000, "n_features": 8, "n_classes": 2, "class_separation": 10.0},
    "ablations": NAIVE,
}


def record(log, n, ok, detail):
    log.append(f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {detail}")


def bench(mode, ablations=(), seed=0):
    return ExperimentConfig.from_dict({**BENCH, "mode": mode, "ablations": list(ablations), "seed": seed})


class Runs:
    """Benchmark runs written to disk once per session, keyed by (name, seed, repeat)."""

    def __init__(self, root):
        self.root = root
        self.cache = {}
        self.seconds = {}

    def get(self, name, cfg, seed, repeat=0):
        key = (name, seed, repeat)
        if key not in self.cache:
            start = time.perf_counter()
            res = run_experiment(cfg.with_overrides(seed=seed), self.root / f"{name}-s{seed}-r{repeat}",
                                 export_prototypes=True)
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - start
            self.cache[key] = res
        return self.cache[key]

    def metrics_bytes(self, name, seed, repeat=0):
        return (self.cache[(name, seed, repeat)].output_dir / "metrics.csv").read_bytes()


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("acceptance"))


CONFIGS = {
    "plain": lambda: ExperimentConfig.from_dict(PLAIN_VFL),
    "cil_full": lambda: bench("CIL"),
    "cil_naive": lambda: bench("CIL", NAIVE),
    "cil_no_a": lambda: bench("CIL", ["no_a"]),
    "cil_no_ce": lambda: bench("CIL", ["no_ce"]),
    "fil_full": lambda: bench("FIL"),
    "fil_no_f_lmo": lambda: bench("FIL", ["no_f", "no_lmo"]),
}


def run_all(runs, name, seeds=SEEDS):
    cfg = CONFIGS[name]()
    return [runs.get(name, cfg, s).metrics for s in seeds]


# -- 1 ----------------------------------------------------------------------

def _fd_grad(net, x, y, h=1e-5):
    out = []
    for p in net.params():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = softmax_cross_entropy(net.forward(x, cache=False), y)[0]
            p[idx] = orig - h
            down = softmax_cross_entropy(net.forward(x, cache=False), y)[0]
            p[idx] = orig
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def test_c01_numerical_core(acceptance_log):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, worst_sum = 0.0, 0.0
    for _ in range(100):
        depth = int(rng.integers(1, 4))
        sizes = [int(v) for v in rng.integers(1, 17, size=depth + 1)]
        sizes[-1] = max(2, sizes[-1])
        net = DenseNet.init(sizes, rng)
        for layer in net.layers:
            layer.bias += rng.normal(0, 0.1, layer.bias.shape)
        x = rng.normal(size=(int(rng.integers(1, 5)), sizes[0]))
        y = rng.integers(0, sizes[-1], x.shape[0])
        _, d = softmax_cross_entropy(net.forward(x), y)
        grads = net.backward(d).params
        for a, b in zip(grads, _fd_grad(net, x, y)):
            rel = np.abs(a - b) / np.maximum(1e-7, np.abs(a) + np.abs(b))
            worst = max(worst, float(rel.max()))
        p = softmax(rng.normal(scale=30, size=(8, sizes[-1])))
        worst_sum = max(worst_sum, float(np.abs(p.sum(axis=1) - 1).max()))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and worst_sum <= 1e-9 and elapsed < 30
    record(acceptance_log, 1, ok, f"max FD rel err {worst:.2e} (<1e-4), softmax row-sum err {worst_sum:.1e} "
                                  f"(<=1e-9), {elapsed:.1f}s (<30s)")
    assert ok


# -- 2 ----------------------------------------------------------------------

def test_c02_prototype_algebra(acceptance_log):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 17))
        a, b = rng.normal(size=d), rng.normal(size=d)
        lam = float(rng.uniform(1e-3, 1e3))
        s = cosine_sim(a, b)
        worst = max(worst, abs(s - cosine_sim(b, a)), abs(s - cosine_sim(lam * a, b)))

        prev = Prototype(0, rng.normal(size=d))
        pairs = [(rng.normal(size=d), rng.normal(size=d)) for _ in range(int(rng.integers(1, 4)))]
        worst = max(worst, float(np.abs(evolve_class_prototype(prev, pairs, 0.0).vector - prev.vector).max()))

        store = update_global_list(GlobalPrototypeList(), [Prototype(1, rng.normal(size=d))])
        cur = Prototype(1, rng.normal(size=d))
        worst = max(worst, float(np.abs(fuse_feature_prototype(cur, store, 1.0).vector - cur.vector).max()),
                    float(np.abs(fuse_feature_prototype(cur, store, 0.0).vector - store[1].vector).max()))

        n = int(rng.integers(2, 40))
        emb = rng.normal(size=(n, d))
        cut = int(rng.integers(1, n))
        (whole,) = generate_prototypes(emb, np.zeros(n, dtype=int), {0})
        (left,) = generate_prototypes(emb[:cut], np.zeros(cut, dtype=int), {0})
        (right,) = generate_prototypes(emb[cut:], np.zeros(n - cut, dtype=int), {0})
        weighted = (cut * left.vector + (n - cut) * right.vector) / n
        worst = max(worst, float(np.abs(whole.vector - weighted).max()))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and elapsed < 10
    record(acceptance_log, 2, ok, f"1000 cases, max deviation {worst:.1e} (<=1e-12), {elapsed:.1f}s (<10s)")
    assert ok


# -- 3 ----------------------------------------------------------------------

def test_c03_freeze_soundness(acceptance_log):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    monotone = True
    for _ in range(200):
        f = FisherInfo([rng.exponential(size=(int(rng.integers(1, 9)), 5)), rng.exponential(size=(1, 5))], 10)
        prev = None
        for delta in np.linspace(-3, 30, 12):
            mask = build_freeze_mask(f, compute_threshold(f, FreezePolicy(float(delta), 0.0, 0)))
            if prev is not None and not all(np.all(m[p]) for m, p in zip(mask, prev)):
                monotone = False
            prev = mask

    cfg = bench("CIL").with_overrides(epochs=5)
    orch = Orchestrator(cfg, build_dataset(cfg))
    orch.run_task(orch.schedule[0])
    orch._resize(orch.schedule[1])
    snaps = [(p.freeze_mask, [w.copy() for w in p.local_model.params()]) for p in orch.parties]
    orch.run_task(orch.schedule[1])
    bit_exact = all(b[m].tobytes() == a[m].tobytes()
                    for (mask, before), p in zip(snaps, orch.parties)
                    for m, b, a in zip(mask, before, p.local_model.params()))
    moved = any(not np.array_equal(b[~m], a[~m])
                for (mask, before), p in zip(snaps, orch.parties)
                for m, b, a in zip(mask, before, p.local_model.params()))
    elapsed = time.perf_counter() - start
    ok = monotone and bit_exact and moved and elapsed < 30
    record(acceptance_log, 3, ok, f"monotone={monotone}, frozen bit-identical={bit_exact}, "
                                  f"unfrozen moved={moved}, {elapsed:.1f}s (<30s)")
    assert ok


# -- 4 ----------------------------------------------------------------------

def test_c04_threshold_oracle(acceptance_log):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        f = FisherInfo([rng.exponential(scale=float(rng.uniform(0.01, 10)), size=tuple(rng.integers(1, 6, 2)))
                        for _ in range(int(rng.integers(1, 4)))], 1)
        policy = FreezePolicy(float(rng.uniform(0, 20)), float(rng.uniform(0, 5)), int(rng.integers(0, 10)))
        flat = [float(v) for arr in f.values for v in arr.ravel()]
        delta = policy.k0 + policy.alpha * math.log(policy.task_index + 1)
        expected = statistics.fmean(flat) - delta * statistics.pstdev(flat)
        got = compute_threshold(f, policy)
        worst = max(worst, abs(got - expected) / max(1.0, abs(expected)))
    ok = worst <= 1e-12
    record(acceptance_log, 4, ok, f"1000 tensors, max |kappa - oracle| {worst:.1e} (<=1e-12)")
    assert ok


# -- 5 ----------------------------------------------------------------------

def test_c05_plain_vfl(runs, acceptance_log):
    start = time.perf_counter()
    (metrics,) = run_all(runs, "plain", seeds=[0])
    elapsed = time.perf_counter() - start
    acc = metrics[0].accuracies[0]
    ok = acc >= 0.98 and elapsed < 60
    record(acceptance_log, 5, ok, f"test accuracy {acc:.4f} (>=0.98), {elapsed:.1f}s (<60s)")
    assert ok


# -- 6 ----------------------------------------------------------------------

def _avg(history):
    return float(np.mean([m.aggregate for m in history]))


def test_c06_cil_beats_naive(runs, acceptance_log):
    start = time.perf_counter()
    full = np.mean([_avg(h) for h in run_all(runs, "cil_full")])
    naive = np.mean([_avg(h) for h in run_all(runs, "cil_naive")])
    elapsed = time.perf_counter() - start
    ok = full - naive >= 0.10 and elapsed < 300
    record(acceptance_log, 6, ok, f"AVG full {full:.4f} vs naive {naive:.4f}, delta {100 * (full - naive):+.1f}pp "
                                  f"(>=+10pp), {elapsed:.1f}s (<300s)")
    assert ok


# -- 7 ----------------------------------------------------------------------

def test_c07_fil_trend(runs, acceptance_log):
    start = time.perf_counter()
    full = np.mean([[m.accuracies[m.task_id] for m in h] for h in run_all(runs, "fil_full")], axis=0)
    ablated = np.mean([[m.accuracies[m.task_id] for m in h] for h in run_all(runs, "fil_no_f_lmo")], axis=0)
    elapsed = time.perf_counter() - start
    steps = np.diff(full)
    trend = bool(np.all(steps >= -0.01))
    gap = float(full[-1] - ablated[-1])
    ok = trend and gap >= 0.10 and elapsed < 300
    record(acceptance_log, 7, ok, f"current-task acc {np.round(full, 4).tolist()} non-decreasing={trend}; "
                                  f"task-4 vs no_f+no_lmo {ablated[-1]:.4f}: {100 * gap:+.1f}pp (>=+10pp), "
                                  f"{elapsed:.1f}s (<300s)")
    assert ok


# -- 8 ----------------------------------------------------------------------

def test_c08_ablation_direction(runs, acceptance_log):
    full = run_all(runs, "cil_full")
    no_a = run_all(runs, "cil_no_a")
    no_ce = run_all(runs, "cil_no_ce")
    prior = lambda hs: float(np.mean([h[1].accuracies[0] for h in hs]))
    current = lambda hs: float(np.mean([h[1].accuracies[1] for h in hs]))
    d_prior = prior(full) - prior(no_a)
    d_current = current(full) - current(no_ce)
    ok = d_prior >= 0.05 and d_current >= 0.10
    record(acceptance_log, 8, ok, f"after task 2: w/o L_A prior-task drop {100 * d_prior:.1f}pp (>=5pp), "
                                  f"w/o L_CE current-task drop {100 * d_current:.1f}pp (>=10pp)")
    assert ok


# -- 9 ----------------------------------------------------------------------

def test_c09_determinism(runs, acceptance_log):
    mismatched = []
    for name, make in CONFIGS.items():
        cfg = make()
        seeds = [0] if name == "plain" else SEEDS
        for s in seeds:
            runs.get(name, cfg, s)
            runs.get(name, cfg, s, repeat=1)
            if runs.metrics_bytes(name, s) != runs.metrics_bytes(name, s, repeat=1):
                mismatched.append(f"{name}/seed{s}")
    ok = not mismatched
    record(acceptance_log, 9, ok, "repeated runs of criteria 5-8 byte-identical metrics.csv"
                                  + ("" if ok else f"; mismatches: {mismatched}"))
    assert ok


# -- 10 ---------------------------------------------------------------------

def test_c10_prototype_export(runs, acceptance_log):
    res = runs.get("cil_full", CONFIGS["cil_full"](), 0)
    records = json.loads((res.output_dir / "prototypes.json").read_text())
    d_emb = BENCH["d_emb"]
    problems = []
    seen = set()
    for task in res.orchestrator.schedule:
        seen |= task.class_set
        ids = [r["class_id"] for r in records if r["task_id"] == task.task_id]
        if sorted(ids) != sorted(seen):
            problems.append(f"task {task.task_id}: classes {sorted(ids)} != {sorted(seen)}")
    for r in records:
        if len(r["vector"]) != d_emb or not all(math.isfinite(v) for v in r["vector"]):
            problems.append(f"bad vector for class {r['class_id']} task {r['task_id']}")
    ok = not problems and len(records) == sum(range(2, 9, 2))
    record(acceptance_log, 10, ok, f"{len(records)} prototype records, one per seen class per task, "
                                   f"finite, dim {d_emb}" + ("" if ok else f"; {problems[:3]}"))
    assert ok
