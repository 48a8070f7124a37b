"""Fast invariant checks runnable without pytest (``gradma selftest``)."""

from __future__ import annotations

import time

import numpy as np

from . import qp
from .data import dirichlet_partition, gen_synthetic, label_entropy
from .flcore import Federation, MemoryState, RunConfig, mem_red, round_rng, sample_active
from .harness import synthetic_split
from .model import Architecture, Batch, init_params, loss_and_grad
from .strategies import make_strategy


def check_qp_oracle(n=200, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        d, C = rng.integers(1, 9), rng.integers(1, 5)
        p = rng.normal(size=d)
        M = rng.normal(size=(C, d))
        M[rng.random(C) < 0.1] = 0.0
        inst = qp.QpInstance(p, M)
        err = np.linalg.norm(qp.correct(inst) - qp.oracle_solve(inst)) / (1 + np.linalg.norm(p))
        worst = max(worst, err)
    return worst <= 1e-6, f"max scaled deviation from oracle {worst:.2e}"


def check_gradients(seed=0):
    rng = np.random.default_rng(seed)
    arch = Architecture(12, (9, 7), 4)
    x = init_params(arch, seed) + 0.01 * rng.normal(size=arch.num_params)
    batch = Batch(rng.normal(size=(16, 12)), rng.integers(0, 4, 16))
    _, g = loss_and_grad(arch, x, batch)
    worst = 0.0
    for j in rng.choice(arch.num_params, 30, replace=False):
        e = np.zeros_like(x)
        e[j] = 1e-5
        fd = (loss_and_grad(arch, x + e, batch)[0] - loss_and_grad(arch, x - e, batch)[0]) / 2e-5
        worst = max(worst, abs(fd - g[j]) / max(abs(fd), abs(g[j]), 1e-6))
    return worst <= 1e-5, f"max relative error {worst:.2e}"


def check_mem_red(rounds=2000, seed=0):
    rng = np.random.default_rng(seed)
    mem = MemoryState(20, 100, 1)
    for _ in range(rounds):
        active = rng.choice(100, 10, replace=False)
        evicted = mem_red(mem, active)
        if len(mem.buf) > 20 or set(evicted) & set(active.tolist()) or set(mem.D) != set(mem.buf):
            return False, "buffer invariant violated"
        mem.new_buf.clear()
    return True, f"{rounds} rounds, |buf| <= 20"


def check_partition(seed=0):
    ds = gen_synthetic(10, 2, 100, seed)
    ents = []
    for omega in (1.0, 0.1, 0.01):
        part = dirichlet_partition(ds, 20, omega, seed)
        idx = np.concatenate(part.shards)
        if idx.size != len(ds) or np.unique(idx).size != len(ds):
            return False, f"partition not exact at omega={omega}"
        ents.append(np.mean([label_entropy(ds.labels[s], 10) for s in part.shards]))
    return True, "mean entropies " + ", ".join(f"{e:.3f}" for e in ents)


def check_reduction(seed=0):
    train, test = synthetic_split(5, 8, 60, 20, seed)
    base = dict(eta_l=0.05, eta_g=1.0, I=3, S=3, N=6, T=5, omega=0.5, beta1=0.5, hidden_dims=(6,), seed=seed)
    finals = {}
    for tag in ("fedavgm", "gradma_s"):
        cfg = RunConfig(strategy=tag, **base)
        strat = make_strategy(cfg, Federation.build(cfg, train, test))
        for t in range(cfg.T):
            strat.round(t, sample_active(cfg.N, cfg.S, round_rng(cfg.seed, t)))
        finals[tag] = strat.x
    diff = float(np.max(np.abs(finals["fedavgm"] - finals["gradma_s"])))
    return diff <= 1e-12, f"GradMA-S(m=0) vs FedAvgM max diff {diff:.1e}"


CHECKS = {
    "qp-oracle": check_qp_oracle,
    "gradients": check_gradients,
    "mem-red": check_mem_red,
    "partition": check_partition,
    "reduction": check_reduction,
}


def run_all(echo=print) -> bool:
    ok_all = True
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        ok, detail = fn()
        ok_all &= ok
        echo(f"{'PASS' if ok else 'FAIL'}  {name:<10} {detail}  ({time.perf_counter() - t0:.2f}s)")
    return ok_all
