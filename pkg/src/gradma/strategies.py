"""Round implementations for GradMA and its baselines.

Every strategy broadcasts ``x_t`` to the S sampled workers and receives one
d-vector back from each, so a round always moves ``S*d`` floats each way.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .flcore import (
    Federation,
    MemoryState,
    RunConfig,
    ServerState,
    WorkerState,
    local_sgd,
    mean_update,
    mem_red,
    server_update,
    worker_update,
)


@dataclass
class RoundResult:
    uplink_bytes: int
    downlink_bytes: int
    # server-side quantities for the momentum identity check
    d_tilde: Optional[np.ndarray]
    beta1: float
    eta_g: float
    qp_g_iterations: Optional[int] = None


class Strategy:
    tag = ""

    def __init__(self, cfg: RunConfig, fed: Federation):
        self.cfg = cfg
        self.fed = fed
        self.x = fed.x0.copy()
        self.workers = [WorkerState(i, fed.x0, p) for i, p in enumerate(fed.problems)]

    def round(self, t: int, active) -> RoundResult:
        raise NotImplementedError

    def _broadcast(self, active) -> tuple[np.ndarray, int]:
        # workers get a read-only snapshot; nothing downstream mutates it in place
        x_t = self.x
        x_t.setflags(write=False)
        return x_t, len(active) * x_t.nbytes


class FedAvgM(Strategy):
    """FedAvg / FedProx with optional server momentum.

    ``fedavg`` and ``fedprox`` are the ``beta1 = 0, eta_g = 1`` members.
    """

    def __init__(self, cfg, fed, tag="fedavgm"):
        super().__init__(cfg, fed)
        self.tag = tag
        plain = tag in ("fedavg", "fedprox")
        self.beta1 = 0.0 if plain else cfg.beta1
        self.eta_g = 1.0 if plain else cfg.eta_g
        self.mu = cfg.mu if tag in ("fedprox", "fedproxm") else None
        self.momentum = np.zeros_like(self.x)

    def round(self, t, active):
        x_t, down = self._broadcast(active)
        updates = [x_t - local_sgd(self.workers[i], x_t, self.cfg.eta_l, self.cfg.I, self.mu) for i in active]
        up = sum(u.nbytes for u in updates)
        d = mean_update(updates)
        self.momentum = self.beta1 * self.momentum + d
        self.x = x_t - self.eta_g * self.momentum
        return RoundResult(up, down, d_tilde=d, beta1=self.beta1, eta_g=self.eta_g)


class Mifa(Strategy):
    """MIFA(M): the server keeps every worker's latest update and averages over all N."""

    def __init__(self, cfg, fed, tag="mifam"):
        super().__init__(cfg, fed)
        self.tag = tag
        self.beta1 = 0.0 if tag == "mifa" else cfg.beta1
        self.g_old = np.zeros((cfg.N, fed.d))
        self.d_running = np.zeros(fed.d)
        self.momentum = np.zeros(fed.d)

    def round(self, t, active):
        x_t, down = self._broadcast(active)
        deltas = []
        for i in active:
            g_new = x_t - local_sgd(self.workers[i], x_t, self.cfg.eta_l, self.cfg.I)
            deltas.append(g_new - self.g_old[i])
            self.g_old[i] = g_new
        up = sum(u.nbytes for u in deltas)
        total = np.zeros_like(self.d_running)
        for u in deltas:
            total += u
        self.d_running = self.d_running + total / self.cfg.N
        self.momentum = self.beta1 * self.momentum + self.d_running
        self.x = x_t - self.cfg.eta_g * self.momentum
        return RoundResult(up, down, d_tilde=self.d_running, beta1=self.beta1, eta_g=self.cfg.eta_g)


class GradMA(Strategy):
    """GradMA and its one-sided ablations.

    ``gradma_w`` corrects local gradients only and averages on the server,
    ``gradma_s`` trains locally with SGD and corrects the server momentum,
    ``gradma`` does both.
    """

    def __init__(self, cfg, fed, tag="gradma"):
        super().__init__(cfg, fed)
        self.tag = tag
        self.worker_qp = tag in ("gradma_w", "gradma") and cfg.local_qp
        self.server_memory = tag in ("gradma_s", "gradma")
        memory = MemoryState(cfg.m, cfg.N, fed.d) if (self.server_memory and cfg.m > 0) else None
        self.server = ServerState(x=self.x, m_tilde=np.zeros(fed.d), memory=memory)

    @property
    def memory(self) -> Optional[MemoryState]:
        return self.server.memory

    def _local(self, i, x_t):
        ws = self.workers[i]
        if self.worker_qp:
            return worker_update(ws, x_t, self.cfg.eta_l, self.cfg.I, use_qp=True, qp_tol=self.cfg.qp_tol)[1]
        return x_t - local_sgd(ws, x_t, self.cfg.eta_l, self.cfg.I)

    def round(self, t, active):
        x_t, down = self._broadcast(active)
        if self.server_memory and self.memory is not None:
            mem_red(self.memory, active)
        updates = [self._local(i, x_t) for i in active]
        up = sum(u.nbytes for u in updates)
        if not self.server_memory:
            d = mean_update(updates)
            self.x = x_t - self.cfg.eta_g * d
            return RoundResult(up, down, d_tilde=d, beta1=0.0, eta_g=self.cfg.eta_g)
        self.server.x = x_t
        step = server_update(list(zip((int(i) for i in active), updates)), self.server, self.cfg)
        self.x = self.server.x
        d_tilde = step.d + step.m_tilde - step.m
        return RoundResult(up, down, d_tilde=d_tilde, beta1=self.cfg.beta1, eta_g=self.cfg.eta_g,
                           qp_g_iterations=step.qp_iterations)


_REGISTRY = {
    "fedavg": FedAvgM, "fedprox": FedAvgM, "fedavgm": FedAvgM, "fedproxm": FedAvgM,
    "mifa": Mifa, "mifam": Mifa,
    "gradma_w": GradMA, "gradma_s": GradMA, "gradma": GradMA,
}


def make_strategy(cfg: RunConfig, fed: Federation) -> Strategy:
    try:
        cls = _REGISTRY[cfg.strategy]
    except KeyError:
        raise ValueError(f"unknown strategy {cfg.strategy!r}") from None
    return cls(cfg, fed, tag=cfg.strategy)
