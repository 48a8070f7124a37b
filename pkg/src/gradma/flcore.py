"""GradMA building blocks: local QP-corrected training, the bounded server
memory, the memory-corrected momentum step and the round loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Optional, Protocol

import numpy as np

from . import qp
from .data import Dataset, Partition, batch_iter, dirichlet_partition
from .model import Architecture, Batch, NonFiniteError, evaluate, full_grad, init_params, loss_and_grad

logger = logging.getLogger(__name__)

STRATEGY_TAGS = ("fedavg", "fedprox", "fedavgm", "fedproxm", "mifa", "mifam", "gradma_w", "gradma_s", "gradma")
GRADIENT_MODES = ("minibatch", "full")

# streams for np.random.default_rng([seed, stream, ...])
_SAMPLING_STREAM = 1
_WORKER_STREAM = 2
_TRAIN_EVAL_STREAM = 3


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class DivergenceError(FloatingPointError):
    def __init__(self, round_index: int, what: str = "non-finite values"):
        super().__init__(f"run diverged at round {round_index}: {what}")
        self.round_index = round_index


@dataclass(frozen=True)
class RunConfig:
    eta_l: float
    eta_g: float
    I: int
    S: int
    N: int
    T: int
    omega: float
    strategy: str
    beta1: float = 0.0
    beta2: float = 0.0
    m: int = 0
    mu: float = 0.0
    batch_size: int = 64
    seed: int = 0
    hidden_dims: tuple[int, ...] = (200, 200, 200)
    gradient_mode: str = "minibatch"
    anchor_cap: int = 2048
    local_qp: bool = True
    qp_tol: float = qp.DEFAULT_TOL
    gram_check_every: int = 100

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    def validate(self, d: int | None = None) -> "RunConfig":
        def bad(key, msg):
            raise ConfigError(key, msg)

        if not self.eta_l > 0:
            bad("eta_l", "must be > 0")
        if not self.eta_g > 0:
            bad("eta_g", "must be > 0")
        if not 0 <= self.beta1 < 1:
            bad("beta1", "must lie in [0, 1)")
        if not 0 <= self.beta2 < 1:
            bad("beta2", "must lie in [0, 1)")
        if self.I < 1:
            bad("I", "must be >= 1")
        if self.N < 1:
            bad("N", "must be >= 1")
        if not 1 <= self.S <= self.N:
            bad("S", f"must satisfy 1 <= S <= N={self.N}")
        if self.m != 0:
            upper = self.N if d is None else min(d, self.N)
            if not self.S <= self.m <= upper:
                bad("m", f"must be 0 or satisfy S={self.S} <= m <= {upper}")
        if self.T < 0:
            bad("T", "must be >= 0")
        if not self.omega > 0:
            bad("omega", "must be > 0")
        if self.strategy not in STRATEGY_TAGS:
            bad("strategy", f"unknown strategy {self.strategy!r}; expected one of {', '.join(STRATEGY_TAGS)}")
        if self.mu < 0:
            bad("mu", "must be >= 0")
        if self.batch_size < 1:
            bad("batch_size", "must be >= 1")
        if self.seed < 0:
            bad("seed", "must be >= 0")
        if self.gradient_mode not in GRADIENT_MODES:
            bad("gradient_mode", f"must be one of {GRADIENT_MODES}")
        if self.anchor_cap < 1:
            bad("anchor_cap", "must be >= 1")
        if not self.qp_tol > 0:
            bad("qp_tol", "must be > 0")
        return self

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# -- local problems ---------------------------------------------------------------

class LocalProblem(Protocol):
    """What a worker needs from its objective f_i."""

    empty: bool

    def sample(self, step: int): ...

    def grad(self, x: np.ndarray, batch) -> np.ndarray: ...

    def anchor_grad(self, x: np.ndarray) -> np.ndarray: ...


def worker_seed(seed: int, worker_id: int) -> int:
    return int(np.random.SeedSequence([seed, _WORKER_STREAM, worker_id]).generate_state(1)[0])


class ShardProblem:
    """Cross-entropy of ``arch`` on one worker's shard."""

    def __init__(self, arch: Architecture, dataset: Dataset, shard: np.ndarray, batch_size: int,
                 seed: int, mode: str = "minibatch", anchor_cap: int = 2048):
        self.arch = arch
        self.dataset = dataset
        self.shard = np.asarray(shard, dtype=np.int64)
        self.batch_size = batch_size
        self.seed = seed
        self.mode = mode
        self.empty = self.shard.size == 0
        self._full = None if self.empty else dataset.subset(self.shard)
        if self.empty or self.shard.size <= anchor_cap:
            self._anchor = self._full
        else:
            rng = np.random.default_rng([seed, 0])
            pick = np.sort(rng.choice(self.shard.size, size=anchor_cap, replace=False))
            self._anchor = dataset.subset(self.shard[pick])

    def sample(self, step: int) -> Batch:
        if self.mode == "full":
            return self._full
        return batch_iter(self.dataset, self.shard, self.batch_size, self.seed, step)

    def grad(self, x, batch):
        return loss_and_grad(self.arch, x, batch)[1]

    def anchor_grad(self, x):
        return full_grad(self.arch, x, self._anchor)


# -- worker side -------------------------------------------------------------------

@dataclass
class WorkerState:
    id: int
    x_prev: np.ndarray
    problem: LocalProblem
    step: int = 0


def local_sgd(ws: WorkerState, x_t: np.ndarray, eta_l: float, I: int, mu: float | None = None) -> np.ndarray:
    """Plain local SGD from ``x_t``; ``mu`` adds the proximal pull ``mu (x - x_t)``."""
    x = x_t
    if ws.problem.empty:
        return x_t.copy()
    for _ in range(I):
        batch = ws.problem.sample(ws.step)
        ws.step += 1
        g = ws.problem.grad(x, batch)
        if mu is not None:
            g = g + mu * (x - x_t)
        x = x - eta_l * g
    return x


def worker_update(ws: WorkerState, x_t: np.ndarray, eta_l: float, I: int,
                  use_qp: bool = True, qp_tol: float = qp.DEFAULT_TOL) -> tuple[np.ndarray, np.ndarray]:
    """QP-corrected local training. Returns ``(x_I, d_i)`` with ``d_i = x_t - x_I``.

    At step tau the stochastic gradient is projected so that it has a
    non-negative inner product with the gradient at the previous iterate
    (same minibatch), the anchor gradient at ``x_t`` and ``x_tau - x_t``.
    The previous iterate at tau=0 is the worker's last final iterate.
    """
    problem = ws.problem
    if problem.empty:
        ws.x_prev = x_t
        return x_t.copy(), np.zeros_like(x_t)
    x_before = ws.x_prev
    x = x_t
    anchor = problem.anchor_grad(x_t) if use_qp else None
    for tau in range(I):
        batch = problem.sample(ws.step)
        ws.step += 1
        g = problem.grad(x, batch)
        if use_qp:
            cols = np.stack([problem.grad(x_before, batch), anchor, x - x_t])
            try:
                g = qp.correct(qp.QpInstance(g, cols), tol=qp_tol)
            except qp.QpNotConverged as exc:
                logger.warning("worker %d step %d: %s; using the uncorrected gradient", ws.id, tau, exc)
        x_before = x
        x = x - eta_l * g
    ws.x_prev = x
    return x, x_t - x


def mean_update(updates: list[np.ndarray]) -> np.ndarray:
    acc = np.zeros_like(updates[0])
    for u in updates:
        acc += u
    return acc / len(updates)


# -- server memory ---------------------------------------------------------------

class MemoryState:
    """Bounded per-worker memory of accumulated updates.

    Columns live in a preallocated ``(m, d)`` array addressed by slot; free
    slots are zero rows so full-array products stay valid. ``gram`` is the
    slot-indexed Gram matrix of those rows.
    """

    def __init__(self, m: int, N: int, d: int):
        if m < 1:
            raise ValueError("memory size must be >= 1")
        self.m = m
        self.counters = np.zeros(N, dtype=np.int64)
        self.buf: list[int] = []
        self.new_buf: set[int] = set()
        self.slot: dict[int, int] = {}
        self.cols = np.zeros((m, d))
        self.gram = np.zeros((m, m))
        self._free = list(range(m - 1, -1, -1))

    @property
    def D(self) -> dict[int, np.ndarray]:
        return {i: self.cols[self.slot[i]] for i in self.buf}

    def occupied_slots(self) -> np.ndarray:
        return np.array([self.slot[i] for i in self.buf], dtype=np.int64)

    def gram_in_buf_order(self) -> np.ndarray:
        s = self.occupied_slots()
        return self.gram[np.ix_(s, s)]

    def admit(self, i: int) -> None:
        s = self._free.pop()
        self.slot[i] = s
        self.buf.append(i)
        self.new_buf.add(i)

    def evict(self, i: int) -> None:
        s = self.slot.pop(i)
        self.buf.remove(i)
        self.new_buf.discard(i)
        self.counters[i] = 0
        self.cols[s] = 0.0
        self.gram[s, :] = 0.0
        self.gram[:, s] = 0.0
        self._free.append(s)

    def recompute_gram(self) -> float:
        """Rebuild the Gram matrix from the stored columns; returns the relative drift."""
        fresh = qp.symmetrize_upper(self.cols @ self.cols.T)
        scale = max(float(np.max(np.abs(fresh))), np.finfo(float).tiny)
        drift = float(np.max(np.abs(fresh - self.gram))) / scale
        self.gram = fresh
        return drift


def mem_red(mem: MemoryState, active) -> list[int]:
    """Admit the sampled workers into the bounded buffer, evicting when full.

    A full buffer drops the non-sampled member with the smallest counter
    (ties to the lowest id), resetting its counter. Returns evicted ids.
    """
    active = [int(i) for i in active]
    active_set = set(active)
    # non-sampled counters do not change during the call, so one sort gives
    # the whole eviction order
    victims = None
    evicted = []
    for i in active:
        if i in mem.slot:
            mem.counters[i] += 1
            continue
        if len(mem.buf) == mem.m:
            if victims is None:
                victims = sorted((k for k in mem.buf if k not in active_set),
                                 key=lambda k: (mem.counters[k], k), reverse=True)
            victim = victims.pop()
            mem.evict(victim)
            evicted.append(victim)
        mem.counters[i] += 1
        mem.admit(i)
    return evicted


# -- server side -----------------------------------------------------------------

@dataclass
class ServerState:
    x: np.ndarray
    m_tilde: np.ndarray
    t: int = 0
    memory: Optional[MemoryState] = None
    z_prev: dict[int, float] = field(default_factory=dict)


@dataclass
class ServerStep:
    d: np.ndarray
    m: np.ndarray
    m_tilde: np.ndarray
    qp_iterations: int | None = None
    qp_fallback: bool = False


def server_update(updates: list[tuple[int, np.ndarray]], server: ServerState, cfg: RunConfig) -> ServerStep:
    """Momentum step corrected against the memorised per-worker updates."""
    d = mean_update([u for _, u in updates])
    m = cfg.beta1 * server.m_tilde + d
    mem = server.memory
    iterations, fallback = None, False
    if mem is None or not mem.buf:
        m_tilde = m
    else:
        _refresh_memory(mem, updates, cfg.beta2)
        if cfg.gram_check_every and (server.t + 1) % cfg.gram_check_every == 0:
            drift = mem.recompute_gram()
            if drift > 1e-8:
                logger.warning("Gram cache drifted by %.3e (relative); rebuilt", drift)
        occ = mem.occupied_slots()
        A = mem.gram[np.ix_(occ, occ)]
        b = (mem.cols @ m)[occ]
        z0 = np.array([server.z_prev.get(i, 0.0) for i in mem.buf])
        try:
            sol = qp.solve_dual(qp.GramSystem(A, b), tol=cfg.qp_tol, z0=z0)
            iterations = sol.iterations
            z_full = np.zeros(mem.m)
            z_full[occ] = sol.z
            m_tilde = m + z_full @ mem.cols if np.any(sol.z > 0) else m
            server.z_prev = dict(zip(mem.buf, sol.z.tolist()))
        except qp.QpNotConverged as exc:
            logger.warning("server QP at round %d: %s; using the uncorrected momentum", server.t, exc)
            iterations, fallback = exc.solution.iterations, True
            m_tilde = m
            server.z_prev = {}
    if mem is not None:
        mem.new_buf.clear()
    server.m_tilde = m_tilde
    server.x = server.x - cfg.eta_g * m_tilde
    server.t += 1
    return ServerStep(d=d, m=m, m_tilde=m_tilde, qp_iterations=iterations, qp_fallback=fallback)


def _refresh_memory(mem: MemoryState, updates, beta2: float) -> None:
    """Decay/overwrite the buffered columns and patch the Gram matrix.

    Entries between two untouched columns scale by beta2**2; every row
    belonging to an active worker is recomputed.
    """
    received = {int(i): u for i, u in updates}
    active_slots, idle_slots = [], []
    for i in mem.buf:
        s = mem.slot[i]
        if i in received:
            if i in mem.new_buf:
                mem.cols[s] = received[i]
            else:
                mem.cols[s] *= beta2
                mem.cols[s] += received[i]
            active_slots.append(s)
        else:
            mem.cols[s] *= beta2
            idle_slots.append(s)
    if idle_slots:
        idle = np.array(idle_slots)
        mem.gram[np.ix_(idle, idle)] *= beta2 * beta2
    if active_slots:
        act = np.array(active_slots)
        # free slots are zero rows, so multiplying against every slot avoids
        # copying the occupied ones out of the (m, d) array
        rows = mem.cols[act] @ mem.cols.T
        mem.gram[act, :] = rows
        mem.gram[:, act] = rows.T
        # active-active entries: take the upper-triangle value for exact symmetry
        block = mem.gram[np.ix_(act, act)]
        mem.gram[np.ix_(act, act)] = qp.symmetrize_upper(block)


def sample_active(N: int, S: int, rng: np.random.Generator) -> np.ndarray:
    """S distinct worker ids, uniformly without replacement, sorted."""
    if S > N:
        raise ValueError(f"cannot sample S={S} of N={N} workers")
    return np.sort(rng.choice(N, size=S, replace=False))


def round_rng(seed: int, t: int) -> np.random.Generator:
    return np.random.default_rng([seed, _SAMPLING_STREAM, t])


# -- the federation and the round loop --------------------------------------------

@dataclass
class Federation:
    """Everything a run needs besides the config: model, data and workers' problems."""

    arch: Architecture
    train: Dataset
    test: Dataset
    partition: Partition
    x0: np.ndarray
    problems: list

    @classmethod
    def build(cls, cfg: RunConfig, train: Dataset, test: Dataset) -> "Federation":
        arch = Architecture(train.dim, cfg.hidden_dims, train.num_classes)
        cfg.validate(arch.num_params)
        partition = dirichlet_partition(train, cfg.N, cfg.omega, cfg.seed)
        problems = [
            ShardProblem(arch, train, shard, cfg.batch_size, worker_seed(cfg.seed, i),
                         mode=cfg.gradient_mode, anchor_cap=cfg.anchor_cap)
            for i, shard in enumerate(partition.shards)
        ]
        return cls(arch, train, test, partition, init_params(arch, cfg.seed), problems)

    @property
    def d(self) -> int:
        return self.x0.shape[0]


@dataclass
class MetricsRow:
    t: int
    test_accuracy: float
    test_loss: float
    train_loss: float
    wall_time: float
    uplink_bytes: int
    downlink_bytes: int
    lemma1_residual: Optional[float] = None
    qp_g_iterations: Optional[int] = None


def lemma1_residual(x_next, x_cur, x_before, t, beta1, eta_g, d_tilde) -> float:
    """Normalised residual of ``u_{t+1} - u_t = -eta_g/(1-beta1) * d_tilde``.

    ``u_t = (x_t - beta1 x_{t-1}) / (1 - beta1)`` for t > 0 and ``u_0 = x_0``.
    Returned as ``|lhs - rhs| / (1 + |u_t|)``.
    """
    c = 1.0 - beta1
    u_cur = x_cur if t == 0 else (x_cur - beta1 * x_before) / c
    u_next = (x_next - beta1 * x_cur) / c
    r = np.linalg.norm((u_next - u_cur) + (eta_g / c) * d_tilde)
    return float(r / (1.0 + np.linalg.norm(u_cur)))


def run(cfg: RunConfig, fed: Federation, eval_every: int = 5, record_lemma1: bool = False,
        record_wall_time: bool = False, train_eval_size: int = 2000,
        on_round: Callable | None = None) -> list:
    """Run ``cfg.T`` rounds of ``cfg.strategy`` and return the evaluation rows.

    Rows are produced after every ``eval_every``-th round and after the last
    one; ``t`` counts completed rounds.
    """
    from .strategies import make_strategy

    cfg.validate(fed.d)
    strategy = make_strategy(cfg, fed)
    pick = np.random.default_rng([cfg.seed, _TRAIN_EVAL_STREAM]).permutation(len(fed.train))[:train_eval_size]
    train_probe = Dataset(fed.train.features[np.sort(pick)], fed.train.labels[np.sort(pick)], fed.train.num_classes)

    rows = []
    start = time.perf_counter()
    x_before = fed.x0
    for t in range(cfg.T):
        x_cur = strategy.x
        active = sample_active(cfg.N, cfg.S, round_rng(cfg.seed, t))
        try:
            res = strategy.round(t, active)
        except NonFiniteError as exc:
            raise DivergenceError(t, str(exc)) from exc
        if not np.all(np.isfinite(strategy.x)):
            raise DivergenceError(t)
        lemma = None
        if record_lemma1 and res.d_tilde is not None:
            lemma = lemma1_residual(strategy.x, x_cur, x_before, t, res.beta1, res.eta_g, res.d_tilde)
        if on_round is not None:
            on_round(t, active, res, lemma)
        x_before = x_cur
        done = t + 1
        if done % eval_every == 0 or done == cfg.T:
            try:
                acc, loss = evaluate(fed.arch, strategy.x, fed.test)
                _, train_loss = evaluate(fed.arch, strategy.x, train_probe)
            except NonFiniteError as exc:
                raise DivergenceError(t, str(exc)) from exc
            if not np.isfinite(loss):
                raise DivergenceError(t, "non-finite test loss")
            rows.append(MetricsRow(
                t=done, test_accuracy=acc, test_loss=loss, train_loss=train_loss,
                wall_time=time.perf_counter() - start if record_wall_time else 0.0,
                uplink_bytes=res.uplink_bytes, downlink_bytes=res.downlink_bytes,
                lemma1_residual=lemma, qp_g_iterations=res.qp_g_iterations,
            ))
    return rows
