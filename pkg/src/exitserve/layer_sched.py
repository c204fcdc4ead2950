"""Layer-level scheduling as a Markov decision process.

A batch of ``N`` sequences is summarised by an occupancy vector ``v`` where
``v[i]`` counts the sequences whose next layer is ``i + 1``. An action picks a
layer ``a``; the ``v[a]`` sequences waiting there run it (the reward) and each
either exits early, returning to layer 1 for its next token, or moves on to
layer ``a + 1``. Running the last layer always exits.

Policies: greedy (largest waiting group), tabular Q-learning seeded with the
greedy values, and a linear approximation ``Q(v, a) = M[a] . v``. Exact value
iteration over the full state space is provided as the reference solution.
"""

from __future__ import annotations

import itertools
import json
import math
import random
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

State = tuple[int, ...]
Policy = Callable[[State], int]

MAX_STATES = 2**63 - 1


@dataclass(frozen=True)
class MdpParams:
    n_layers: int
    population: int
    exit_probs: tuple[float, ...]
    discount: float = 0.9
    alpha: float = 0.1
    epsilon: float = 0.1

    def __post_init__(self) -> None:
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.population < 0:
            raise ValueError("population must be >= 0")
        if len(self.exit_probs) != self.n_layers:
            raise ValueError(f"need {self.n_layers} exit probabilities, got {len(self.exit_probs)}")
        if any(not 0.0 <= p <= 1.0 for p in self.exit_probs):
            raise ValueError("exit probabilities must lie in [0, 1]")
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")

    @classmethod
    def uniform(cls, n_layers: int, population: int, p: float, **kw) -> "MdpParams":
        return cls(n_layers, population, (p,) * n_layers, **kw)

    def fresh_state(self) -> State:
        return (self.population,) + (0,) * (self.n_layers - 1)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["exit_probs"] = list(self.exit_probs)
        return doc


# -- state, reward, dynamics ----------------------------------------------


def encode_state(next_layers: Iterable[int], n_layers: int) -> State:
    v = [0] * n_layers
    for layer in next_layers:
        if not 1 <= layer <= n_layers:
            raise ValueError(f"layer index {layer} outside 1..{n_layers}")
        v[layer - 1] += 1
    return tuple(v)


def _check_action(v: Sequence[int], a: int) -> None:
    if not 1 <= a <= len(v):
        raise ValueError(f"action {a} outside 1..{len(v)}")


def reward(v: State, a: int) -> int:
    _check_action(v, a)
    return v[a - 1]


def _move(v: State, a: int, exited: int) -> State:
    n = v[a - 1]
    out = list(v)
    out[a - 1] -= n
    out[0] += exited
    if a < len(v):
        out[a] += n - exited
    return tuple(out)


def transition(v: State, a: int, params: MdpParams, rng: random.Random) -> State:
    _check_action(v, a)
    n = v[a - 1]
    if a == len(v):
        exited = n
    else:
        p = params.exit_probs[a - 1]
        exited = sum(1 for _ in range(n) if rng.random() < p)
    return _move(v, a, exited)


def transition_distribution(v: State, a: int, params: MdpParams) -> dict[State, float]:
    """Exact next-state distribution (binomial over the engaged sequences)."""
    _check_action(v, a)
    n = v[a - 1]
    if a == len(v):
        return {_move(v, a, n): 1.0}
    p = params.exit_probs[a - 1]
    dist: dict[State, float] = {}
    for k in range(n + 1):
        pr = math.comb(n, k) * p**k * (1.0 - p) ** (n - k)
        if pr > 0.0:
            s = _move(v, a, k)
            dist[s] = dist.get(s, 0.0) + pr
    return dist


def greedy_policy(v: State) -> int:
    if sum(v) <= 0:
        raise ValueError("greedy policy needs at least one waiting sequence")
    return max(range(len(v)), key=lambda i: (v[i], -i)) + 1


def q_init(v: State, a: int) -> float:
    return float(v[a - 1])


def state_space_size(n_layers: int, population: int) -> int:
    """C(N+L, N): occupancy vectors over L layers holding at most N sequences."""
    if n_layers < 1 or population < 0:
        raise ValueError("need n_layers >= 1 and population >= 0")
    size = math.comb(population + n_layers, population)
    if size > MAX_STATES:
        raise OverflowError(f"state space of {size} states exceeds 64-bit range")
    return size


def enumerate_states(n_layers: int, population: int, exact: bool = False) -> list[State]:
    """All occupancy vectors with total ``<= population`` (``== population`` if exact)."""
    out = []
    for v in itertools.product(range(population + 1), repeat=n_layers):
        total = sum(v)
        if total == population or (not exact and total < population):
            out.append(v)
    return out


# -- tabular Q ------------------------------------------------------------


class QTable:
    """Q values keyed by (state, action); unseen entries read as ``q_init``."""

    def __init__(self, n_layers: int):
        self.n_layers = n_layers
        self._index: dict[State, int] = {}
        self._states: list[State] = []
        self._rows: list[list[float]] = []

    def row(self, v: State) -> list[float]:
        idx = self._index.get(v)
        if idx is None:
            idx = self._add(v)
        return self._rows[idx]

    def _add(self, v: State) -> int:
        if len(v) != self.n_layers:
            raise ValueError(f"state length {len(v)} != {self.n_layers}")
        idx = len(self._states)
        self._index[v] = idx
        self._states.append(v)
        self._rows.append([float(c) for c in v])
        return idx

    def get(self, v: State, a: int) -> float:
        idx = self._index.get(v)
        if idx is None:
            return q_init(v, a)
        return self._rows[idx][a - 1]

    def set(self, v: State, a: int, value: float) -> None:
        self.row(v)[a - 1] = value

    def max_value(self, v: State) -> float:
        idx = self._index.get(v)
        return max(self._rows[idx]) if idx is not None else float(max(v))

    def best_action(self, v: State) -> int:
        r = self._rows[self._index[v]] if v in self._index else [float(c) for c in v]
        best = max(r)
        return r.index(best) + 1

    def states(self) -> list[State]:
        return list(self._states)

    def items(self):
        for v, r in zip(self._states, self._rows):
            for a, q in enumerate(r, start=1):
                yield (v, a), q

    def __len__(self) -> int:
        return len(self._states)

    def to_json(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "entries": [{"state": list(v), "q": list(r)} for v, r in zip(self._states, self._rows)],
        }


def q_learn_step(Q: QTable, s: State, a: int, r: float, s_next: State, alpha: float, discount: float) -> float:
    """One Q-learning update; returns the new Q(s, a)."""
    old = Q.get(s, a)
    new = old + alpha * (r + discount * Q.max_value(s_next) - old)
    Q.set(s, a, new)
    return new


# -- linear approximation ---------------------------------------------------


def linear_q(M: np.ndarray, v: Sequence[int], a: int) -> float:
    M = np.asarray(M, dtype=float)
    v = np.asarray(v, dtype=float)
    if M.ndim != 2 or M.shape[1] != v.shape[0]:
        raise ValueError(f"M shape {M.shape} does not match state length {v.shape[0]}")
    if not 1 <= a <= M.shape[0]:
        raise ValueError(f"action {a} outside 1..{M.shape[0]}")
    return float(M[a - 1] @ v)


def linear_q_update(M: np.ndarray, v: Sequence[int], a: int, target: float, alpha: float) -> float:
    """Semi-gradient step on row ``a`` in place: M[a] += alpha * (target - M[a].v) * v."""
    err = target - linear_q(M, v, a)
    M[a - 1] += alpha * err * np.asarray(v, dtype=float)
    return err


# -- exact solution -------------------------------------------------------


@dataclass
class ValueIterationResult:
    q: dict[tuple[State, int], float]
    iterations: int
    residual: float

    def value(self, v: State) -> float:
        return max(self.q[(v, a)] for a in range(1, len(v) + 1))

    def policy(self, v: State) -> int:
        L = len(v)
        vals = [self.q[(v, a)] for a in range(1, L + 1)]
        return vals.index(max(vals)) + 1


def value_iteration(params: MdpParams, tol: float = 1e-12, max_iter: int = 100_000) -> ValueIterationResult:
    """Bellman-optimality iteration over every occupancy vector with total <= N."""
    L = params.n_layers
    states = enumerate_states(L, params.population)
    model = {(s, a): list(transition_distribution(s, a, params).items()) for s in states for a in range(1, L + 1)}
    v_star = {s: 0.0 for s in states}
    g = params.discount
    residual = math.inf
    for it in range(1, max_iter + 1):
        q = {
            (s, a): s[a - 1] + g * sum(pr * v_star[t] for t, pr in model[(s, a)])
            for s in states
            for a in range(1, L + 1)
        }
        new_v = {s: max(q[(s, a)] for a in range(1, L + 1)) for s in states}
        residual = max(abs(new_v[s] - v_star[s]) for s in states)
        v_star = new_v
        if residual < tol:
            return ValueIterationResult(q=q, iterations=it, residual=residual)
    raise RuntimeError(f"value iteration did not converge in {max_iter} sweeps (residual {residual:g})")


# -- training and evaluation ----------------------------------------------


def random_state(params: MdpParams, rng: random.Random) -> State:
    """Uniform draw over occupancy vectors with exactly N sequences (stars and bars)."""
    N, L = params.population, params.n_layers
    bars = sorted(rng.sample(range(N + L - 1), L - 1))
    counts, prev = [], -1
    for b in bars:
        counts.append(b - prev - 1)
        prev = b
    counts.append(N + L - 1 - prev - 1)
    return tuple(counts)


@dataclass
class TrainedPolicy:
    kind: str
    params: MdpParams
    table: QTable | None = None
    weights: np.ndarray | None = None
    steps: int = 0

    def q(self, v: State, a: int) -> float:
        if self.kind == "q_table":
            return self.table.get(v, a)
        if self.kind == "linear":
            return linear_q(self.weights, v, a)
        return q_init(v, a)

    def __call__(self, v: State) -> int:
        if self.kind == "q_table":
            return self.table.best_action(v)
        if self.kind == "linear":
            vals = self.weights @ np.asarray(v, dtype=float)
            return int(np.argmax(vals)) + 1
        return greedy_policy(v)

    def to_json(self) -> dict:
        doc = {"kind": self.kind, "params": self.params.to_json(), "steps": self.steps}
        if self.table is not None:
            doc["q_table"] = self.table.to_json()
        if self.weights is not None:
            doc["M"] = self.weights.tolist()
        return doc


def train_policy(
    kind: str,
    params: MdpParams,
    episodes: int,
    horizon: int,
    seed: int,
    *,
    alpha_schedule: str = "visit",
    kappa: float = 1000.0,
    exploring_starts: bool = True,
) -> TrainedPolicy:
    """Epsilon-greedy training over simulated episodes.

    ``alpha_schedule="visit"`` uses ``alpha * kappa / (kappa + n)`` for the
    n-th update of a table entry (of a row of ``M`` for the linear model);
    ``"constant"`` keeps ``alpha`` fixed. A constant step leaves the table
    fluctuating around Q* with an amplitude proportional to ``alpha``.
    With ``exploring_starts`` every episode begins in a uniformly random
    state with N sequences; otherwise all sequences start at layer 1.

    The linear model's step is further divided by ``|v|^2`` so the update
    stays stable for large batches.
    """
    if kind not in ("q_table", "linear"):
        raise ValueError(f"unknown policy kind {kind!r}")
    if alpha_schedule not in ("visit", "constant"):
        raise ValueError(f"unknown alpha schedule {alpha_schedule!r}")
    if episodes < 0 or horizon < 1:
        raise ValueError("episodes must be >= 0 and horizon >= 1")
    if params.population < 1:
        raise ValueError("training needs a population of at least one sequence")
    L = params.n_layers
    rng = random.Random(seed)
    g, eps, alpha0 = params.discount, params.epsilon, params.alpha
    decay = alpha_schedule == "visit"
    probs = params.exit_probs

    if kind == "q_table":
        Q = QTable(L)
        counts: dict[State, list[int]] = {}
        # next-state cache keyed by (state, action, exited)
        moves: dict[tuple[State, int, int], State] = {}
        for _ in range(episodes):
            s = random_state(params, rng) if exploring_starts else params.fresh_state()
            for _ in range(horizon):
                qs = Q.row(s)
                if rng.random() < eps:
                    a = rng.randrange(L) + 1
                else:
                    a = qs.index(max(qs)) + 1
                n = s[a - 1]
                if a == L:
                    k = n
                else:
                    p = probs[a - 1]
                    k = 0
                    for _ in range(n):
                        if rng.random() < p:
                            k += 1
                key = (s, a, k)
                s2 = moves.get(key)
                if s2 is None:
                    s2 = moves[key] = _move(s, a, k)
                c = counts.setdefault(s, [0] * L)
                step = alpha0 * kappa / (kappa + c[a - 1]) if decay else alpha0
                c[a - 1] += 1
                nxt = Q.row(s2)
                qs[a - 1] += step * (n + g * max(nxt) - qs[a - 1])
                s = s2
        return TrainedPolicy("q_table", params, table=Q, steps=episodes * horizon)

    M = np.eye(L)
    row_counts = [0] * L
    for _ in range(episodes):
        s = random_state(params, rng) if exploring_starts else params.fresh_state()
        for _ in range(horizon):
            x = np.asarray(s, dtype=float)
            if rng.random() < eps:
                a = rng.randrange(L) + 1
            else:
                a = int(np.argmax(M @ x)) + 1
            s2 = transition(s, a, params, rng)
            target = s[a - 1] + g * float(np.max(M @ np.asarray(s2, dtype=float)))
            step = alpha0 * kappa / (kappa + row_counts[a - 1]) if decay else alpha0
            row_counts[a - 1] += 1
            linear_q_update(M, s, a, target, step / float(x @ x))
            s = s2
    return TrainedPolicy("linear", params, weights=M, steps=episodes * horizon)


@dataclass
class EvalResult:
    policy_kind: str
    params: MdpParams
    mean_return: float
    std_error: float
    episodes: int
    horizon: int
    action_frequencies: dict[int, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "params": self.params.to_json(),
            "policy_kind": self.policy_kind,
            "mean_return": self.mean_return,
            "std_error": self.std_error,
            "episodes": self.episodes,
            "horizon": self.horizon,
            "action_frequencies": {str(k): v for k, v in sorted(self.action_frequencies.items())},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def evaluate_policy(
    policy: Policy,
    params: MdpParams,
    episodes: int,
    horizon: int,
    seed: int,
    start: State | None = None,
    kind: str | None = None,
) -> EvalResult:
    """Monte-Carlo mean of the discounted return from ``start`` (default: all at layer 1).

    Episode ``e`` draws its transitions from ``Random(seed * 1_000_003 + e)``
    so two policies evaluated with the same seed share their random streams
    as far as their trajectories agree.
    """
    if episodes < 1 or horizon < 1:
        raise ValueError("episodes and horizon must be >= 1")
    s0 = tuple(start) if start is not None else params.fresh_state()
    if len(s0) != params.n_layers:
        raise ValueError("start state length does not match n_layers")
    g = params.discount
    returns = np.empty(episodes)
    actions = [0] * params.n_layers
    for e in range(episodes):
        rng = random.Random(seed * 1_000_003 + e)
        s, total, disc = s0, 0.0, 1.0
        for _ in range(horizon):
            a = policy(s)
            actions[a - 1] += 1
            total += disc * s[a - 1]
            disc *= g
            s = transition(s, a, params, rng)
        returns[e] = total
    n_act = sum(actions)
    label = kind or getattr(policy, "kind", None) or getattr(policy, "__name__", "policy")
    return EvalResult(
        policy_kind=label,
        params=params,
        mean_return=float(returns.mean()),
        std_error=float(returns.std(ddof=1) / math.sqrt(episodes)) if episodes > 1 else 0.0,
        episodes=episodes,
        horizon=horizon,
        action_frequencies={a + 1: c / n_act for a, c in enumerate(actions)},
    )


def exit_probs_from_accepts(accept_histogram: dict[int, int], n_layers: int) -> tuple[float, ...]:
    """Per-layer exit hazard estimated from an accept-layer histogram.

    ``p_i = count(i) / count(>= i)``; the last layer is always 1. Layers no
    token reached get 0.
    """
    probs = []
    for i in range(1, n_layers + 1):
        at_or_after = sum(c for layer, c in accept_histogram.items() if layer >= i)
        if i == n_layers:
            probs.append(1.0)
        elif at_or_after == 0:
            probs.append(0.0)
        else:
            probs.append(accept_histogram.get(i, 0) / at_or_after)
    return tuple(probs)
