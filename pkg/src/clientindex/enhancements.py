"""Uses of client indices inside federated training.

* similarity-guided client sampling with a reselection cooldown,
* aggregation weights from an entropy-regularised linear objective
  (closed form plus a projected-gradient oracle for testing),
* a local regulariser that projects features to the index space, keeps them
  orthogonal to every client's feature index and distils the main logits
  into a projection head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .index_gen import ClientIndex
from .smallnet import (
    DenseParams,
    Tensor,
    as_tensor,
    dense,
    glorot_dense,
    grad,
    kl_rows,
    stop_gradient,
)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("client index with zero norm")
    return v / n


def similarity_S(beta_i: ClientIndex, selected: Sequence[tuple[ClientIndex, int]]) -> float:
    """Sample-count-weighted mean of (cos feature + cos label) / 2 against a selected set."""
    if len(selected) == 0:
        raise ValueError("similarity against an empty client set")
    fi, li = _unit(beta_i.beta_f), _unit(beta_i.beta_l)
    total_n = float(sum(n for _, n in selected))
    acc = 0.0
    for idx, n in selected:
        acc += n * (float(fi @ _unit(idx.beta_f)) + float(li @ _unit(idx.beta_l)))
    return acc / (2.0 * total_n)


def similarity_vector(indices: Sequence[ClientIndex],
                      selected: Sequence[tuple[int, int]]) -> np.ndarray:
    """S(beta_i, C) for every client i; ``selected`` holds (position, N_j) pairs."""
    F = np.array([_unit(i.beta_f) for i in indices])
    L = np.array([_unit(i.beta_l) for i in indices])
    pos = np.array([p for p, _ in selected])
    w = np.array([n for _, n in selected], dtype=np.float64)
    if pos.size == 0:
        raise ValueError("similarity against an empty client set")
    sims = (F @ F[pos].T + L @ L[pos].T) @ w
    return sims / (2.0 * w.sum())


# --------------------------------------------------------------------------
# client sampling


@dataclass
class SamplerState:
    n_clients: int
    tau: float = 1.0
    history: list[tuple[int, list[int], list[int]]] = field(default_factory=list)
    last_selected: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")


def cooldown_window(n_clients: int, k: int) -> int:
    return n_clients // (2 * k)


def sampling_probabilities(state: SamplerState, indices: Sequence[ClientIndex], k: int,
                           t: int) -> np.ndarray:
    """Marginal probabilities p_i^t over all clients (zero inside the cooldown)."""
    M = state.n_clients
    window = cooldown_window(M, k)
    eligible = np.array([t - state.last_selected.get(i, -10**9) >= window for i in range(M)])
    if eligible.sum() < k:
        raise ValueError(
            f"only {int(eligible.sum())} clients eligible in round {t}, need {k} "
            f"(cooldown window {window} rounds)"
        )
    if not state.history:
        S = np.zeros(M)
    else:
        _, prev, prev_n = state.history[-1]
        S = similarity_vector(indices, list(zip(prev, prev_n)))
    return probabilities_from_similarity(S, eligible, state.tau)


def probabilities_from_similarity(S: np.ndarray, eligible: np.ndarray, tau: float) -> np.ndarray:
    """softmax(S / tau) over the eligible clients, zero elsewhere."""
    S = np.asarray(S, dtype=np.float64)
    eligible = np.asarray(eligible, dtype=bool)
    if not eligible.any():
        raise ValueError("no eligible clients")
    logits = S[eligible] / tau
    e = np.exp(logits - logits.max())
    p = np.zeros(S.shape)
    p[eligible] = e / e.sum()
    return p


def sample_clients(state: SamplerState, indices: Sequence[ClientIndex], k: int, t: int,
                   rng: np.random.Generator, sizes: Sequence[int]) -> tuple[list[int], np.ndarray]:
    """Draw ``k`` distinct clients for round ``t`` (positions into ``indices``).

    Returns the selection (in draw order) and the first-draw probability
    vector.  Draws are sequential: after each pick the chosen client is
    removed and the rest renormalised.  ``state`` is updated in place.
    """
    if state.history and t <= state.history[-1][0]:
        raise ValueError("rounds must be strictly increasing")
    p = sampling_probabilities(state, indices, k, t)
    chosen: list[int] = []
    remaining = p.copy()
    for _ in range(k):
        remaining = remaining / remaining.sum()
        pick = int(rng.choice(len(remaining), p=remaining))
        chosen.append(pick)
        remaining[pick] = 0.0
    for c in chosen:
        state.last_selected[c] = t
    state.history.append((t, list(chosen), [int(sizes[c]) for c in chosen]))
    return chosen, p


# --------------------------------------------------------------------------
# aggregation weights


@dataclass
class AggregatorState:
    accum: np.ndarray
    gamma: float = 0.5
    lambda1: float = 1.0

    def __post_init__(self):
        self.accum = np.asarray(self.accum, dtype=np.float64)
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.lambda1 <= 0:
            raise ValueError("lambda1 must be > 0")

    @classmethod
    def zeros(cls, n_clients: int, gamma: float = 0.5, lambda1: float = 1.0) -> AggregatorState:
        return cls(np.zeros(n_clients), gamma, lambda1)


def update_accumulator(state: AggregatorState, indices: Sequence[ClientIndex],
                       selected: Sequence[tuple[int, int]]) -> AggregatorState:
    """A_i <- gamma * A_i + S(beta_i, C^t) for every client."""
    s = similarity_vector(indices, selected)
    return AggregatorState(state.gamma * state.accum + s, state.gamma, state.lambda1)


def aggregation_weights(state: AggregatorState, selected: Sequence[tuple[int, int]]) -> np.ndarray:
    """p_i proportional to q_i * exp(A_i / lambda1) over the selected clients, q_i = N_i / N."""
    if len(selected) == 0:
        raise ValueError("no selected clients")
    pos = np.array([p for p, _ in selected])
    n = np.array([c for _, c in selected], dtype=np.float64)
    q = n / n.sum()
    z = state.accum[pos] / state.lambda1 + np.log(q)
    e = np.exp(z - z.max())
    return e / e.sum()


def aggregation_objective(p: np.ndarray, A: np.ndarray, q: np.ndarray, lambda1: float) -> float:
    """sum p_i A_i + lambda1 sum p_i log(q_i / p_i), with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    pos = p > 0
    ent = np.sum(p[pos] * (np.log(q[pos]) - np.log(p[pos])))
    return float(p @ A + lambda1 * ent)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    n = v.size
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.nonzero(u - css / np.arange(1, n + 1) > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


@dataclass
class OracleResult:
    weights: np.ndarray
    objective: float
    converged: bool
    last_change: float


def oracle_solve_aggregation(similarity_trace: np.ndarray, q: np.ndarray, lambda1: float,
                             gamma: float, iterations: int = 10_000, step: float = 1e-2,
                             tol: float = 1e-10) -> OracleResult:
    """Numerically maximise the aggregation objective over the simplex.

    ``similarity_trace`` is (t, n): row tau holds S(beta_i, C^tau) for the n
    clients of the current round.  The discounted profit is formed here
    directly from the trace.  Projected gradient ascent runs on the
    objective divided by lambda1, which has the same maximiser.
    """
    trace = np.atleast_2d(np.asarray(similarity_trace, dtype=np.float64))
    q = np.asarray(q, dtype=np.float64)
    t = trace.shape[0]
    A = sum(gamma ** (t - 1 - r) * trace[r] for r in range(t))
    n = A.size
    if n > 8:
        raise ValueError("the oracle is meant for at most 8 clients")
    p = np.full(n, 1.0 / n)
    obj = aggregation_objective(p, A, q, lambda1)
    change = math.inf
    tiny = 1e-300
    for _ in range(iterations):
        g = A / lambda1 + np.log(q) - np.log(np.maximum(p, tiny)) - 1.0
        p = project_simplex(p + step * g)
        new_obj = aggregation_objective(p, A, q, lambda1)
        change = abs(new_obj - obj)
        obj = new_obj
    return OracleResult(p, obj, change <= tol, change)


# --------------------------------------------------------------------------
# local regulariser


@dataclass
class LocalRegParams:
    """Trainable projection P (d x d_i) and projection head (d_i -> C); frozen B_f (d_i x M)."""

    projection: np.ndarray
    proj_head: DenseParams
    b_f: np.ndarray = field(metadata={"static": True})
    reg_weight: float = field(default=1.0, metadata={"static": True})
    normalize_orth: bool = field(default=True, metadata={"static": True})
    kl_direction: str = field(default="main_proj", metadata={"static": True})
    stop_grad_main: bool = field(default=True, metadata={"static": True})

    def __post_init__(self):
        if self.kl_direction not in KL_DIRECTIONS:
            raise ValueError(f"kl_direction must be one of {KL_DIRECTIONS}")


KL_DIRECTIONS = ("main_proj", "proj_main")


def init_local_reg(d: int, n_classes: int, indices: Sequence[ClientIndex],
                   rng: np.random.Generator, reg_weight: float = 1.0,
                   normalize_orth: bool = True, kl_direction: str = "main_proj",
                   stop_grad_main: bool = True) -> LocalRegParams:
    b_f = np.array([i.beta_f for i in indices], dtype=np.float64).T
    d_i = b_f.shape[0]
    proj = glorot_dense(d, d_i, rng).weight
    return LocalRegParams(proj, glorot_dense(d_i, n_classes, rng), b_f, reg_weight,
                          normalize_orth, kl_direction, stop_grad_main)


def local_reg_term(z, logits_main, params: LocalRegParams) -> Tensor:
    """reg_weight * (|z P B_f|_1 / (B M) + mean_b KL(softmax(main) || softmax(head(z P)))).

    By default the main logits are a constant target; ``kl_direction`` and
    ``stop_grad_main`` on the params select the other variants.
    """
    z = as_tensor(z)
    if z.shape[1] != params.projection.shape[0]:
        raise ValueError(
            f"features have {z.shape[1]} columns; projection expects {params.projection.shape[0]}"
        )
    if params.b_f.shape[0] != params.projection.shape[1]:
        raise ValueError("projection output dim does not match the feature-index dim")
    if params.reg_weight == 0.0:
        return as_tensor(0.0) * z.sum()
    z_p = z @ params.projection
    orth = (z_p @ params.b_f).abs().sum()
    if params.normalize_orth:
        orth = orth * (1.0 / (z.shape[0] * params.b_f.shape[1]))
    proj_logits = dense(params.proj_head, z_p)
    main = stop_gradient(logits_main) if params.stop_grad_main else as_tensor(logits_main)
    if params.kl_direction == "main_proj":
        dist = kl_rows(main, proj_logits).mean()
    else:
        dist = kl_rows(proj_logits, main).mean()
    return params.reg_weight * (orth + dist)


def local_reg_loss(z: np.ndarray, y: np.ndarray | None, logits_main: np.ndarray,
                   params: LocalRegParams) -> tuple[float, LocalRegParams]:
    """Regulariser value and its gradients with respect to P and the projection head."""
    value = float(local_reg_term(np.asarray(z, dtype=np.float64), logits_main, params).value)
    grads = grad(lambda p: local_reg_term(np.asarray(z, dtype=np.float64), logits_main, p), params)
    return value, grads
