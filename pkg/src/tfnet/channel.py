"""Three-state Markov packet-loss channel.

States are GOOD, LOSSY and BURST with per-state loss probabilities
``(0, p_lossy, 1)``. The chain starts in GOOD and steps once per packet.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

GOOD, LOSSY, BURST = 0, 1, 2
STATE_NAMES = ("GOOD", "LOSSY", "BURST")


class ChainError(ValueError):
    pass


def _default_matrix():
    return ((0.95, 0.04, 0.01),
            (0.60, 0.35, 0.05),
            (0.30, 0.20, 0.50))


@dataclass(frozen=True)
class ThreeStateModel:
    transitions: tuple = field(default_factory=_default_matrix)
    p_lossy: float = 0.5
    start: int = GOOD

    def __post_init__(self):
        P = self.matrix
        if P.shape != (3, 3):
            raise ChainError("transition matrix must be 3x3")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-9):
            raise ChainError("transition matrix rows must be non-negative and sum to 1")
        if not 0.0 <= self.p_lossy <= 1.0:
            raise ChainError(f"p_lossy must lie in [0, 1], got {self.p_lossy}")
        if self.start not in (GOOD, LOSSY, BURST):
            raise ChainError(f"unknown start state {self.start}")

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.transitions, dtype=np.float64)

    @property
    def loss_probs(self) -> np.ndarray:
        return np.array([0.0, self.p_lossy, 1.0])


def simulate(model: ThreeStateModel, n_packets: int, seed: int,
             return_states: bool = False):
    """Per-packet receive flags (True = received), optionally with the state path."""
    rng = np.random.default_rng(seed)
    u_loss = rng.random(n_packets)
    u_step = rng.random(n_packets)
    cum = np.cumsum(model.matrix, axis=1).tolist()
    states = np.empty(n_packets, dtype=np.int8)
    s = model.start
    for i in range(n_packets):
        states[i] = s
        row, u = cum[s], u_step[i]
        s = 0 if u < row[0] else (1 if u < row[1] else 2)
    received = u_loss >= model.loss_probs[states]
    return (received, states) if return_states else received


def _is_primitive(P: np.ndarray) -> bool:
    # a 3-state chain is irreducible and aperiodic iff P^k > 0 for some k <= (n-1)^2 + 1
    pattern = (P > 0).astype(np.int64)
    acc = pattern.copy()
    for _ in range(4):
        acc = np.minimum(acc @ pattern, 1)
    return bool(np.all(acc > 0))


def stationary_distribution(model: ThreeStateModel, tol: float = 1e-12, max_iter: int = 1_000_000) -> np.ndarray:
    P = model.matrix
    if not _is_primitive(P):
        raise ChainError("no unique stationary distribution (chain is reducible or periodic)")
    pi = np.full(3, 1.0 / 3.0)
    for _ in range(max_iter):
        nxt = pi @ P
        if np.abs(nxt - pi).max() < tol:
            return nxt
        pi = nxt
    raise ChainError("power iteration did not converge")


def stationary_loss_rate(model: ThreeStateModel) -> float:
    return float(stationary_distribution(model) @ model.loss_probs)


def long_run_loss_rate(model: ThreeStateModel, horizon: int = 100_000) -> float:
    """Expected long-run loss fraction from the start state.

    Equals :func:`stationary_loss_rate` for a primitive chain; otherwise the
    Cesaro mean of the state distribution over ``horizon`` steps is used, which
    covers reducible chains such as the identity.
    """
    P = model.matrix
    if _is_primitive(P):
        return stationary_loss_rate(model)
    dist = np.zeros(3)
    dist[model.start] = 1.0
    acc = np.zeros(3)
    for _ in range(horizon):
        acc += dist
        dist = dist @ P
    return float(acc / horizon @ model.loss_probs)


def burst_histogram(received) -> dict[int, int]:
    """Counts of maximal runs of lost packets, keyed by run length."""
    lost = ~np.asarray(received, dtype=bool)
    runs = Counter()
    n = 0
    for flag in lost:
        if flag:
            n += 1
        elif n:
            runs[n] += 1
            n = 0
    if n:
        runs[n] += 1
    return dict(sorted(runs.items()))


def loss_run_distribution(model: ThreeStateModel, max_len: int) -> np.ndarray:
    """Stationary probability that a loss run has length 1..max_len.

    A run is a received packet, ``k`` losses, then a received packet:
    ``pi D_R (P D_L)^k P D_R 1``, normalized over all ``k >= 1``.
    """
    P, pi = model.matrix, stationary_distribution(model)
    D_L = np.diag(model.loss_probs)
    D_R = np.diag(1.0 - model.loss_probs)
    end = P @ D_R @ np.ones(3)
    v = pi @ D_R
    M = P @ D_L
    probs = np.empty(max_len)
    for k in range(max_len):
        v = v @ M
        probs[k] = v @ end
    # total over all k >= 1 via the geometric matrix series
    total = (pi @ D_R @ M @ np.linalg.inv(np.eye(3) - M)) @ end
    return probs / total


def dwell_times(states: np.ndarray, state: int) -> np.ndarray:
    """Lengths of complete visits to ``state`` (visits cut by either end are dropped)."""
    s = np.asarray(states)
    inside = (s == state).astype(np.int8)
    edges = np.diff(np.concatenate([[0], inside, [0]]))
    starts, ends = np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)
    keep = (starts > 0) & (ends < len(s))
    return (ends - starts)[keep]


def chi_square_pvalue(observed_lengths: np.ndarray, pmf: np.ndarray, min_expected: float = 5.0) -> float:
    """Goodness of fit of run lengths (1-based) to ``pmf[k-1]``.

    Bins with small expectation are pooled into one tail bin.
    """
    lengths = np.asarray(observed_lengths)
    n = len(lengths)
    counts = np.bincount(lengths, minlength=len(pmf) + 1)[1:len(pmf) + 1].astype(float)
    expected = n * np.asarray(pmf, dtype=float)
    keep = np.flatnonzero(expected >= min_expected)
    if len(keep) < 2:
        raise ValueError("not enough data for a chi-square test")
    cut = keep[-1] + 1
    obs = np.append(counts[:cut], n - counts[:cut].sum())
    exp = np.append(expected[:cut], n - expected[:cut].sum())
    if exp[-1] < min_expected:
        obs[-2] += obs[-1]
        exp[-2] += exp[-1]
        obs, exp = obs[:-1], exp[:-1]
    return float(stats.chisquare(obs, exp).pvalue)


def geometric_pmf(p_stay: float, max_len: int) -> np.ndarray:
    k = np.arange(1, max_len + 1)
    return (1 - p_stay) * p_stay ** (k - 1)


def read_trace(path) -> np.ndarray:
    """Trace file: one character per packet, ``1`` = lost, ``0`` = received."""
    text = open(path).read().strip()
    if set(text) - {"0", "1"}:
        raise ValueError(f"{path}: trace may contain only 0 and 1")
    return np.array([c == "0" for c in text], dtype=bool)


def write_trace(path, received):
    with open(path, "w") as f:
        f.write("".join("0" if r else "1" for r in np.asarray(received, dtype=bool)) + "\n")
