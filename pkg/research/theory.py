"""
Numerical checks of the privacy guarantees on linear passport models.

Passive rule:  H = (W_p s_gamma^p) * (W_p x) + W_p s_beta^p
Active rule:   y = (W_a s_gamma^a) * (W_a H) + W_a s_beta^a

A passport left as None is not inserted (scale 1, bias 0).
"""
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from core.errors import ShapeMismatchError, TheoryError
from core.passport import PassportConfig, PassportSampler

LANCZOS_G = 7
LANCZOS_COEFFS = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)


def lanczos_log_gamma(z: float) -> float:
    """log Gamma(z) for z > 0 (Lanczos, g=7, n=9)."""
    if z <= 0:
        raise TheoryError(f"log-gamma needs z > 0, got {z}")
    if z < 0.5:
        return math.log(math.pi / math.sin(math.pi * z)) - lanczos_log_gamma(1.0 - z)
    z -= 1.0
    acc = LANCZOS_COEFFS[0]
    for i, c in enumerate(LANCZOS_COEFFS[1:], start=1):
        acc += c / (z + i)
    t = z + LANCZOS_G + 0.5
    return 0.5 * math.log(2 * math.pi) + (z + 0.5) * math.log(t) - t + math.log(acc)


def lanczos_gamma(z: float) -> float:
    return math.exp(lanczos_log_gamma(z))


def random_well_conditioned(rng: np.random.Generator, rows: int, cols: int, max_cond: float = 1e6) -> np.ndarray:
    for _ in range(1000):
        W = rng.standard_normal((rows, cols))
        if np.linalg.cond(W) <= max_cond:
            return W
    raise TheoryError(f"could not draw a {rows}x{cols} matrix with condition number <= {max_cond}")


@dataclass
class LinearInstance:
    W_p: np.ndarray
    W_a: np.ndarray
    x: np.ndarray
    s_gamma_p: Optional[np.ndarray] = None
    s_beta_p: Optional[np.ndarray] = None
    s_gamma_a: Optional[np.ndarray] = None
    s_beta_a: Optional[np.ndarray] = None

    def __post_init__(self):
        d_h, d_x = self.W_p.shape
        if self.W_a.shape[1] != d_h:
            raise ShapeMismatchError("W_a columns must equal W_p rows", expected=d_h, actual=self.W_a.shape[1])
        if self.x.shape != (d_x,):
            raise ShapeMismatchError("x", expected=(d_x,), actual=self.x.shape)
        for name, dim in (("s_gamma_p", d_x), ("s_beta_p", d_x), ("s_gamma_a", d_h), ("s_beta_a", d_h)):
            s = getattr(self, name)
            if s is not None and s.shape != (dim,):
                raise ShapeMismatchError(name, expected=(dim,), actual=s.shape)

    @property
    def D_gamma(self) -> np.ndarray:
        if self.s_gamma_p is None:
            return np.eye(self.W_p.shape[0])
        return np.diag(self.W_p @ self.s_gamma_p)

    @property
    def D_beta(self) -> np.ndarray:
        if self.s_beta_p is None:
            return np.zeros((self.W_p.shape[0], self.W_p.shape[0]))
        return np.diag(self.W_p @ self.s_beta_p)


def _passive_rule(W: np.ndarray, x: np.ndarray, s_gamma: Optional[np.ndarray], s_beta: Optional[np.ndarray]) -> np.ndarray:
    out = W @ x
    if s_gamma is not None:
        out = (W @ s_gamma) * out
    if s_beta is not None:
        out = out + W @ s_beta
    return out


def linear_forward(inst: LinearInstance, x: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    x = inst.x if x is None else np.asarray(x, dtype=np.float64)
    if x.shape != inst.x.shape:
        raise ShapeMismatchError("x", expected=inst.x.shape, actual=x.shape)
    H = _passive_rule(inst.W_p, x, inst.s_gamma_p, inst.s_beta_p)
    y = _passive_rule(inst.W_a, H, inst.s_gamma_a, inst.s_beta_a)
    return H, y


def bias_inversion_check(inst: LinearInstance, guess_beta: np.ndarray) -> Tuple[float, float]:
    """(||x - x_hat||, ||s_beta - s_beta'||) for the attacker x_hat = W_p^+ (H - W_p s_beta')."""
    W = inst.W_p
    if np.linalg.matrix_rank(W) < W.shape[1]:
        raise TheoryError("W_p columns are linearly dependent")
    if inst.s_gamma_p is not None:
        raise TheoryError("beta check needs a beta-only instance (s_gamma_p = None)")
    s_beta = inst.s_beta_p if inst.s_beta_p is not None else np.zeros(W.shape[1])
    H, _ = linear_forward(inst)
    x_hat = np.linalg.pinv(W) @ (H - W @ guess_beta)
    return float(np.linalg.norm(inst.x - x_hat)), float(np.linalg.norm(s_beta - guess_beta))


def scale_inversion_check(inst: LinearInstance, guess_gamma: np.ndarray) -> Tuple[float, float]:
    """(||x - x_hat||, ||(D_gamma^-1 - D_gamma'^-1) H|| / ||W_p||_2) with x_hat = W_p^-1 D_gamma'^-1 H."""
    W = inst.W_p
    if W.shape[0] != W.shape[1] or np.linalg.cond(W) >= 1e8:
        raise TheoryError("gamma check needs an invertible, well-conditioned W_p")
    if inst.s_beta_p is not None or inst.s_gamma_p is None:
        raise TheoryError("gamma check needs a gamma-only instance")
    d = W @ inst.s_gamma_p
    d_guess = W @ guess_gamma
    if np.any(d == 0) or np.any(d_guess == 0):
        raise TheoryError("singular passport diagonal")
    H, _ = linear_forward(inst)
    x_hat = np.linalg.solve(W, H / d_guess)
    actual = float(np.linalg.norm(inst.x - x_hat))
    bound = float(np.linalg.norm((1.0 / d - 1.0 / d_guess) * H) / np.linalg.norm(W, 2))
    return actual, bound


def recovery_probability_bound(m: int, eps: float, N: float) -> float:
    """pi^(m/2) eps^m / (Gamma(1 + m/2) N^m): volume of an eps-ball over the passport cube."""
    if m < 1 or eps <= 0 or N <= 0:
        raise TheoryError(f"recovery_probability_bound needs positive arguments (m={m}, eps={eps}, N={N})")
    log_bound = 0.5 * m * math.log(math.pi) + m * math.log(eps) - lanczos_log_gamma(1 + m / 2) - m * math.log(N)
    return math.exp(log_bound)


def montecarlo_margin(p: float, trials: int) -> float:
    return 3.0 * math.sqrt(p * (1.0 - p) / trials)


def _mc_shard(W_pinv: np.ndarray, W: np.ndarray, H: np.ndarray, x: np.ndarray, eps: float, N: float,
              trials: int, seq: np.random.SeedSequence, chunk: int = 20000) -> int:
    rng = np.random.default_rng(seq)
    m = W.shape[1]
    hits = 0
    done = 0
    while done < trials:
        size = min(chunk, trials - done)
        guesses = rng.uniform(-N, 0.0, size=(size, m))
        x_hat = (H[None, :] - guesses @ W.T) @ W_pinv.T
        hits += int(np.sum(np.linalg.norm(x_hat - x[None, :], axis=1) <= eps))
        done += size
    return hits


def recovery_probability_montecarlo(inst: LinearInstance, eps: float, N: float, trials: int,
                        rng: Union[np.random.Generator, int], shards: int = 8) -> float:
    """Fraction of uniform passport guesses from (-N, 0)^m that recover x within eps."""
    if trials < 1000:
        raise TheoryError(f"{trials} trials are too few for a meaningful estimate (need >= 1000)")
    m = inst.W_p.shape[1]
    if m > 4:
        raise TheoryError(f"passport dimension {m} too large for a Monte Carlo estimate (max 4)")
    if inst.s_gamma_p is not None:
        raise TheoryError("Monte Carlo check needs a beta-only instance")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    seqs = np.random.SeedSequence(int(rng.integers(2 ** 63))).spawn(shards)
    H, _ = linear_forward(inst)
    W_pinv = np.linalg.pinv(inst.W_p)
    sizes = [trials // shards + (1 if i < trials % shards else 0) for i in range(shards)]
    hits = sum(_mc_shard(W_pinv, inst.W_p, H, inst.x, eps, N, n, seq) for n, seq in zip(sizes, seqs) if n)
    return hits / trials


@dataclass
class LabelRecoveryInstance:
    """n_a samples (H_i, s_gamma_i^a, y_i) with y_i = T_i H_i, T_i = diag(W_a s_gamma_i^a) W_a."""

    W_a: np.ndarray
    H: List[np.ndarray]
    passports: List[np.ndarray]
    y: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if len(self.H) != len(self.passports):
            raise ShapeMismatchError("one passport per sample", expected=len(self.H), actual=len(self.passports))
        if not self.y:
            self.y = [T @ h for T, h in zip(self.T, self.H)]

    @property
    def n_a(self) -> int:
        return len(self.H)

    @property
    def T(self) -> List[np.ndarray]:
        return [np.diag(self.W_a @ s) @ self.W_a for s in self.passports]

    @property
    def identical_H(self) -> bool:
        return all(np.array_equal(h, self.H[0]) for h in self.H[1:])


def attack_training_error(inst: LabelRecoveryInstance, W_att: np.ndarray) -> float:
    """sum_i ||W_att H_i - y_i||_2 (non-squared)."""
    return float(sum(np.linalg.norm(W_att @ h - y) for h, y in zip(inst.H, inst.y)))


@dataclass
class LabelRecoveryResult:
    oracle_min_error: float
    pairwise_bound: Optional[float]
    W_att: np.ndarray
    stationarity: float
    iterations: int


def _stationarity(inst: LabelRecoveryInstance, W: np.ndarray, zero_tol: float = 1e-9) -> float:
    """Distance-to-zero proxy for the subdifferential: zero residuals may absorb up to ||H_i|| each."""
    G = np.zeros_like(W)
    slack = 0.0
    for h, y in zip(inst.H, inst.y):
        r = W @ h - y
        norm = np.linalg.norm(r)
        if norm > zero_tol:
            G += np.outer(r / norm, h)
        else:
            slack += np.linalg.norm(h)
    return max(0.0, float(np.linalg.norm(G)) - slack)


def minimize_attack_error(inst: LabelRecoveryInstance, irls_iters: int = 500, subgrad_iters: int = 3000,
                          tol: float = 1e-10) -> Tuple[np.ndarray, float, float, int]:
    """Reweighted least squares warm start, then diminishing-step subgradient descent keeping the best iterate."""
    H = np.stack(inst.H, axis=1)
    Y = np.stack(inst.y, axis=1)
    W = Y @ np.linalg.pinv(H)
    best_W, best = W, attack_training_error(inst, W)
    iterations = 0
    for _ in range(irls_iters):
        iterations += 1
        res = np.linalg.norm(W @ H - Y, axis=0)
        w = 1.0 / np.maximum(res, 1e-12)
        W = (Y * w) @ H.T @ np.linalg.pinv((H * w) @ H.T)
        err = attack_training_error(inst, W)
        improved = err < best - tol
        if err < best:
            best_W, best = W, err
        if not improved:
            break
    W = best_W
    scale = max(best, 1e-12) / max(1.0, float(np.sum(np.linalg.norm(H, axis=0) ** 2)))
    for t in range(subgrad_iters):
        iterations += 1
        G = np.zeros_like(W)
        for h, y in zip(inst.H, inst.y):
            r = W @ h - y
            n = np.linalg.norm(r)
            if n > 1e-15:
                G += np.outer(r / n, h)
        gnorm = np.linalg.norm(G)
        if gnorm < tol:
            break
        W = W - (scale / math.sqrt(t + 1)) * G / gnorm
        err = attack_training_error(inst, W)
        if err < best:
            best_W, best = W, err
    return best_W, best, _stationarity(inst, best_W), iterations


def label_recovery_check(inst: LabelRecoveryInstance) -> LabelRecoveryResult:
    """Minimum attack training error and, for identical H, the pairwise lower bound
    (1 / (n_a - 1)) * sum over pairs ||(T_i - T_j) H||."""
    if inst.n_a < 1:
        raise TheoryError("no samples")
    W, best, stationarity, iterations = minimize_attack_error(inst)
    bound = None
    if inst.identical_H:
        if inst.n_a < 2:
            raise TheoryError("pairwise bound needs n_a >= 2")
        bound = float(sum(np.linalg.norm(a - b) for a, b in combinations(inst.y, 2)) / (inst.n_a - 1))
    return LabelRecoveryResult(oracle_min_error=best, pairwise_bound=bound, W_att=W, stationarity=stationarity,
                          iterations=iterations)


def passport_spread_bound(passports: Sequence[np.ndarray]) -> float:
    if len(passports) < 2:
        raise TheoryError("need at least two passports")
    return float(sum(np.linalg.norm(np.asarray(a) - np.asarray(b)) for a, b in combinations(passports, 2))
                 / (len(passports) - 1))


def passport_distance_trend(sigma2s: Sequence[float], pairs: int, dim: int, N: float,
                            rng: np.random.Generator) -> Dict[float, float]:
    """Mean distance between two per-sample passports of one party, for each sigma2."""
    trend = {}
    for sigma2 in sigma2s:
        sampler = PassportSampler(PassportConfig(N=N, sigma2=sigma2, shape=(dim,), scope="per_sample"), rng)
        dists = []
        for _ in range(pairs):
            key = sampler.next_key(2)
            dists.append(np.linalg.norm(key.s_gamma[0] - key.s_gamma[1]))
        trend[float(sigma2)] = float(np.mean(dists))
    logger.debug(f"[Theory] passport distance trend {trend}")
    return trend
