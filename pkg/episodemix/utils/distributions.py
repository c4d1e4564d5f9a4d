"""Log-space primitives for the elementary distributions the episode model composes.

Every distribution is immutable once built. Estimation goes through small
statistic accumulators (``*Stats``) that are merged associatively and turned
into a new distribution by :func:`weighted_mle_update`.
"""
import logging
import math
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import gammaln, logsumexp

from episodemix.core.config import settings
from episodemix.core.exceptions import EmptySequence, OutOfSupport, ZeroWeight

logger = logging.getLogger(__name__)

NORMALIZATION_TOL = 1e-9


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


def safe_log(values: np.ndarray) -> np.ndarray:
    with np.errstate(divide='ignore'):
        out = np.log(values)
    out.setflags(write=False)
    return out


def log_sum_exp(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted ``log(sum(exp(values)))`` along ``axis``; slices that are all -inf give -inf."""
    peak = np.max(values, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    with np.errstate(divide='ignore'):
        out = np.log(np.exp(values - peak).sum(axis=axis, keepdims=True)) + peak
    return np.squeeze(out, axis=axis)


def _check_simplex(probs: np.ndarray, what: str, axis: int = -1) -> None:
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise ValueError(f"{what} must be finite and non-negative")
    sums = probs.sum(axis=axis)
    if np.any(np.abs(sums - 1.0) > NORMALIZATION_TOL):
        raise ValueError(f"{what} must sum to 1 (got {np.round(sums, 12)})")


class CategoricalDist:
    """Distribution over a finite vocabulary of item ids ``0..V-1``."""

    __slots__ = ("probs", "log_probs")

    def __init__(self, probs: Sequence[float]):
        probs = _frozen(probs)
        if probs.ndim != 1 or probs.size == 0:
            raise ValueError("categorical probabilities must be a non-empty vector")
        _check_simplex(probs, "categorical probabilities")
        self.probs = probs
        self.log_probs = safe_log(probs)

    @classmethod
    def uniform(cls, size: int) -> "CategoricalDist":
        return cls(np.full(size, 1.0 / size))

    @property
    def size(self) -> int:
        return self.probs.size

    def log_pmf(self, item: int) -> float:
        return float(self.log_probs[item])

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.choice(self.probs.size, p=self.probs))

    def __repr__(self):
        return f"CategoricalDist({self.probs.tolist()})"


class PoissonDist:
    __slots__ = ("rate",)

    def __init__(self, rate: float):
        if not rate >= settings.POISSON_RATE_FLOOR:
            raise ValueError(f"Poisson rate must be >= {settings.POISSON_RATE_FLOOR}, got {rate}")
        self.rate = float(rate)

    def log_pmf(self, k) -> float:
        return poisson_log_pmf(k, self)

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.poisson(self.rate))

    def __repr__(self):
        return f"PoissonDist({self.rate!r})"


class BernoulliDist:
    """``p`` is the probability of the value 1."""

    __slots__ = ("p",)

    def __init__(self, p: float):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"Bernoulli probability must lie in [0, 1], got {p}")
        self.p = float(p)

    def log_pmf(self, value: int) -> float:
        prob = self.p if value else 1.0 - self.p
        return math.log(prob) if prob > 0 else -math.inf

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.random() < self.p)

    def __repr__(self):
        return f"BernoulliDist({self.p!r})"


class QuantizedGaussianDist:
    """Gaussian density evaluated on the integers of ``[support_min, support_max]`` and renormalised."""

    __slots__ = ("mean", "variance", "support_min", "support_max", "log_normalizer", "_log_pmf")

    def __init__(self, mean: float, variance: float,
                 support_min: Optional[int] = None, support_max: Optional[int] = None):
        support_min = settings.AGE_SUPPORT_MIN if support_min is None else int(support_min)
        support_max = settings.AGE_SUPPORT_MAX if support_max is None else int(support_max)
        if support_min > support_max:
            raise ValueError("empty support")
        if not variance > 0:
            raise ValueError(f"variance must be positive, got {variance}")
        self.mean = float(mean)
        self.variance = float(variance)
        self.support_min = support_min
        self.support_max = support_max
        support = np.arange(support_min, support_max + 1, dtype=float)
        log_density = -(self.mean - support) ** 2 / (2.0 * self.variance) - 0.5 * math.log(2.0 * math.pi * self.variance)
        self.log_normalizer = float(logsumexp(log_density))
        self._log_pmf = _frozen(log_density - self.log_normalizer)

    @property
    def support(self) -> np.ndarray:
        return np.arange(self.support_min, self.support_max + 1)

    def log_pmf(self, a: int) -> float:
        return qgauss_log_pmf(a, self)

    @property
    def log_pmf_table(self) -> np.ndarray:
        """Log-pmf over the whole support, index 0 is ``support_min``."""
        return self._log_pmf

    def pmf(self) -> np.ndarray:
        return np.exp(self._log_pmf)

    def sample(self, rng: np.random.Generator) -> int:
        return int(self.support_min + rng.choice(self._log_pmf.size, p=self.pmf()))

    def __repr__(self):
        return (f"QuantizedGaussianDist(mean={self.mean!r}, variance={self.variance!r}, "
                f"support=[{self.support_min}, {self.support_max}])")


class MarkovChainDist:
    """First-order chain over items: initial distribution plus row-stochastic transitions."""

    __slots__ = ("initial", "transition", "log_initial", "log_transition")

    def __init__(self, initial: Sequence[float], transition):
        initial = _frozen(initial)
        transition = _frozen(transition)
        if initial.ndim != 1 or transition.shape != (initial.size, initial.size):
            raise ValueError("transition matrix must be square and match the initial distribution")
        _check_simplex(initial, "initial distribution")
        _check_simplex(transition, "transition rows", axis=1)
        self.initial = initial
        self.transition = transition
        self.log_initial = safe_log(initial)
        self.log_transition = safe_log(transition)

    @property
    def size(self) -> int:
        return self.initial.size

    def log_likelihood(self, seq: Sequence[int]) -> float:
        return mc_log_likelihood(seq, self)

    def sample(self, rng: np.random.Generator, length: int = 1) -> list:
        if length <= 0:
            return []
        path = [int(rng.choice(self.size, p=self.initial))]
        for _ in range(length - 1):
            path.append(int(rng.choice(self.size, p=self.transition[path[-1]])))
        return path

    def __repr__(self):
        return f"MarkovChainDist(size={self.size})"


Distribution = Union[CategoricalDist, PoissonDist, BernoulliDist, QuantizedGaussianDist, MarkovChainDist]


def poisson_log_pmf(k, d: Union[PoissonDist, float, np.ndarray]):
    """``k ln(rate) - rate - ln(k!)``; ``k`` and the rate broadcast as numpy arrays."""
    rate = d.rate if isinstance(d, PoissonDist) else d
    k = np.asarray(k, dtype=float)
    out = k * np.log(rate) - rate - gammaln(k + 1.0)
    return float(out) if np.ndim(out) == 0 else out


def qgauss_log_pmf(a: int, d: QuantizedGaussianDist) -> float:
    if not d.support_min <= a <= d.support_max:
        raise OutOfSupport(f"value {a} outside support [{d.support_min}, {d.support_max}]")
    return float(-(d.mean - a) ** 2 / (2.0 * d.variance) - d.log_normalizer
                 - 0.5 * math.log(2.0 * math.pi * d.variance))


def mc_log_likelihood(seq: Sequence[int], d: MarkovChainDist) -> float:
    seq = np.asarray(seq, dtype=int)
    if seq.size == 0:
        raise EmptySequence("Markov chain likelihood needs at least one item")
    return float(d.log_initial[seq[0]] + d.log_transition[seq[:-1], seq[1:]].sum())


def sample(d: Distribution, rng: np.random.Generator):
    return d.sample(rng)


# Sufficient statistics ------------------------------------------------------

class CategoricalStats:
    def __init__(self, size: int, counts: Optional[np.ndarray] = None):
        self.counts = np.zeros(size) if counts is None else np.array(counts, dtype=float)

    def add(self, item: int, weight: float = 1.0) -> "CategoricalStats":
        self.counts[item] += weight
        return self

    def merge(self, other: "CategoricalStats") -> "CategoricalStats":
        self.counts += other.counts
        return self


class PoissonStats:
    def __init__(self, weight: float = 0.0, weighted_sum: float = 0.0):
        self.weight = weight
        self.weighted_sum = weighted_sum

    def add(self, k: float, weight: float = 1.0) -> "PoissonStats":
        self.weight += weight
        self.weighted_sum += weight * k
        return self

    def merge(self, other: "PoissonStats") -> "PoissonStats":
        self.weight += other.weight
        self.weighted_sum += other.weighted_sum
        return self


class BernoulliStats:
    def __init__(self, weight: float = 0.0, weighted_ones: float = 0.0):
        self.weight = weight
        self.weighted_ones = weighted_ones

    def add(self, value: int, weight: float = 1.0) -> "BernoulliStats":
        self.weight += weight
        self.weighted_ones += weight * value
        return self

    def merge(self, other: "BernoulliStats") -> "BernoulliStats":
        self.weight += other.weight
        self.weighted_ones += other.weighted_ones
        return self


class GaussianStats:
    def __init__(self, weight: float = 0.0, weighted_sum: float = 0.0, weighted_sum_sq: float = 0.0,
                 support_min: Optional[int] = None, support_max: Optional[int] = None):
        self.weight = weight
        self.weighted_sum = weighted_sum
        self.weighted_sum_sq = weighted_sum_sq
        self.support_min = support_min
        self.support_max = support_max

    def add(self, value: float, weight: float = 1.0) -> "GaussianStats":
        self.weight += weight
        self.weighted_sum += weight * value
        self.weighted_sum_sq += weight * value * value
        return self

    def merge(self, other: "GaussianStats") -> "GaussianStats":
        self.weight += other.weight
        self.weighted_sum += other.weighted_sum
        self.weighted_sum_sq += other.weighted_sum_sq
        return self


class MarkovChainStats:
    def __init__(self, size: int):
        self.initial_counts = np.zeros(size)
        self.transition_counts = np.zeros((size, size))

    def add(self, seq: Sequence[int], weight: float = 1.0) -> "MarkovChainStats":
        seq = np.asarray(seq, dtype=int)
        if seq.size:
            self.initial_counts[seq[0]] += weight
            np.add.at(self.transition_counts, (seq[:-1], seq[1:]), weight)
        return self

    def merge(self, other: "MarkovChainStats") -> "MarkovChainStats":
        self.initial_counts += other.initial_counts
        self.transition_counts += other.transition_counts
        return self


Stats = Union[CategoricalStats, PoissonStats, BernoulliStats, GaussianStats, MarkovChainStats]


# Estimation -----------------------------------------------------------------

def normalize_counts(counts: np.ndarray, previous: Optional[np.ndarray] = None,
                     smoothing: Optional[float] = None) -> np.ndarray:
    """Smoothed row normalisation ``(c + eps) / (total + eps * V)``.

    Rows without weight keep ``previous``; without a previous value they raise ZeroWeight.
    """
    eps = settings.SMOOTHING if smoothing is None else smoothing
    counts = np.asarray(counts, dtype=float)
    totals = counts.sum(axis=-1, keepdims=True)
    dead = totals[..., 0] <= 0
    if np.any(dead) and previous is None:
        raise ZeroWeight("no weight reached this distribution")
    out = (counts + eps) / (totals + eps * counts.shape[-1])
    if np.any(dead):
        out[dead] = np.asarray(previous, dtype=float)[dead]
    return out


def poisson_rates(weights: np.ndarray, weighted_sums: np.ndarray,
                  previous: Optional[np.ndarray] = None) -> np.ndarray:
    """Weighted-mean Poisson rates floored at ``POISSON_RATE_FLOOR``; zero-weight entries keep ``previous``."""
    weights = np.asarray(weights, dtype=float)
    dead = weights <= 0
    if np.any(dead) and previous is None:
        raise ZeroWeight("no weight reached this Poisson rate")
    with np.errstate(divide='ignore', invalid='ignore'):
        rates = np.maximum(np.asarray(weighted_sums, dtype=float) / weights, settings.POISSON_RATE_FLOOR)
    if np.any(dead):
        rates = np.where(dead, previous, rates)
    return rates


def weighted_mle_update(stats: Stats, previous: Optional[Distribution] = None) -> Distribution:
    """Weighted maximum-likelihood (smoothed where categorical) estimate from accumulated statistics."""
    if isinstance(stats, CategoricalStats):
        prev = previous.probs if previous is not None else None
        return CategoricalDist(normalize_counts(stats.counts[None, :], None if prev is None else prev[None, :])[0])

    if isinstance(stats, PoissonStats):
        if stats.weight <= 0:
            if previous is not None:
                return previous
            raise ZeroWeight("no weight reached this Poisson distribution")
        return PoissonDist(max(stats.weighted_sum / stats.weight, settings.POISSON_RATE_FLOOR))

    if isinstance(stats, BernoulliStats):
        if stats.weight <= 0:
            if previous is not None:
                return previous
            raise ZeroWeight("no weight reached this Bernoulli distribution")
        clamp = settings.BERNOULLI_CLAMP
        return BernoulliDist(min(max(stats.weighted_ones / stats.weight, clamp), 1.0 - clamp))

    if isinstance(stats, GaussianStats):
        if stats.weight <= 0:
            if previous is not None:
                return previous
            raise ZeroWeight("no weight reached this quantized Gaussian")
        mean = stats.weighted_sum / stats.weight
        variance = max(stats.weighted_sum_sq / stats.weight - mean * mean, settings.VARIANCE_FLOOR)
        support_min = stats.support_min if previous is None else previous.support_min
        support_max = stats.support_max if previous is None else previous.support_max
        return QuantizedGaussianDist(mean, variance, support_min, support_max)

    if isinstance(stats, MarkovChainStats):
        prev_init = previous.initial[None, :] if previous is not None else None
        prev_trans = previous.transition if previous is not None else None
        initial = normalize_counts(stats.initial_counts[None, :], prev_init)[0]
        if prev_trans is None:
            # rows never left keep a uniform row so the chain stays valid
            prev_trans = np.full(stats.transition_counts.shape, 1.0 / stats.transition_counts.shape[0])
        transition = normalize_counts(stats.transition_counts, prev_trans)
        return MarkovChainDist(initial, transition)

    raise TypeError(f"unsupported statistics type {type(stats).__name__}")
