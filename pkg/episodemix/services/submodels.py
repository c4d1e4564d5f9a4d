"""Stream sub-models: collection mixtures, Markov-chain sequence mixtures and HMM sequence mixtures.

Each mixture keeps its per-state parameters stacked in arrays (state along the
first axis) so one episode is scored against every state in a single numpy
expression. The EM hooks follow the usual split:

    evaluate(data)                       -> per-state log-likelihoods (+ cached forward pass)
    _initialize_sufficient_statistics()  -> empty accumulator
    accumulate(stats, data, ev, weights) -> add responsibility-weighted counts
    do_mstep(stats)                      -> new mixture, dead states keep their parameters
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.special import logsumexp

from episodemix.core.exceptions import UnknownToken
from episodemix.models.models import Stream
from episodemix.utils.distributions import (
    CategoricalDist,
    MarkovChainDist,
    PoissonDist,
    safe_log,
    mc_log_likelihood,
    normalize_counts,
    poisson_log_pmf,
    poisson_rates,
)

logger = logging.getLogger(__name__)


# Encoded stream data ---------------------------------------------------------

def count_rows(rows: Sequence[Sequence[int]], n_cols: int) -> csr_matrix:
    """Sparse (row x column) counts of integer ids; repeated ids within a row add up."""
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(r) for r in rows])
    indices = np.concatenate([np.zeros(0, dtype=np.int64)] + [np.asarray(r, dtype=np.int64) for r in rows])
    return csr_matrix((np.ones(indices.size), indices, indptr), shape=(len(rows), n_cols))


class TimepointCounts:
    """A sequence of multisets as a sparse (timepoint x item) count matrix."""

    __slots__ = ("counts", "sizes")

    def __init__(self, timepoints: Sequence[Sequence[int]], vocab_size: int):
        self.counts = count_rows(timepoints, vocab_size)
        self.sizes = np.array([len(tp) for tp in timepoints], dtype=float)

    def __len__(self):
        return self.sizes.size


# Chunk batches ---------------------------------------------------------------

class ItemBatch:
    """Item multisets of a chunk of episodes as one (episode x item) count matrix."""

    __slots__ = ("counts", "sizes")

    def __init__(self, rows: Sequence[np.ndarray], vocab_size: int):
        self.counts = count_rows(rows, vocab_size)
        self.sizes = np.array([len(r) for r in rows], dtype=float)

    def __len__(self):
        return self.sizes.size


class SequenceBatch:
    """Item sequences of a chunk: one-hot first items and flattened transition-pair counts."""

    __slots__ = ("sizes", "first", "pairs")

    def __init__(self, rows: Sequence[np.ndarray], vocab_size: int):
        rows = [np.asarray(r, dtype=np.int64) for r in rows]
        self.sizes = np.array([r.size for r in rows], dtype=float)
        self.first = count_rows([r[:1] for r in rows], vocab_size)
        self.pairs = count_rows([r[:-1] * vocab_size + r[1:] for r in rows], vocab_size * vocab_size)

    def __len__(self):
        return self.sizes.size


class TimepointBatch:
    """Multiset sequences of a chunk with every timepoint stacked episode by episode.

    ``counts`` and ``sizes`` hold one row per stacked timepoint; row r sits at
    slot ``(steps[r], owners[r])`` of the padded (timepoint x episode) layout,
    whose occupied slots are flagged in ``active``.
    """

    __slots__ = ("counts", "sizes", "lengths", "steps", "owners", "active")

    def __init__(self, sequences: Sequence[TimepointCounts], vocab_size: int):
        self.lengths = np.array([len(s) for s in sequences], dtype=np.int64)
        row_sizes = np.concatenate([np.zeros(0, dtype=np.int64)] + [np.diff(s.counts.indptr) for s in sequences])
        indptr = np.zeros(row_sizes.size + 1, dtype=np.int64)
        indptr[1:] = np.cumsum(row_sizes)
        indices = np.concatenate([np.zeros(0, dtype=np.int64)] + [s.counts.indices for s in sequences])
        data = np.concatenate([np.zeros(0)] + [s.counts.data for s in sequences])
        self.counts = csr_matrix((data, indices, indptr), shape=(row_sizes.size, vocab_size))
        self.sizes = np.concatenate([np.zeros(0)] + [s.sizes for s in sequences])
        self.owners = np.repeat(np.arange(self.lengths.size), self.lengths)
        starts = np.cumsum(self.lengths) - self.lengths
        self.steps = np.arange(self.owners.size) - np.repeat(starts, self.lengths)
        self.active = np.zeros((int(self.lengths.max(initial=0)), self.lengths.size), dtype=bool)
        self.active[self.steps, self.owners] = True

    def __len__(self):
        return self.lengths.size

    @property
    def max_length(self) -> int:
        return self.active.shape[0]


def _check_ids(ids: np.ndarray, vocab_size: int, stream: Optional[Stream]) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        bad = ids[(ids < 0) | (ids >= vocab_size)][0]
        raise UnknownToken(stream.value if stream is not None else "?", int(bad))


def encode_items(items: Sequence[int], vocab_size: int, stream: Optional[Stream] = None) -> np.ndarray:
    ids = np.asarray(items, dtype=np.int64).reshape(-1)
    _check_ids(ids, vocab_size, stream)
    return ids


def encode_timepoints(timepoints: Sequence[Sequence[int]], vocab_size: int,
                      stream: Optional[Stream] = None) -> TimepointCounts:
    for tp in timepoints:
        _check_ids(np.asarray(tp, dtype=np.int64), vocab_size, stream)
    return TimepointCounts(timepoints, vocab_size)


# State views -----------------------------------------------------------------

class CollectionState:
    __slots__ = ("length", "items")

    def __init__(self, length: PoissonDist, items: CategoricalDist):
        self.length = length
        self.items = items


class MarkovSeqState:
    __slots__ = ("length", "chain")

    def __init__(self, length: PoissonDist, chain: MarkovChainDist):
        self.length = length
        self.chain = chain


class HmmSeqState:
    __slots__ = ("length", "state_chain")

    def __init__(self, length: PoissonDist, state_chain: MarkovChainDist):
        self.length = length
        self.state_chain = state_chain


class HmmEmission:
    """Per-HMM-state item count (Poisson) and item distribution, shared by every mixture state of a stream."""

    __slots__ = ("rates", "probs", "log_rates", "log_probs")

    def __init__(self, rates: Sequence[float], probs):
        rates = np.array(rates, dtype=float)
        probs = np.array(probs, dtype=float)
        if probs.ndim != 2 or probs.shape[0] != rates.size:
            raise ValueError("emission table needs one item distribution per HMM state")
        for row in probs:
            CategoricalDist(row)  # validates each row
        for rate in rates:
            PoissonDist(rate)
        rates.setflags(write=False)
        probs.setflags(write=False)
        self.rates = rates
        self.probs = probs
        self.log_rates = safe_log(rates)
        self.log_probs = safe_log(probs)

    @property
    def n_hmm(self) -> int:
        return self.rates.size

    @property
    def vocab_size(self) -> int:
        return self.probs.shape[1]

    def count(self, s: int) -> PoissonDist:
        return PoissonDist(self.rates[s])

    def items(self, s: int) -> CategoricalDist:
        return CategoricalDist(self.probs[s])

    def log_matrix(self, data) -> np.ndarray:
        """(T x S) emission log-densities of every timepoint under every HMM state."""
        if data.sizes.size == 0:
            return np.zeros((0, self.n_hmm))
        log_counts = poisson_log_pmf(data.sizes[:, None], self.rates[None, :])
        return log_counts + np.asarray(data.counts @ self.log_probs.T)


# Single-state likelihoods ----------------------------------------------------

def collection_log_lik(items: Sequence[int], state: CollectionState) -> float:
    ids = encode_items(items, state.items.size)
    return float(poisson_log_pmf(ids.size, state.length) + state.items.log_probs[ids].sum())


def mseq_log_lik(seq: Sequence[int], state: MarkovSeqState) -> float:
    ids = encode_items(seq, state.chain.size)
    out = poisson_log_pmf(ids.size, state.length)
    if ids.size:
        out += mc_log_likelihood(ids, state.chain)
    return float(out)


class HmmPosterior:
    """Smoothed HMM posteriors for one sequence under one or more mixture states.

    ``state_marginals`` is (K, T, S); ``transition_sums`` is (K, S, S), the pairwise
    marginals summed over adjacent timepoint pairs.
    """

    __slots__ = ("state_marginals", "transition_sums", "transition_marginals")

    def __init__(self, state_marginals, transition_sums, transition_marginals=None):
        self.state_marginals = state_marginals
        self.transition_sums = transition_sums
        self.transition_marginals = transition_marginals


def _safe_normalize(values: np.ndarray):
    """Normalise the last axis; rows summing to zero stay zero with scale 0."""
    scale = values.sum(axis=-1)
    with np.errstate(divide='ignore', invalid='ignore'):
        out = np.where(scale[..., None] > 0, values / scale[..., None], 0.0)
    return out, scale


def _forward(initial, transition, log_emission):
    """Scaled forward pass for K chains sharing one emission matrix.

    Emission log-densities are max-normalised per timepoint before leaving log
    space, the chains are rescaled to sum to one at every step, and both
    normalisers are added back in log space.
    """
    T = log_emission.shape[0]
    K, S = initial.shape
    shift = log_emission.max(axis=1)
    finite = np.isfinite(shift)
    b = np.zeros_like(log_emission)
    b[finite] = np.exp(log_emission[finite] - shift[finite, None])
    alpha = np.empty((T, K, S))
    scale = np.empty((T, K))
    alpha[0], scale[0] = _safe_normalize(initial * b[0])
    for t in range(1, T):
        alpha[t], scale[t] = _safe_normalize(np.einsum('ki,kij->kj', alpha[t - 1], transition) * b[t])
    with np.errstate(divide='ignore'):
        log_lik = np.log(scale).sum(axis=0) + (shift.sum() if finite.all() else -np.inf)
    return log_lik, alpha, scale, b


def _backward(transition, alpha, scale, b, per_step: bool = False) -> HmmPosterior:
    T, K, S = alpha.shape
    beta = np.ones((T, K, S))
    safe = np.where(scale > 0, scale, 1.0)
    for t in range(T - 2, -1, -1):
        beta[t] = np.einsum('kij,kj->ki', transition, b[t + 1] * beta[t + 1]) / safe[t + 1][:, None]
    state_marginals = np.transpose(alpha * beta, (1, 0, 2))
    if T > 1:
        right = b[1:, None, :] * beta[1:] / safe[1:, :, None]
        transition_sums = transition * np.einsum('tki,tkj->kij', alpha[:-1], right)
        per = transition[None] * np.einsum('tki,tkj->tkij', alpha[:-1], right) if per_step else None
    else:
        transition_sums = np.zeros((K, S, S))
        per = np.zeros((0, K, S, S)) if per_step else None
    if per is not None:
        per = np.transpose(per, (1, 0, 2, 3))
    return HmmPosterior(state_marginals, transition_sums, per)


def _forward_batch(initial, transition, log_emission, active):
    """Scaled forward pass for a chunk of sequences, padded to (T x N x S) emissions.

    Returns (N x K) log-likelihoods and the (T x N x K x S) filtered
    distributions. Padding slots get scale 1 and add nothing.
    """
    T, N, S = log_emission.shape
    K = initial.shape[0]
    shift = np.where(active, log_emission.max(axis=2, initial=-np.inf), 0.0)
    finite = np.isfinite(shift)
    b = np.zeros_like(log_emission)
    b[finite] = np.exp(log_emission[finite] - shift[finite][:, None])
    alpha = np.empty((T, N, K, S))
    scale = np.ones((T, N, K))
    prior = np.broadcast_to(initial, (N, K, S))
    for t in range(T):
        if t:
            prior = np.einsum('nki,kij->nkj', alpha[t - 1], transition)
        alpha[t], step_scale = _safe_normalize(prior * b[t][:, None, :])
        scale[t] = np.where(active[t][:, None], step_scale, 1.0)
    with np.errstate(divide='ignore'):
        log_lik = np.log(scale).sum(axis=0)
    shift_sum = np.where(finite.all(axis=0), np.where(finite, shift, 0.0).sum(axis=0), -np.inf)
    return log_lik + shift_sum[:, None], alpha, scale, b


def _backward_batch(transition, alpha, scale, b, active, weights):
    """State marginals (T x N x K x S) and the (K x S x S) pairwise marginals summed under ``weights``."""
    T, N, K, S = alpha.shape
    beta = np.ones_like(alpha)
    safe = np.where(scale > 0, scale, 1.0)
    for t in range(T - 2, -1, -1):
        step = np.einsum('kij,nkj->nki', transition, b[t + 1][:, None, :] * beta[t + 1]) / safe[t + 1][..., None]
        beta[t] = np.where(active[t + 1][:, None, None], step, 1.0)
    marginals = alpha * beta * active[:, :, None, None]
    if T < 2:
        return marginals, np.zeros((K, S, S))
    right = b[1:, :, None, :] * beta[1:] / safe[1:][..., None] * active[1:, :, None, None]
    left = alpha[:-1] * weights[None, :, :, None]
    return marginals, transition * np.einsum('tnki,tnkj->kij', left, right)


def hmm_forward(seq: Sequence[Sequence[int]], seq_state: HmmSeqState,
                emissions: HmmEmission) -> Tuple[float, Optional[HmmPosterior]]:
    """Log-likelihood of a multiset sequence under one HMM mixture state, with smoothed posteriors.

    The posterior is None for an empty sequence (only the length factor applies).
    """
    data = seq if isinstance(seq, TimepointCounts) else encode_timepoints(seq, emissions.vocab_size)
    length_term = poisson_log_pmf(len(data), seq_state.length)
    if len(data) == 0:
        return float(length_term), None
    initial = seq_state.state_chain.initial[None, :]
    transition = seq_state.state_chain.transition[None, :, :]
    log_lik, alpha, scale, b = _forward(initial, transition, emissions.log_matrix(data))
    posterior = _backward(transition, alpha, scale, b, per_step=True)
    return float(length_term + log_lik[0]), HmmPosterior(
        posterior.state_marginals[0], posterior.transition_sums[0], posterior.transition_marginals[0])


def stream_posterior(stream_data, sub_model, mixing_log_weights: np.ndarray) -> Tuple[float, np.ndarray]:
    """Log marginal of one stream under mixing weights, and the sub-model state posterior."""
    joint = np.asarray(mixing_log_weights, dtype=float) + sub_model.evaluate(stream_data).log_lik
    log_marginal = float(logsumexp(joint))
    return log_marginal, np.exp(joint - log_marginal)


# Mixtures --------------------------------------------------------------------

class StreamEvaluation:
    __slots__ = ("log_lik", "forward")

    def __init__(self, log_lik: np.ndarray, forward=None):
        self.log_lik = log_lik
        self.forward = forward


def _add_lengths(stats, n: float, weights: np.ndarray) -> None:
    stats.length_weight += weights
    stats.length_sum += weights * n


def _add_batch_lengths(stats, sizes: np.ndarray, weights: np.ndarray) -> None:
    stats.length_weight += weights.sum(axis=0)
    stats.length_sum += sizes @ weights


class CollectionStats:
    def __init__(self, n_states: int, vocab_size: int):
        self.length_weight = np.zeros(n_states)
        self.length_sum = np.zeros(n_states)
        self.items = np.zeros((n_states, vocab_size))

    def merge(self, other: "CollectionStats") -> "CollectionStats":
        self.length_weight += other.length_weight
        self.length_sum += other.length_sum
        self.items += other.items
        return self


class CollectionMixture:
    """Mixture over unordered item multisets: Poisson count plus i.i.d. categorical items per state."""

    kind = "collection"

    def __init__(self, rates: Sequence[float], probs):
        self.rates = np.array(rates, dtype=float)
        self.probs = np.array(probs, dtype=float)
        if self.probs.shape[0] != self.rates.size:
            raise ValueError("one item distribution per state required")
        self.states: List[CollectionState] = [
            CollectionState(PoissonDist(r), CategoricalDist(p)) for r, p in zip(self.rates, self.probs)]
        self.log_probs = safe_log(self.probs)

    @classmethod
    def from_states(cls, states: Sequence[CollectionState]) -> "CollectionMixture":
        return cls([s.length.rate for s in states], [s.items.probs for s in states])

    @classmethod
    def blank(cls, n_states: int, vocab_size: int) -> "CollectionMixture":
        return cls(np.ones(n_states), np.full((n_states, vocab_size), 1.0 / vocab_size))

    @property
    def n_states(self) -> int:
        return self.rates.size

    @property
    def vocab_size(self) -> int:
        return self.probs.shape[1]

    def encode(self, items: Sequence[int], stream: Optional[Stream] = None) -> np.ndarray:
        return encode_items(items, self.vocab_size, stream)

    def evaluate(self, ids: np.ndarray) -> StreamEvaluation:
        return StreamEvaluation(poisson_log_pmf(ids.size, self.rates) + self.log_probs[:, ids].sum(axis=1))

    def _initialize_sufficient_statistics(self) -> CollectionStats:
        return CollectionStats(self.n_states, self.vocab_size)

    def accumulate(self, stats: CollectionStats, ids: np.ndarray, evaluation, weights: np.ndarray) -> None:
        if not np.any(weights):
            return
        _add_lengths(stats, ids.size, weights)
        if ids.size:
            states = np.arange(self.n_states)[:, None]
            np.add.at(stats.items, (states, ids[None, :]), weights[:, None])

    def encode_batch(self, rows: Sequence[np.ndarray]) -> ItemBatch:
        return ItemBatch(rows, self.vocab_size)

    def evaluate_batch(self, batch: ItemBatch) -> StreamEvaluation:
        """(N x K) log-likelihoods of every episode in the chunk under every state."""
        log_lik = poisson_log_pmf(batch.sizes[:, None], self.rates[None, :])
        return StreamEvaluation(log_lik + np.asarray(batch.counts @ self.log_probs.T))

    def accumulate_batch(self, stats: CollectionStats, batch: ItemBatch, evaluation,
                         weights: np.ndarray) -> None:
        _add_batch_lengths(stats, batch.sizes, weights)
        stats.items += np.asarray(batch.counts.T @ weights).T

    def do_mstep(self, stats: CollectionStats) -> "CollectionMixture":
        rates = poisson_rates(stats.length_weight, stats.length_sum, self.rates)
        dead = stats.length_weight <= 0
        if np.any(dead):
            logger.warning(f"Collection states {np.flatnonzero(dead).tolist()} received no weight; keeping parameters")
        probs = normalize_counts(stats.items, self.probs)
        probs[dead] = self.probs[dead]
        return CollectionMixture(rates, probs)

    def sample_state(self, k: int, rng: np.random.Generator):
        n = int(rng.poisson(self.rates[k]))
        return [int(i) for i in rng.choice(self.vocab_size, size=n, p=self.probs[k])], None

    def permuted(self, order: Sequence[int]) -> "CollectionMixture":
        return CollectionMixture(self.rates[list(order)], self.probs[list(order)])


class MarkovSeqStats:
    def __init__(self, n_states: int, vocab_size: int):
        self.length_weight = np.zeros(n_states)
        self.length_sum = np.zeros(n_states)
        self.initial = np.zeros((n_states, vocab_size))
        self.transition = np.zeros((n_states, vocab_size, vocab_size))

    def merge(self, other: "MarkovSeqStats") -> "MarkovSeqStats":
        self.length_weight += other.length_weight
        self.length_sum += other.length_sum
        self.initial += other.initial
        self.transition += other.transition
        return self


class MarkovSequenceMixture:
    """Mixture of first-order Markov chains with a Poisson sequence length per state."""

    kind = "markov"

    def __init__(self, rates: Sequence[float], initial, transition):
        self.rates = np.array(rates, dtype=float)
        self.initial = np.array(initial, dtype=float)
        self.transition = np.array(transition, dtype=float)
        self.states: List[MarkovSeqState] = [
            MarkovSeqState(PoissonDist(r), MarkovChainDist(i, q))
            for r, i, q in zip(self.rates, self.initial, self.transition)]
        self.log_initial = safe_log(self.initial)
        self.log_transition = safe_log(self.transition)

    @classmethod
    def from_states(cls, states: Sequence[MarkovSeqState]) -> "MarkovSequenceMixture":
        return cls([s.length.rate for s in states], [s.chain.initial for s in states],
                   [s.chain.transition for s in states])

    @classmethod
    def blank(cls, n_states: int, vocab_size: int) -> "MarkovSequenceMixture":
        uniform = 1.0 / vocab_size
        return cls(np.ones(n_states), np.full((n_states, vocab_size), uniform),
                   np.full((n_states, vocab_size, vocab_size), uniform))

    @property
    def n_states(self) -> int:
        return self.rates.size

    @property
    def vocab_size(self) -> int:
        return self.initial.shape[1]

    def encode(self, seq: Sequence[int], stream: Optional[Stream] = None) -> np.ndarray:
        return encode_items(seq, self.vocab_size, stream)

    def evaluate(self, ids: np.ndarray) -> StreamEvaluation:
        log_lik = poisson_log_pmf(ids.size, self.rates)
        if ids.size:
            log_lik = log_lik + self.log_initial[:, ids[0]] + self.log_transition[:, ids[:-1], ids[1:]].sum(axis=1)
        return StreamEvaluation(log_lik)

    def _initialize_sufficient_statistics(self) -> MarkovSeqStats:
        return MarkovSeqStats(self.n_states, self.vocab_size)

    def accumulate(self, stats: MarkovSeqStats, ids: np.ndarray, evaluation, weights: np.ndarray) -> None:
        if not np.any(weights):
            return
        _add_lengths(stats, ids.size, weights)
        if ids.size:
            stats.initial[:, ids[0]] += weights
            if ids.size > 1:
                states = np.arange(self.n_states)[:, None]
                np.add.at(stats.transition, (states, ids[None, :-1], ids[None, 1:]), weights[:, None])

    def encode_batch(self, rows: Sequence[np.ndarray]) -> SequenceBatch:
        return SequenceBatch(rows, self.vocab_size)

    def evaluate_batch(self, batch: SequenceBatch) -> StreamEvaluation:
        flat = self.log_transition.reshape(self.n_states, -1)
        log_lik = poisson_log_pmf(batch.sizes[:, None], self.rates[None, :])
        log_lik = log_lik + np.asarray(batch.first @ self.log_initial.T) + np.asarray(batch.pairs @ flat.T)
        return StreamEvaluation(log_lik)

    def accumulate_batch(self, stats: MarkovSeqStats, batch: SequenceBatch, evaluation,
                         weights: np.ndarray) -> None:
        _add_batch_lengths(stats, batch.sizes, weights)
        stats.initial += np.asarray(batch.first.T @ weights).T
        stats.transition += np.asarray(batch.pairs.T @ weights).T.reshape(stats.transition.shape)

    def do_mstep(self, stats: MarkovSeqStats) -> "MarkovSequenceMixture":
        rates = poisson_rates(stats.length_weight, stats.length_sum, self.rates)
        dead = stats.length_weight <= 0
        if np.any(dead):
            logger.warning(f"Bed states {np.flatnonzero(dead).tolist()} received no weight; keeping parameters")
        initial = normalize_counts(stats.initial, self.initial)
        transition = normalize_counts(stats.transition, self.transition)
        return MarkovSequenceMixture(rates, initial, transition)

    def sample_state(self, k: int, rng: np.random.Generator):
        n = int(rng.poisson(self.rates[k]))
        return self.states[k].chain.sample(rng, n), None

    def permuted(self, order: Sequence[int]) -> "MarkovSequenceMixture":
        order = list(order)
        return MarkovSequenceMixture(self.rates[order], self.initial[order], self.transition[order])


class HmmSeqStats:
    def __init__(self, n_states: int, n_hmm: int, vocab_size: int):
        self.length_weight = np.zeros(n_states)
        self.length_sum = np.zeros(n_states)
        self.initial = np.zeros((n_states, n_hmm))
        self.transition = np.zeros((n_states, n_hmm, n_hmm))
        self.emission_weight = np.zeros(n_hmm)
        self.emission_count_sum = np.zeros(n_hmm)
        self.emission_items = np.zeros((n_hmm, vocab_size))

    def merge(self, other: "HmmSeqStats") -> "HmmSeqStats":
        self.length_weight += other.length_weight
        self.length_sum += other.length_sum
        self.initial += other.initial
        self.transition += other.transition
        self.emission_weight += other.emission_weight
        self.emission_count_sum += other.emission_count_sum
        self.emission_items += other.emission_items
        return self


class HmmSequenceMixture:
    """Mixture of HMMs over multiset sequences.

    Mixture states own the sequence length and the HMM state chain; the
    per-HMM-state emission table is a single object shared by all of them.
    """

    kind = "hmm"

    def __init__(self, rates: Sequence[float], initial, transition, emission: HmmEmission):
        self.rates = np.array(rates, dtype=float)
        self.initial = np.array(initial, dtype=float)
        self.transition = np.array(transition, dtype=float)
        if self.initial.shape[1] != emission.n_hmm:
            raise ValueError("state chain dimension must equal the emission table's HMM state count")
        self.emission = emission
        self.states: List[HmmSeqState] = [
            HmmSeqState(PoissonDist(r), MarkovChainDist(i, q))
            for r, i, q in zip(self.rates, self.initial, self.transition)]

    @classmethod
    def from_states(cls, states: Sequence[HmmSeqState], emission: HmmEmission) -> "HmmSequenceMixture":
        return cls([s.length.rate for s in states], [s.state_chain.initial for s in states],
                   [s.state_chain.transition for s in states], emission)

    @classmethod
    def blank(cls, n_states: int, n_hmm: int, vocab_size: int) -> "HmmSequenceMixture":
        emission = HmmEmission(np.ones(n_hmm), np.full((n_hmm, vocab_size), 1.0 / vocab_size))
        return cls(np.ones(n_states), np.full((n_states, n_hmm), 1.0 / n_hmm),
                   np.full((n_states, n_hmm, n_hmm), 1.0 / n_hmm), emission)

    @property
    def n_states(self) -> int:
        return self.rates.size

    @property
    def n_hmm(self) -> int:
        return self.emission.n_hmm

    @property
    def vocab_size(self) -> int:
        return self.emission.vocab_size

    def with_emission(self, emission: HmmEmission) -> "HmmSequenceMixture":
        return HmmSequenceMixture(self.rates, self.initial, self.transition, emission)

    def encode(self, timepoints: Sequence[Sequence[int]], stream: Optional[Stream] = None) -> TimepointCounts:
        return encode_timepoints(timepoints, self.vocab_size, stream)

    def evaluate(self, data: TimepointCounts) -> StreamEvaluation:
        length_term = poisson_log_pmf(len(data), self.rates)
        if len(data) == 0:
            return StreamEvaluation(length_term)
        log_lik, alpha, scale, b = _forward(self.initial, self.transition, self.emission.log_matrix(data))
        return StreamEvaluation(length_term + log_lik, (alpha, scale, b))

    def posterior(self, data: TimepointCounts, evaluation: Optional[StreamEvaluation] = None) -> Optional[HmmPosterior]:
        if len(data) == 0:
            return None
        evaluation = evaluation if evaluation is not None else self.evaluate(data)
        alpha, scale, b = evaluation.forward
        return _backward(self.transition, alpha, scale, b)

    def _initialize_sufficient_statistics(self) -> HmmSeqStats:
        return HmmSeqStats(self.n_states, self.n_hmm, self.vocab_size)

    def accumulate(self, stats: HmmSeqStats, data: TimepointCounts, evaluation, weights: np.ndarray) -> None:
        if not np.any(weights):
            return
        if len(data) == 0:
            _add_lengths(stats, 0, weights)
            return
        post = self.posterior(data, evaluation)
        self.accumulate_posterior(stats, data, weights, post.state_marginals, post.transition_sums)

    def accumulate_posterior(self, stats: HmmSeqStats, data: TimepointCounts, weights: np.ndarray,
                             state_marginals: np.ndarray, transition_sums: np.ndarray) -> None:
        """Add counts given (K, T, S) state marginals and (K, S, S) summed pairwise marginals."""
        _add_lengths(stats, len(data), weights)
        if len(data) == 0:
            return
        stats.initial += weights[:, None] * state_marginals[:, 0, :]
        stats.transition += weights[:, None, None] * transition_sums
        pooled = np.einsum('k,kts->ts', weights, state_marginals)
        stats.emission_weight += pooled.sum(axis=0)
        stats.emission_count_sum += data.sizes @ pooled
        stats.emission_items += np.asarray(data.counts.T @ pooled).T

    def encode_batch(self, sequences: Sequence[TimepointCounts]) -> TimepointBatch:
        return TimepointBatch(sequences, self.vocab_size)

    def evaluate_batch(self, batch: TimepointBatch) -> StreamEvaluation:
        log_emission = np.zeros(batch.active.shape + (self.n_hmm,))
        log_emission[batch.steps, batch.owners] = self.emission.log_matrix(batch)
        log_lik, alpha, scale, b = _forward_batch(self.initial, self.transition, log_emission, batch.active)
        length_term = poisson_log_pmf(batch.lengths[:, None], self.rates[None, :])
        return StreamEvaluation(length_term + log_lik, (alpha, scale, b))

    def accumulate_batch(self, stats: HmmSeqStats, batch: TimepointBatch, evaluation,
                         weights: np.ndarray) -> None:
        _add_batch_lengths(stats, batch.lengths.astype(float), weights)
        if batch.max_length == 0:
            return
        alpha, scale, b = evaluation.forward
        marginals, transition_sums = _backward_batch(self.transition, alpha, scale, b, batch.active, weights)
        stats.initial += np.einsum('nk,nks->ks', weights, marginals[0])
        stats.transition += transition_sums
        pooled = np.einsum('nk,tnks->tns', weights, marginals)[batch.steps, batch.owners]
        stats.emission_weight += pooled.sum(axis=0)
        stats.emission_count_sum += batch.sizes @ pooled
        stats.emission_items += np.asarray(batch.counts.T @ pooled).T

    def do_mstep(self, stats: HmmSeqStats) -> "HmmSequenceMixture":
        rates = poisson_rates(stats.length_weight, stats.length_sum, self.rates)
        initial = normalize_counts(stats.initial, self.initial)
        transition = normalize_counts(stats.transition, self.transition)
        emission_rates = poisson_rates(stats.emission_weight, stats.emission_count_sum, self.emission.rates)
        emission_probs = normalize_counts(stats.emission_items, self.emission.probs)
        dead = stats.emission_weight <= 0
        emission_probs[dead] = self.emission.probs[dead]
        if np.any(dead):
            logger.warning(f"HMM states {np.flatnonzero(dead).tolist()} received no weight; keeping emissions")
        return HmmSequenceMixture(rates, initial, transition, HmmEmission(emission_rates, emission_probs))

    def sample_state(self, k: int, rng: np.random.Generator):
        n = int(rng.poisson(self.rates[k]))
        path = self.states[k].state_chain.sample(rng, n)
        timepoints = []
        for s in path:
            size = int(rng.poisson(self.emission.rates[s]))
            timepoints.append([int(i) for i in rng.choice(self.vocab_size, size=size, p=self.emission.probs[s])])
        return timepoints, path

    def permuted(self, order: Sequence[int]) -> "HmmSequenceMixture":
        order = list(order)
        return HmmSequenceMixture(self.rates[order], self.initial[order], self.transition[order], self.emission)


SubModel = (CollectionMixture, MarkovSequenceMixture, HmmSequenceMixture)
