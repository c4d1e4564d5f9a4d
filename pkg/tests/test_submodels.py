import itertools
import logging
import math

import numpy as np
import pytest
from scipy.stats import poisson

from episodemix.core.exceptions import UnknownToken
from episodemix.models.models import Stream
from episodemix.services.submodels import (
    CollectionMixture,
    CollectionState,
    HmmEmission,
    HmmSequenceMixture,
    MarkovSeqState,
    MarkovSequenceMixture,
    collection_log_lik,
    encode_timepoints,
    hmm_forward,
    mseq_log_lik,
    stream_posterior,
)
from episodemix.utils.distributions import CategoricalDist, MarkovChainDist, PoissonDist


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def random_hmm(rng, n_states=1, n_hmm=3, vocab=4):
    emission = HmmEmission(rng.uniform(0.5, 2.0, size=n_hmm), rng.dirichlet(np.ones(vocab), size=n_hmm))
    return HmmSequenceMixture(rng.uniform(1.0, 5.0, size=n_states), rng.dirichlet(np.ones(n_hmm), size=n_states),
                              rng.dirichlet(np.ones(n_hmm), size=(n_states, n_hmm)), emission)


def brute_force_hmm(mixture, k, timepoints):
    """Sum over every HMM state path in linear space, plus the per-path state posteriors."""
    S = mixture.n_hmm
    chain = mixture.states[k].state_chain
    emission = mixture.emission
    total = 0.0
    marginals = np.zeros((len(timepoints), S))
    for path in itertools.product(range(S), repeat=len(timepoints)):
        p = chain.initial[path[0]]
        for a, b in zip(path, path[1:]):
            p *= chain.transition[a, b]
        for s, tp in zip(path, timepoints):
            p *= poisson.pmf(len(tp), emission.rates[s]) * np.prod([emission.probs[s, i] for i in tp])
        total += p
        for t, s in enumerate(path):
            marginals[t, s] += p
    length = poisson.pmf(len(timepoints), mixture.rates[k])
    return math.log(length * total), marginals / total


def test_collection_log_lik_matches_product(rng):
    probs = rng.dirichlet(np.ones(6))
    state = CollectionState(PoissonDist(2.2), CategoricalDist(probs))
    items = [0, 3, 3, 5, 1]
    direct = poisson.pmf(5, 2.2) * np.prod(probs[items])
    assert collection_log_lik(items, state) == pytest.approx(math.log(direct), abs=1e-12)


def test_markov_sequence_log_lik_matches_product(rng):
    initial = rng.dirichlet(np.ones(3))
    transition = rng.dirichlet(np.ones(3), size=3)
    state = MarkovSeqState(PoissonDist(1.7), MarkovChainDist(initial, transition))
    seq = [1, 2, 2, 0]
    direct = poisson.pmf(4, 1.7) * initial[1] * transition[1, 2] * transition[2, 2] * transition[2, 0]
    assert mseq_log_lik(seq, state) == pytest.approx(math.log(direct), abs=1e-12)


def test_empty_markov_sequence_is_length_term_only():
    state = MarkovSeqState(PoissonDist(1.0), MarkovChainDist([1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]]))
    assert mseq_log_lik([], state) == pytest.approx(-1.0)


def test_mixture_evaluate_matches_single_state_likelihoods(rng):
    mixture = MarkovSequenceMixture(rng.uniform(1, 3, size=3), rng.dirichlet(np.ones(3), size=3),
                                    rng.dirichlet(np.ones(3), size=(3, 3)))
    ids = mixture.encode([0, 2, 1])
    values = mixture.evaluate(ids).log_lik
    for k in range(3):
        assert values[k] == pytest.approx(mseq_log_lik([0, 2, 1], mixture.states[k]), abs=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_hmm_forward_matches_path_enumeration(seed):
    rng = np.random.default_rng(seed)
    mixture = random_hmm(rng)
    timepoints = [[int(i) for i in rng.integers(0, 4, size=rng.integers(0, 3))]
                  for _ in range(rng.integers(1, 5))]
    log_lik, post = hmm_forward(timepoints, mixture.states[0], mixture.emission)
    expected, marginals = brute_force_hmm(mixture, 0, timepoints)
    assert log_lik == pytest.approx(expected, abs=1e-10)
    assert np.allclose(post.state_marginals, marginals, atol=1e-10)
    assert np.allclose(post.state_marginals.sum(axis=1), 1.0)


def test_hmm_forward_mass_sums_to_poisson_coverage(rng):
    mixture = random_hmm(rng, vocab=3)
    state, emission = mixture.states[0], mixture.emission
    timepoints = [list(tp) for size in range(3) for tp in itertools.product(range(3), repeat=size)]
    total = sum(math.exp(hmm_forward(list(seq), state, emission)[0])
                for n in range(4) for seq in itertools.product(timepoints, repeat=n))
    fits = poisson.cdf(2, emission.rates)
    expected, forward = poisson.pmf(0, mixture.rates[0]), state.state_chain.initial * fits
    for n in range(1, 4):
        expected += poisson.pmf(n, mixture.rates[0]) * forward.sum()
        forward = (forward @ state.state_chain.transition) * fits
    assert total == pytest.approx(expected, abs=1e-10)


def test_hmm_batch_evaluation_matches_single_sequences(rng):
    mixture = random_hmm(rng, n_states=3)
    sequences = [[[0], [1, 2], [3, 3, 0]], [], [[2]], [[], [1], [0, 0], [3], [2, 1]]]
    batch = mixture.encode_batch([mixture.encode(seq) for seq in sequences])
    assert batch.max_length == 5
    values = mixture.evaluate_batch(batch).log_lik
    for n, seq in enumerate(sequences):
        assert np.allclose(values[n], mixture.evaluate(mixture.encode(seq)).log_lik, atol=1e-10)


def test_hmm_pairwise_marginals_are_consistent(rng):
    mixture = random_hmm(rng)
    timepoints = [[1], [0, 3], [2]]
    _, post = hmm_forward(timepoints, mixture.states[0], mixture.emission)
    for t in range(len(timepoints) - 1):
        pair = post.transition_marginals[t]
        assert pair.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(pair.sum(axis=1), post.state_marginals[t], atol=1e-12)
        assert np.allclose(pair.sum(axis=0), post.state_marginals[t + 1], atol=1e-12)


def test_hmm_mixture_vectorised_evaluation(rng):
    mixture = random_hmm(rng, n_states=3)
    timepoints = [[0], [1, 2], [3, 3, 0]]
    values = mixture.evaluate(mixture.encode(timepoints)).log_lik
    for k in range(3):
        expected, _ = brute_force_hmm(mixture, k, timepoints)
        assert values[k] == pytest.approx(expected, abs=1e-10)


def test_hmm_empty_sequence_has_no_posterior(rng):
    mixture = random_hmm(rng)
    log_lik, post = hmm_forward([], mixture.states[0], mixture.emission)
    assert post is None
    assert log_lik == pytest.approx(-mixture.rates[0])


def test_hmm_long_sequence_stays_finite(rng):
    mixture = random_hmm(rng)
    timepoints = [[int(i) for i in rng.integers(0, 4, size=3)] for _ in range(400)]
    values = mixture.evaluate(mixture.encode(timepoints)).log_lik
    assert np.all(np.isfinite(values))


def test_stream_posterior_is_bayes_rule(rng):
    mixture = CollectionMixture(rng.uniform(1, 3, size=3), rng.dirichlet(np.ones(4), size=3))
    weights = rng.dirichlet(np.ones(3))
    ids = mixture.encode([0, 0, 2])
    marginal, posterior = stream_posterior(ids, mixture, np.log(weights))
    linear = weights * np.array([math.exp(collection_log_lik([0, 0, 2], s)) for s in mixture.states])
    assert marginal == pytest.approx(math.log(linear.sum()), abs=1e-12)
    assert np.allclose(posterior, linear / linear.sum(), atol=1e-12)


def test_unknown_item_raises():
    mixture = CollectionMixture.blank(2, 3)
    with pytest.raises(UnknownToken):
        mixture.encode([0, 3], Stream.ADMISSION_DX)
    with pytest.raises(UnknownToken):
        encode_timepoints([[0], [5]], 3, Stream.LABS)


def test_duplicate_items_in_a_timepoint_are_counted(rng):
    data = encode_timepoints([[1, 1, 2]], 4)
    assert data.counts.toarray().tolist() == [[0.0, 2.0, 1.0, 0.0]]
    assert data.sizes.tolist() == [3.0]


def test_collection_mstep_recovers_single_state(rng):
    truth = CollectionMixture([2.5], [[0.4, 0.3, 0.2, 0.1]])
    stats = truth._initialize_sufficient_statistics()
    for _ in range(10_000):
        items, _ = truth.sample_state(0, rng)
        ids = truth.encode(items)
        truth.accumulate(stats, ids, None, np.ones(1))
    fitted = truth.do_mstep(stats)
    assert fitted.rates[0] == pytest.approx(2.5, rel=0.05)
    assert np.allclose(fitted.probs[0], truth.probs[0], atol=0.01)


def test_hmm_mstep_recovers_single_state(rng):
    emission = HmmEmission([1.5], [[0.5, 0.25, 0.25]])
    truth = HmmSequenceMixture([3.0], [[1.0]], [[[1.0]]], emission)
    stats = truth._initialize_sufficient_statistics()
    for _ in range(10_000):
        timepoints, _ = truth.sample_state(0, rng)
        data = truth.encode(timepoints)
        truth.accumulate(stats, data, truth.evaluate(data), np.ones(1))
    fitted = truth.do_mstep(stats)
    assert fitted.rates[0] == pytest.approx(3.0, rel=0.05)
    assert fitted.emission.rates[0] == pytest.approx(1.5, rel=0.05)
    assert np.allclose(fitted.emission.probs[0], [0.5, 0.25, 0.25], atol=0.01)


def test_dead_states_keep_parameters(rng):
    mixture = CollectionMixture(rng.uniform(1, 3, size=2), rng.dirichlet(np.ones(3), size=2))
    stats = mixture._initialize_sufficient_statistics()
    mixture.accumulate(stats, mixture.encode([0, 1]), None, np.array([1.0, 0.0]))
    updated = mixture.do_mstep(stats)
    assert updated.rates[1] == mixture.rates[1]
    assert np.array_equal(updated.probs[1], mixture.probs[1])


def test_hmm_states_share_one_emission_table(rng):
    mixture = random_hmm(rng, n_states=3)
    permuted = mixture.permuted([2, 0, 1])
    assert permuted.emission is mixture.emission
    assert np.array_equal(permuted.rates, mixture.rates[[2, 0, 1]])


def test_sampled_hmm_path_matches_timepoints(rng):
    mixture = random_hmm(rng, n_states=2)
    timepoints, path = mixture.sample_state(1, rng)
    assert len(timepoints) == len(path)
    assert all(0 <= s < mixture.n_hmm for s in path)


def test_dead_bed_states_keep_parameters_and_are_logged(rng, caplog):
    mixture = MarkovSequenceMixture(rng.uniform(1, 3, size=2), rng.dirichlet(np.ones(3), size=2),
                                    rng.dirichlet(np.ones(3), size=(2, 3)))
    stats = mixture._initialize_sufficient_statistics()
    mixture.accumulate(stats, mixture.encode([0, 1, 1]), None, np.array([1.0, 0.0]))
    with caplog.at_level(logging.WARNING, logger="episodemix.services.submodels"):
        updated = mixture.do_mstep(stats)
    assert "Bed states [1] received no weight" in caplog.text
    assert updated.rates[1] == mixture.rates[1]
    assert np.array_equal(updated.transition[1], mixture.transition[1])
