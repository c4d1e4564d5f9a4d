import itertools
import math

import numpy as np
import pytest
from scipy.stats import poisson

from episodemix.core.exceptions import EmptyDataset, OutOfSupport
from episodemix.models.models import (
    ALL_STREAMS,
    COLLECTION_STREAMS,
    HMM_STREAMS,
    CountConvention,
    Episode,
    Hyperparams,
    Scalar,
    Stream,
)
from episodemix.services.episode_model import (
    EpisodeModel,
    bic,
    bic_value,
    param_count,
    submodel_param_count,
)
from episodemix.services.submodels import collection_log_lik, hmm_forward, mseq_log_lik
from episodemix.utils.parallel import unit_rng

EPISODE = Episode(age=64, sex=1, death=0, beds=[0, 2, 1], admission_dx=[0, 3], discharge_dx=[1],
                  labs=[[0, 1], [2]], neuro=[[1]], meds=[[0], [], [2, 2]])


def test_single_state_model_is_product_of_factors(make_model):
    model = make_model(seed=5)
    total = model.age[0].log_pmf(64) + math.log(model.sex[0].p) + math.log(1 - model.death[0].p)
    total += mseq_log_lik(EPISODE.beds, model.beds.states[0])
    total += collection_log_lik(EPISODE.admission_dx, model.diagnoses.states[0])
    total += collection_log_lik(EPISODE.discharge_dx, model.diagnoses.states[0])
    for x in HMM_STREAMS:
        sub = model.hmm[x]
        total += hmm_forward(EPISODE.stream(x), sub.states[0], sub.emission)[0]
    assert model.episode_log_lik(EPISODE) == pytest.approx(total, abs=1e-9)


def test_responsibilities_are_normalised(small_model):
    resp = small_model.e_step(EPISODE)
    assert resp.gamma.sum() == pytest.approx(1.0, abs=1e-12)
    for x in ALL_STREAMS:
        assert np.allclose(resp.joint[x].sum(axis=1), resp.gamma, atol=1e-12)
        assert resp.sub_state(x).sum() == pytest.approx(1.0, abs=1e-12)
    marginals = resp.hmm_marginals(Stream.LABS)
    assert marginals.shape == (2, 2)
    assert np.allclose(marginals.sum(axis=1), 1.0)
    assert resp.log_lik == pytest.approx(small_model.episode_log_lik(EPISODE), abs=1e-12)


def test_top_posterior_matches_bayes_rule(small_model):
    given_top = small_model.log_lik_given_top(EPISODE)
    joint = small_model.top.probs * np.exp(given_top)
    assert np.allclose(small_model.top_posterior(EPISODE), joint / joint.sum(), atol=1e-12)


def test_missing_scalars_are_marginalised(small_model):
    partial = EPISODE.without(Scalar.AGE, Scalar.DEATH)
    full_terms = small_model.log_lik_given_top(EPISODE, scalars=[Scalar.SEX])
    assert np.allclose(small_model.log_lik_given_top(partial), full_terms, atol=1e-12)


def test_age_outside_support(small_model):
    with pytest.raises(OutOfSupport):
        small_model.episode_log_lik(Episode(age=130))


def test_beds_only_probabilities_sum_to_poisson_coverage(make_model):
    model = make_model(seed=8, n_top=2, n_beds=2)
    V, max_len = model.beds.vocab_size, 4
    total = 0.0
    for n in range(max_len + 1):
        for seq in itertools.product(range(V), repeat=n):
            total += math.exp(model.episode_log_lik(Episode(beds=list(seq)), [Stream.BEDS], []))
    prevalence = model.state_prevalence(Stream.BEDS)
    expected = sum(prevalence[k] * poisson.cdf(max_len, model.beds.rates[k]) for k in range(2))
    assert total == pytest.approx(expected, abs=1e-9)


def ordered_multisets(vocab: int, max_size: int):
    return [list(items) for size in range(max_size + 1) for items in itertools.product(range(vocab), repeat=size)]


def hmm_coverage(sub, k: int, max_len: int, max_items: int) -> float:
    """Mass of sequences with at most ``max_len`` timepoints of at most ``max_items`` items each."""
    fits = poisson.cdf(max_items, sub.emission.rates)
    chain = sub.states[k].state_chain
    total = poisson.pmf(0, sub.rates[k])
    forward = chain.initial * fits
    for n in range(1, max_len + 1):
        total += poisson.pmf(n, sub.rates[k]) * forward.sum()
        forward = (forward @ chain.transition) * fits
    return total


def test_diagnoses_probabilities_sum_to_poisson_coverage(make_model):
    model = make_model(seed=9, n_top=2, n_dx=3)
    total = sum(math.exp(model.episode_log_lik(Episode(admission_dx=items), [Stream.ADMISSION_DX], []))
                for items in ordered_multisets(model.diagnoses.vocab_size, 3))
    prevalence = model.state_prevalence(Stream.ADMISSION_DX)
    assert total == pytest.approx(prevalence @ poisson.cdf(3, model.diagnoses.rates), abs=1e-9)


def test_hmm_stream_probabilities_sum_to_poisson_coverage(make_model):
    model = make_model(seed=12, n_top=2, n_neuro=2, hmm_neuro=3)
    sub = model.hmm[Stream.NEURO]
    timepoints = ordered_multisets(sub.vocab_size, 2)
    total = 0.0
    for n in range(4):
        for seq in itertools.product(timepoints, repeat=n):
            total += math.exp(model.episode_log_lik(Episode(neuro=list(seq)), [Stream.NEURO], []))
    prevalence = model.state_prevalence(Stream.NEURO)
    expected = sum(prevalence[k] * hmm_coverage(sub, k, 3, 2) for k in range(sub.n_states))
    assert total == pytest.approx(expected, abs=1e-9)


def test_joint_space_sums_to_coverage_under_each_top_state(make_model):
    model = make_model(seed=4, n_top=3, n_beds=2, n_dx=2)
    streams, scalars = [Stream.BEDS, Stream.DISCHARGE_DX], [Scalar.SEX, Scalar.DEATH]
    beds = [list(s) for n in range(3) for s in itertools.product(range(model.beds.vocab_size), repeat=n)]
    episodes = [Episode(sex=sex, death=death, beds=b, discharge_dx=dx)
                for sex in (0, 1) for death in (0, 1) for b in beds
                for dx in ordered_multisets(model.diagnoses.vocab_size, 2)]
    total = np.exp(model.log_lik_many(episodes, streams, scalars, chunk_size=100)).sum()
    coverage = {Stream.BEDS: poisson.cdf(2, model.beds.rates),
                Stream.DISCHARGE_DX: poisson.cdf(2, model.diagnoses.rates)}
    expected = sum(model.top.probs[z] * np.prod([model.mixing[x][z] @ coverage[x] for x in streams])
                   for z in range(model.n_top))
    assert total == pytest.approx(expected, abs=1e-9)


def test_chunk_likelihoods_match_single_episodes(small_model, sampled_corpus):
    batched = small_model.log_lik_many(sampled_corpus, chunk_size=16)
    single = [small_model.episode_log_lik(e) for e in sampled_corpus]
    assert batched == pytest.approx(single, abs=1e-9)


def test_chunk_statistics_match_per_episode_posteriors(small_model, sampled_corpus):
    encoded = [small_model.encode(e) for e in sampled_corpus]
    stats = small_model.new_stats()
    total = small_model.accumulate(stats, small_model.encode_batch(encoded))
    reference = small_model.new_stats()
    for enc in encoded:
        resp = small_model.e_step(enc)
        reference.top += resp.gamma
        reference.add_scalars(enc.episode, resp.gamma)
        for x in ALL_STREAMS:
            reference.mixing[x] += resp.joint[x]
            small_model.submodel(x).accumulate(reference.group(x), enc.streams[x], None, resp.sub_state(x))
        reference.log_lik += resp.log_lik
    assert total == pytest.approx(reference.log_lik, abs=1e-8)
    assert stats.n_episodes == len(sampled_corpus)
    for name in ("top", "age_sum", "age_sum_sq", "sex_ones", "death_weight"):
        assert np.allclose(getattr(stats, name), getattr(reference, name), atol=1e-9)
    for x in ALL_STREAMS:
        assert np.allclose(stats.mixing[x], reference.mixing[x], atol=1e-10)
    assert np.allclose(stats.diagnoses.items, reference.diagnoses.items, atol=1e-10)
    assert np.allclose(stats.beds.transition, reference.beds.transition, atol=1e-10)
    for x in HMM_STREAMS:
        for name in ("length_sum", "initial", "transition", "emission_weight", "emission_count_sum",
                     "emission_items"):
            assert np.allclose(getattr(stats.hmm[x], name), getattr(reference.hmm[x], name), atol=1e-9)


def test_sorted_by_weight_keeps_likelihood(small_model):
    ordered = small_model.sorted_by_weight()
    assert np.all(np.diff(ordered.top.probs) <= 0)
    assert ordered.episode_log_lik(EPISODE) == pytest.approx(small_model.episode_log_lik(EPISODE), abs=1e-12)


def test_permuted_rejects_non_permutation(small_model):
    with pytest.raises(ValueError):
        small_model.permuted([0, 0])


def test_generating_state_recovered_by_posterior(vocabulary):
    hp = Hyperparams(n_top=2, n_beds=2)
    blank = EpisodeModel.blank(hp, vocabulary.sizes(), vocabulary)
    mixing = dict(blank.mixing)
    mixing[Stream.BEDS] = np.eye(2)
    beds = type(blank.beds)([3.0, 3.0], [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
                            [np.eye(3), np.eye(3)])
    model = EpisodeModel(blank.top, blank.age, blank.sex, blank.death, mixing, blank.diagnoses, beds, blank.hmm,
                         vocabulary)
    checked = 0
    for i in range(100):
        episode, trace = model.sample_episode(unit_rng(5, i))
        if not episode.beds:
            continue
        assert model.top_posterior(episode)[trace.top] > 0.999
        checked += 1
    assert checked > 50


def test_sampled_episode_matches_trace(small_model):
    episode, trace = small_model.sample_episode(unit_rng(1, 0))
    assert 0 <= trace.top < small_model.n_top
    assert set(trace.sub_states) == set(ALL_STREAMS)
    for x in HMM_STREAMS:
        assert len(trace.hmm_paths[x]) == len(episode.stream(x))
    assert 0 <= episode.age <= 120


def test_m_step_without_statistics(small_model):
    with pytest.raises(EmptyDataset):
        small_model.m_step(small_model.new_stats())


def test_beds_parameter_count():
    hp = Hyperparams(n_beds=10)
    sizes = {x: 4 for x in ALL_STREAMS}
    sizes[Stream.BEDS] = 6
    assert submodel_param_count(hp, sizes, Stream.BEDS) == 430


def test_param_count_hand_computed():
    hp = Hyperparams(n_top=2, n_dx=3, n_beds=2, n_labs=2, n_neuro=1, n_meds=1,
                     hmm_labs=2, hmm_neuro=1, hmm_meds=3)
    sizes = {Stream.BEDS: 3, Stream.ADMISSION_DX: 4, Stream.DISCHARGE_DX: 4,
             Stream.LABS: 5, Stream.NEURO: 2, Stream.MEDS: 6}
    mixing = 2 * (3 + 3 + 2 + 2 + 1 + 1)
    scalars = 2 * (2 + 1 + 1)
    diagnoses = (1 + 4) * 3
    beds = (1 + 3 + 9) * 2
    labs = (1 + 2 + 4) * 2 + 2 * (1 + 5)
    neuro = (1 + 1 + 1) * 1 + 1 * (1 + 2)
    meds = (1 + 3 + 9) * 1 + 3 * (1 + 6)
    expected = 2 + mixing + scalars + diagnoses + beds + labs + neuro + meds
    assert param_count(hp, sizes) == expected


def test_restricted_param_count_drops_factors():
    hp = Hyperparams(n_labs=3, hmm_labs=4)
    sizes = {x: 5 for x in ALL_STREAMS}
    d = param_count(hp, sizes, streams=[Stream.LABS], scalars=[])
    assert d == 1 + 3 + submodel_param_count(hp, sizes, Stream.LABS)


@pytest.mark.parametrize("seed", range(5))
def test_count_conventions_differ_by_emission_and_diagnoses_terms(seed):
    rng = np.random.default_rng(seed)
    hp = Hyperparams(**{name: int(rng.integers(1, 8)) for name in Hyperparams.model_fields})
    dx = int(rng.integers(2, 30))
    sizes = {x: int(rng.integers(2, 30)) for x in ALL_STREAMS}
    sizes[Stream.ADMISSION_DX] = sizes[Stream.DISCHARGE_DX] = dx
    shared = param_count(hp, sizes, CountConvention.SHARED)
    per_state = param_count(hp, sizes, CountConvention.PER_STATE)
    difference = (1 + dx) * hp.n_dx
    for x in HMM_STREAMS:
        s, c, k = hp.n_hmm(x), sizes[x], hp.n_states(x)
        difference += s * c * k - s * (1 + c)
    assert per_state - shared == difference


def test_collection_streams_counted_once_under_shared_convention():
    hp = Hyperparams(n_dx=4)
    sizes = {x: 6 for x in ALL_STREAMS}
    one = param_count(hp, sizes, streams=[Stream.ADMISSION_DX], scalars=[])
    both = param_count(hp, sizes, streams=list(COLLECTION_STREAMS), scalars=[])
    assert both - one == hp.n_top * hp.n_dx


def test_bic_value():
    assert bic_value(10, 100, -500.0) == pytest.approx(1046.0517, abs=1e-4)


def test_bic_uses_corpus_likelihood(small_model, sampled_corpus):
    ll = sum(small_model.episode_log_lik(e) for e in sampled_corpus)
    d = param_count(small_model.hyperparams, small_model.vocab_sizes)
    assert bic(small_model, sampled_corpus) == pytest.approx(d * math.log(len(sampled_corpus)) - 2 * ll)
    with pytest.raises(EmptyDataset):
        bic(small_model, [])


def test_log_lik_many_independent_of_threads(small_model, sampled_corpus):
    one = small_model.log_lik_many(sampled_corpus, threads=1, chunk_size=7)
    many = small_model.log_lik_many(sampled_corpus, threads=4, chunk_size=7)
    assert np.array_equal(one, many)
