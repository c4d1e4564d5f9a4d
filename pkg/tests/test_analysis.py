import itertools
import math

import numpy as np
import pytest
from scipy.stats import poisson

from episodemix.core.exceptions import DivisionByZeroMass, NonConvergent
from episodemix.models.models import Episode, Hyperparams, Scalar, SequenceTree, Stream, TreeNode
from episodemix.services.analysis_service import analysis_service, mass_ratio, ranked_items
from episodemix.services.episode_model import EpisodeModel
from episodemix.services.submodels import HmmEmission, HmmSequenceMixture, MarkovSequenceMixture
from episodemix.utils.distributions import BernoulliDist
from episodemix.utils.parallel import unit_rng
from episodemix.utils.reports import tree_to_dot


def with_beds(model: EpisodeModel, beds: MarkovSequenceMixture) -> EpisodeModel:
    mixing = dict(model.mixing)
    mixing[Stream.BEDS] = np.full((model.n_top, beds.n_states), 1.0 / beds.n_states)
    return EpisodeModel(model.top, model.age, model.sex, model.death, mixing, model.diagnoses, beds, model.hmm,
                        model.vocabulary)


def with_labs(model: EpisodeModel, labs: HmmSequenceMixture) -> EpisodeModel:
    mixing = dict(model.mixing)
    mixing[Stream.LABS] = np.full((model.n_top, labs.n_states), 1.0 / labs.n_states)
    hmm = dict(model.hmm)
    hmm[Stream.LABS] = labs
    return EpisodeModel(model.top, model.age, model.sex, model.death, mixing, model.diagnoses, model.beds, hmm,
                        model.vocabulary)


def chain_labs(transition, initial=None, vocab=4):
    transition = np.asarray(transition, dtype=float)
    n = transition.shape[0]
    initial = np.eye(n)[0] if initial is None else np.asarray(initial, dtype=float)
    emission = HmmEmission(np.ones(n), np.full((n, vocab), 1.0 / vocab))
    return HmmSequenceMixture([2.0], [initial], [transition], emission)


# Enrichment and state tables --------------------------------------------------

def test_enrichment_with_one_top_state(make_model):
    model = make_model(seed=2, n_beds=3)
    table = analysis_service.target_enrichment(model, Stream.BEDS)
    assert np.allclose(table.probabilities, model.death[0].p)
    assert sorted(table.states) == [0, 1, 2]


def test_enrichment_is_sorted_convex_combination(small_model):
    p_death = [d.p for d in small_model.death]
    for x in Stream:
        table = analysis_service.target_enrichment(small_model, x)
        assert table.probabilities == sorted(table.probabilities)
        assert all(min(p_death) - 1e-12 <= p <= max(p_death) + 1e-12 for p in table.probabilities)


def test_enrichment_matches_bayes_rule(small_model):
    joint = small_model.top.probs[:, None] * small_model.mixing[Stream.LABS]
    p_death = np.array([d.p for d in small_model.death])
    expected = (p_death @ joint) / joint.sum(axis=0)
    table = analysis_service.target_enrichment(small_model, Stream.LABS)
    assert np.allclose(np.array(table.probabilities), expected[table.states], atol=1e-12)


def test_enrichment_needs_binary_target(small_model):
    with pytest.raises(ValueError):
        analysis_service.target_enrichment(small_model, Stream.BEDS, Scalar.AGE)


def test_state_distribution_columns_are_prevalences(small_model):
    matrix = analysis_service.state_distribution(small_model, Stream.MEDS)
    assert matrix.sum() == pytest.approx(1.0)
    assert np.allclose(matrix.sum(axis=0), small_model.state_prevalence(Stream.MEDS))


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(10))
def test_enrichment_matches_latent_draws(make_model, seed):
    model = make_model(seed=seed, n_top=3, n_beds=2)
    table = analysis_service.target_enrichment(model, Stream.BEDS)
    rng = np.random.default_rng(seed)
    n = 1_000_000
    z = rng.choice(model.n_top, size=n, p=model.top.probs)
    cumulative = np.cumsum(model.mixing[Stream.BEDS], axis=1)[z]
    sub = np.minimum((rng.random(n)[:, None] > cumulative).sum(axis=1), 1)
    death = rng.random(n) < np.array([d.p for d in model.death])[z]
    for state, p in zip(table.states, table.probabilities):
        picked = death[sub == state]
        sigma = math.sqrt(p * (1 - p) / picked.size)
        assert abs(picked.mean() - p) < 4 * sigma


def test_component_and_length_reports(small_model):
    components = analysis_service.component_report(small_model)
    assert [c.state for c in components] == [0, 1]
    assert sum(c.weight for c in components) == pytest.approx(1.0)
    lengths = analysis_service.length_report(small_model, Stream.LABS)
    assert [r.rate for r in lengths] == small_model.hmm[Stream.LABS].rates.tolist()
    assert analysis_service.hmm_count_rates(small_model, Stream.LABS) == \
        small_model.hmm[Stream.LABS].emission.rates.tolist()


# Bed sequence trees ------------------------------------------------------------

def test_single_certain_path_tree(small_model):
    beds = MarkovSequenceMixture([1.0], [[1.0, 0.0, 0.0]], [np.eye(3)])
    model = with_beds(small_model, beds)
    tree = analysis_service.sequence_tree(model, 0, threshold=0.3)
    assert len(tree.nodes) == 1
    assert tree.nodes[0].item == 0
    assert tree.nodes[0].token == "ED"
    assert tree.nodes[0].probability == pytest.approx(math.exp(-1))


def brute_force_sequences(beds: MarkovSequenceMixture, k: int, max_len: int):
    chain = beds.states[k].chain
    out = {}
    for n in range(max_len + 1):
        for seq in itertools.product(range(beds.vocab_size), repeat=n):
            p = poisson.pmf(n, beds.rates[k])
            if n:
                p *= chain.initial[seq[0]]
                for a, b in zip(seq, seq[1:]):
                    p *= chain.transition[a, b]
            out[seq] = p
    return out


def test_unpruned_tree_matches_enumeration(small_model):
    beds = MarkovSequenceMixture([1.0], [[0.5, 0.5, 0.0]],
                                 [[[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [1 / 3, 1 / 3, 1 / 3]]])
    model = with_beds(small_model, beds)
    tree = analysis_service.sequence_tree(model, 0, threshold=0.0, max_depth=4)
    found = tree.terminations()
    expected = {s: p for s, p in brute_force_sequences(beds, 0, 4).items() if p > 0}
    assert set(found) == set(expected)
    for seq, p in expected.items():
        assert found[seq] == pytest.approx(p, abs=1e-12)
    assert tree.total_probability() == pytest.approx(poisson.cdf(4, 1.0), abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_pruned_tree_holds_exactly_the_probable_sequences(vocabulary, seed):
    sizes = dict(vocabulary.sizes())
    sizes[Stream.BEDS] = 4
    rng = np.random.default_rng(seed)
    beds = MarkovSequenceMixture([1.5], rng.dirichlet(np.ones(4), size=1), rng.dirichlet(np.ones(4), size=(1, 4)))
    model = with_beds(EpisodeModel.blank(Hyperparams(), sizes), beds)
    threshold = 0.01
    tree = analysis_service.sequence_tree(model, 0, threshold=threshold, max_depth=6)
    found = tree.terminations()
    expected = {s: p for s, p in brute_force_sequences(beds, 0, 6).items() if p >= threshold}
    assert set(found) == set(expected)
    for seq, p in expected.items():
        assert found[seq] == pytest.approx(p, abs=1e-12)
    assert all(node.token is None for node in tree.nodes)


def test_dot_labels_escape_quotes_and_backslashes():
    tree = SequenceTree(state=0, threshold=0.1, empty_probability=0.2,
                        nodes=[TreeNode(id=0, item=0, token='ward "B"\\east', depth=1, probability=0.5),
                               TreeNode(id=1, parent=0, item=1, token="réa", depth=2, probability=0.3)])
    dot = tree_to_dot(tree)
    assert '  root -> n0 [label="ward \\"B\\"\\\\east"];' in dot.splitlines()
    assert '  n0 -> n1 [label="réa"];' in dot.splitlines()


def test_tree_needs_depth_without_threshold(small_model):
    with pytest.raises(ValueError):
        analysis_service.sequence_tree(small_model, 0, threshold=0.0)


def test_most_likely_sequences_are_ranked(small_model):
    ranked = analysis_service.most_likely_sequences(small_model, 0, k=3, threshold=0.001)
    probs = [p for _, p in ranked]
    assert probs == sorted(probs, reverse=True)
    assert len(ranked) <= 3


# HMM paths -----------------------------------------------------------------------

def test_greedy_trajectory_absorbed_at_start(small_model):
    model = with_labs(small_model, chain_labs([[0.9, 0.1], [0.5, 0.5]]))
    trajectory = analysis_service.greedy_trajectory(model, Stream.LABS, 0, top_k=3)
    assert trajectory.states == [0]
    assert trajectory.converged
    assert len(trajectory.top_items[0]) == 3


def test_greedy_trajectory_cycle(small_model):
    model = with_labs(small_model, chain_labs([[0.1, 0.9], [0.9, 0.1]]))
    with pytest.raises(NonConvergent):
        analysis_service.greedy_trajectory(model, Stream.LABS, 0, max_steps=5, strict=True)
    trajectory = analysis_service.greedy_trajectory(model, Stream.LABS, 0, max_steps=5)
    assert not trajectory.converged
    assert trajectory.states == [0, 1, 0, 1, 0]


def test_greedy_trajectory_matches_rewalk(small_model):
    rng = np.random.default_rng(5)
    initial = rng.dirichlet(np.ones(5))
    transition = rng.dirichlet(np.ones(5), size=5)
    model = with_labs(small_model, chain_labs(transition, initial))
    trajectory = analysis_service.greedy_trajectory(model, Stream.LABS, 0, max_steps=20)
    path = [int(np.argmax(initial))]
    while int(np.argmax(transition[path[-1]])) != path[-1] and len(path) < 20:
        path.append(int(np.argmax(transition[path[-1]])))
    assert trajectory.states == path


def test_greedy_trajectory_needs_hmm_stream(small_model):
    with pytest.raises(ValueError):
        analysis_service.greedy_trajectory(small_model, Stream.BEDS, 0)


def test_viterbi_decode_matches_enumeration(small_model):
    sub = small_model.hmm[Stream.LABS]
    timepoints = [[0], [1, 3], [], [2]]
    data = sub.encode(timepoints)
    log_emission = sub.emission.log_matrix(data)
    chain = sub.states[1].state_chain
    best, best_score = None, -math.inf
    for path in itertools.product(range(sub.n_hmm), repeat=len(timepoints)):
        score = chain.log_initial[path[0]] + sum(chain.log_transition[a, b] for a, b in zip(path, path[1:]))
        score += sum(log_emission[t, s] for t, s in enumerate(path))
        if score > best_score:
            best, best_score = list(path), score
    assert analysis_service.viterbi_decode(small_model, Stream.LABS, 1, timepoints) == best


def test_viterbi_path_length(small_model):
    assert len(analysis_service.viterbi_path(small_model, Stream.LABS, 0, 6)) == 6
    assert analysis_service.viterbi_path(small_model, Stream.LABS, 0, 0) == []


# Items ---------------------------------------------------------------------------

def test_likelihood_ratio_even_masses():
    emission = HmmEmission([1.0], [[0.1, 0.1, 0.2, 0.6]])
    ratio = analysis_service.item_likelihood_ratio(emission, 0, [0, 1], [2], "sodium")
    assert ratio.ratio == pytest.approx(1.0)
    assert ratio.administered


def test_likelihood_ratio_not_administered():
    emission = HmmEmission([1.0], [[0.002, 0.003, 0.995]])
    ratio = analysis_service.item_likelihood_ratio(emission, 0, [0], [1], "potassium")
    assert not ratio.administered
    assert ratio.ratio is None


def test_likelihood_ratio_zero_normal_mass():
    emission = HmmEmission([1.0], [[0.5, 0.0, 0.5]])
    assert analysis_service.item_likelihood_ratio(emission, 0, [0], [1]).ratio == math.inf
    with pytest.raises(DivisionByZeroMass):
        mass_ratio(0.5, 0.0)


def test_likelihood_ratio_overlapping_sets():
    emission = HmmEmission([1.0], [[0.5, 0.5]])
    with pytest.raises(ValueError):
        analysis_service.item_likelihood_ratio(emission, 0, [0, 1], [1])


def test_likelihood_ratios_for_every_state(small_model):
    ratios = analysis_service.item_likelihood_ratios(small_model, Stream.LABS, {"na": ([0], [1]), "k": ([2], [3])})
    assert len(ratios) == 2 * 2
    probs = small_model.hmm[Stream.LABS].emission.probs
    first = ratios[0]
    assert first.ratio == pytest.approx(probs[0, 0] / probs[0, 1], rel=1e-12)


def test_top_items_tie_break_and_truncation():
    assert [i.item for i in ranked_items(np.full(4, 0.25), 2)] == [0, 1]
    assert len(ranked_items(np.array([1.0, 0.0, 0.0]), 5)) == 3
    with pytest.raises(ValueError):
        ranked_items(np.array([1.0]), 0)


def test_top_items_per_stream_kind(small_model):
    dx = analysis_service.top_items(small_model, Stream.ADMISSION_DX, 1, k=2)
    assert dx.prevalence == pytest.approx(small_model.state_prevalence(Stream.ADMISSION_DX)[1])
    assert dx.items[0].probability >= dx.items[1].probability
    assert dx.items[0].token is not None
    labs = analysis_service.top_items(small_model, Stream.LABS, 0)
    assert labs.prevalence is None
    assert len(labs.items) == 4
    beds = analysis_service.top_items(small_model, Stream.BEDS, 0, k=1)
    assert beds.items[0].item == int(np.argmax(small_model.beds.initial[0]))


# Conditional inference -----------------------------------------------------------

def test_infer_death_with_one_top_state(make_model):
    model = make_model(seed=4)
    posterior = analysis_service.infer_scalar(model, Episode(beds=[0, 1], age=50), Scalar.DEATH)
    assert posterior.probability == pytest.approx(model.death[0].p)


def test_infer_on_empty_episode_is_marginal(small_model):
    posterior = analysis_service.infer_scalar(small_model, Episode(), Scalar.DEATH)
    expected = sum(p * d.p for p, d in zip(small_model.top.probs, small_model.death))
    assert posterior.probability == pytest.approx(expected, abs=1e-12)


def test_infer_ignores_observed_target(small_model):
    episode = Episode(beds=[0], death=1)
    assert analysis_service.infer_scalar(small_model, episode, Scalar.DEATH).probability == \
        pytest.approx(analysis_service.infer_scalar(small_model, Episode(beds=[0]), Scalar.DEATH).probability)


def test_infer_age_distribution(small_model):
    posterior = analysis_service.infer_scalar(small_model, Episode(meds=[[0, 1]]), Scalar.AGE)
    assert sum(posterior.pmf) == pytest.approx(1.0)
    assert posterior.support_min == 0
    assert 0 < posterior.mean < 120


@pytest.mark.slow
def test_infer_death_separates_sampled_outcomes(vocabulary):
    hp = Hyperparams(n_top=2, n_beds=2)
    blank = EpisodeModel.blank(hp, vocabulary.sizes(), vocabulary)
    mixing = dict(blank.mixing)
    mixing[Stream.BEDS] = np.eye(2)
    beds = MarkovSequenceMixture([4.0, 4.0], [[0.9, 0.05, 0.05], [0.05, 0.05, 0.9]],
                                 [[[0.9, 0.05, 0.05]] * 3, [[0.05, 0.05, 0.9]] * 3])
    model = EpisodeModel(blank.top, blank.age, blank.sex, [BernoulliDist(0.05), BernoulliDist(0.95)],
                         mixing, blank.diagnoses, beds, blank.hmm, vocabulary)
    scores, labels = [], []
    for i in range(400):
        episode, _ = model.sample_episode(unit_rng(12, i))
        scores.append(analysis_service.infer_scalar(model, episode, Scalar.DEATH).probability)
        labels.append(episode.death)
    scores, labels = np.array(scores), np.array(labels)
    positives, negatives = scores[labels == 1], scores[labels == 0]
    auc = (positives[:, None] > negatives[None, :]).mean() + 0.5 * (positives[:, None] == negatives[None, :]).mean()
    assert auc > 0.85
