"""Read-only interrogation of a trained model: enrichment, state tables, sequence
trees, HMM trajectories, likelihood ratios, top items and conditional inference."""
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import poisson

from episodemix.core.config import settings
from episodemix.core.exceptions import DivisionByZeroMass, NonConvergent
from episodemix.models.models import (
    COLLECTION_STREAMS,
    HMM_STREAMS,
    ComponentRow,
    EnrichmentTable,
    Episode,
    LengthRow,
    LikelihoodRatio,
    RankedItem,
    Scalar,
    ScalarPosterior,
    SequenceTree,
    Stream,
    TopItems,
    Trajectory,
    TreeNode,
)
from episodemix.services.episode_model import EpisodeModel
from episodemix.services.submodels import HmmEmission, encode_timepoints

# Set up logging
logger = logging.getLogger(__name__)


def _require_hmm(stream: Stream) -> None:
    if stream not in HMM_STREAMS:
        raise ValueError(f"'{stream.value}' is not an HMM stream")


def ranked_items(probs: np.ndarray, k: int, stream: Optional[Stream] = None,
                 model: Optional[EpisodeModel] = None) -> List[RankedItem]:
    """The ``k`` most probable items, ties broken toward the lower id."""
    if k < 1:
        raise ValueError("k must be at least 1")
    order = np.argsort(-np.asarray(probs), kind='stable')[:k]
    vocabulary = model.vocabulary if model is not None else None
    return [RankedItem(item=int(i), probability=float(probs[i]),
                       token=vocabulary.token(stream, int(i)) if vocabulary is not None and stream else None)
            for i in order]


def mass_ratio(mass_a: float, mass_b: float) -> float:
    if mass_b == 0:
        raise DivisionByZeroMass(f"item mass {mass_a} against zero mass")
    return mass_a / mass_b


class AnalysisService:

    # Top-layer tables ------------------------------------------------------

    def target_enrichment(self, model: EpisodeModel, stream: Stream,
                          target: Scalar = Scalar.DEATH) -> EnrichmentTable:
        """P(target = 1 | z_x) for every sub-model state, sorted ascending."""
        if target is Scalar.AGE:
            raise ValueError("enrichment needs a binary target")
        flags = np.array([d.p for d in (model.death if target is Scalar.DEATH else model.sex)])
        joint = model.state_distribution(stream)
        prevalence = joint.sum(axis=0)
        with np.errstate(divide='ignore', invalid='ignore'):
            enrichment = (flags @ joint) / prevalence
        if not np.all(np.isfinite(enrichment)):
            raise DivisionByZeroMass(f"a '{stream.value}' state has zero prevalence")
        order = np.argsort(enrichment, kind='stable')
        return EnrichmentTable(stream=stream, target=target, states=order.tolist(),
                               probabilities=enrichment[order].tolist())

    def state_distribution(self, model: EpisodeModel, stream: Stream) -> np.ndarray:
        return model.state_distribution(stream)

    def component_report(self, model: EpisodeModel) -> List[ComponentRow]:
        return [ComponentRow(state=z, weight=float(model.top.probs[z]), age_mean=model.age[z].mean,
                             age_std=math.sqrt(model.age[z].variance), p_sex=model.sex[z].p,
                             p_death=model.death[z].p)
                for z in range(model.n_top)]

    def length_report(self, model: EpisodeModel, stream: Stream) -> List[LengthRow]:
        sub = model.submodel(stream)
        prevalence = model.state_prevalence(stream)
        enrichment = self.target_enrichment(model, stream)
        by_state = dict(zip(enrichment.states, enrichment.probabilities))
        return [LengthRow(stream=stream, state=k, rate=float(sub.rates[k]), prevalence=float(prevalence[k]),
                          enrichment=by_state[k])
                for k in range(sub.n_states)]

    def hmm_count_rates(self, model: EpisodeModel, stream: Stream) -> List[float]:
        """Expected items per timepoint in each HMM state."""
        _require_hmm(stream)
        return model.hmm[stream].emission.rates.tolist()

    # Bed sequences ---------------------------------------------------------

    def sequence_tree(self, model: EpisodeModel, state: int, threshold: Optional[float] = None,
                      max_depth: Optional[int] = None, stream: Stream = Stream.BEDS) -> SequenceTree:
        """Prefix tree of every complete sequence whose probability reaches ``threshold``.

        A branch is cut once the Poisson tail beyond its depth times the path
        probability falls under the threshold, which bounds every completion below it.
        """
        threshold = settings.TREE_THRESHOLD if threshold is None else threshold
        if threshold <= 0 and max_depth is None:
            raise ValueError("a non-positive threshold needs max_depth")
        if stream in COLLECTION_STREAMS or stream in HMM_STREAMS:
            raise ValueError(f"'{stream.value}' is not a Markov-sequence stream")
        chain = model.beds.states[state].chain
        rate = float(model.beds.rates[state])

        def expand(path_prob: float, depth: int, last: Optional[int]):
            if max_depth is not None and depth >= max_depth:
                return []
            if threshold > 0 and poisson.sf(depth, rate) * path_prob < threshold:
                return []
            step = chain.initial if last is None else chain.transition[last]
            term_pmf = poisson.pmf(depth + 1, rate)
            children = []
            for item in range(chain.size):
                p = path_prob * step[item]
                if p <= 0:
                    continue
                terminal = float(term_pmf * p)
                below = expand(p, depth + 1, item)
                if terminal >= threshold or below:
                    children.append((item, terminal, terminal >= threshold, below))
            return children

        nodes: List[TreeNode] = []

        def flatten(children, parent: Optional[int], depth: int):
            for item, prob, reported, below in children:
                node = TreeNode(id=len(nodes), parent=parent, item=item, depth=depth, probability=prob,
                                reported=reported,
                                token=model.vocabulary.token(stream, item) if model.vocabulary else None)
                nodes.append(node)
                flatten(below, node.id, depth + 1)

        flatten(expand(1.0, 0, None), None, 1)
        logger.debug(f"Sequence tree for state {state}: {len(nodes)} nodes at threshold {threshold}")
        return SequenceTree(stream=stream, state=state, threshold=threshold, max_depth=max_depth,
                            empty_probability=float(poisson.pmf(0, rate)), nodes=nodes)

    def most_likely_sequences(self, model: EpisodeModel, state: int, k: int,
                              threshold: Optional[float] = None) -> List[Tuple[Tuple[int, ...], float]]:
        tree = self.sequence_tree(model, state, threshold)
        ranked = sorted(tree.terminations().items(), key=lambda kv: (-kv[1], kv[0]))
        return ranked[:k]

    # HMM paths -------------------------------------------------------------

    def greedy_trajectory(self, model: EpisodeModel, stream: Stream, state: int,
                          max_steps: Optional[int] = None, top_k: Optional[int] = None,
                          strict: bool = False) -> Trajectory:
        """Walk argmax transitions from the argmax initial HMM state until a state's best successor is itself."""
        _require_hmm(stream)
        max_steps = max_steps or settings.TRAJECTORY_MAX_STEPS
        top_k = top_k or settings.TRAJECTORY_ITEMS
        sub = model.hmm[stream]
        initial, transition = sub.initial[state], sub.transition[state]
        path = [int(np.argmax(initial))]
        converged = False
        while True:
            nxt = int(np.argmax(transition[path[-1]]))
            if nxt == path[-1]:
                converged = True
                break
            if len(path) >= max_steps:
                break
            path.append(nxt)
        if not converged:
            message = f"trajectory of {stream.value} state {state} not absorbed within {max_steps} steps"
            if strict:
                raise NonConvergent(message)
            logger.warning(message)
        top_items = [ranked_items(sub.emission.probs[s], top_k, stream, model) for s in path]
        return Trajectory(stream=stream, state=state, states=path, top_items=top_items, converged=converged)

    def viterbi_path(self, model: EpisodeModel, stream: Stream, state: int, n: int) -> List[int]:
        """Most likely HMM state path of length ``n`` under the state chain alone."""
        _require_hmm(stream)
        sub = model.hmm[stream]
        return _viterbi(sub.states[state].state_chain.log_initial, sub.states[state].state_chain.log_transition,
                        np.zeros((n, sub.n_hmm)))

    def viterbi_decode(self, model: EpisodeModel, stream: Stream, state: int,
                       timepoints: Sequence[Sequence[int]]) -> List[int]:
        """Most likely HMM state path for an observed multiset sequence."""
        _require_hmm(stream)
        sub = model.hmm[stream]
        data = encode_timepoints(timepoints, sub.vocab_size, stream)
        chain = sub.states[state].state_chain
        return _viterbi(chain.log_initial, chain.log_transition, sub.emission.log_matrix(data))

    # Items -----------------------------------------------------------------

    def item_likelihood_ratio(self, emission: HmmEmission, s: int, items_a: Sequence[int],
                              items_b: Sequence[int], test: str = "",
                              min_mass: Optional[float] = None) -> LikelihoodRatio:
        """mass(A) / mass(B) under HMM state ``s``; +inf when only B is empty."""
        min_mass = settings.ADMINISTERED_MIN_MASS if min_mass is None else min_mass
        if set(items_a) & set(items_b):
            raise ValueError(f"item sets for test '{test}' overlap")
        probs = emission.probs[s]
        mass_a = float(probs[list(items_a)].sum()) if len(items_a) else 0.0
        mass_b = float(probs[list(items_b)].sum()) if len(items_b) else 0.0
        if mass_a + mass_b < min_mass:
            return LikelihoodRatio(state=s, test=test, ratio=None, administered=False)
        try:
            ratio = mass_ratio(mass_a, mass_b)
        except DivisionByZeroMass:
            ratio = math.inf
        return LikelihoodRatio(state=s, test=test, ratio=ratio)

    def item_likelihood_ratios(self, model: EpisodeModel, stream: Stream,
                               partition: Dict[str, Tuple[Sequence[int], Sequence[int]]]) -> List[LikelihoodRatio]:
        """Ratios for every HMM state and test; ``partition`` maps test -> (A items, B items)."""
        _require_hmm(stream)
        emission = model.hmm[stream].emission
        return [self.item_likelihood_ratio(emission, s, a, b, test)
                for s in range(emission.n_hmm) for test, (a, b) in partition.items()]

    def top_items(self, model: EpisodeModel, stream: Stream, state: int, k: Optional[int] = None) -> TopItems:
        """Highest-probability items of a diagnoses state, a bed state's first item, or an HMM state's emission."""
        k = k or settings.TOP_ITEMS
        if stream in HMM_STREAMS:
            probs = model.hmm[stream].emission.probs[state]
            prevalence = None
        else:
            sub = model.submodel(stream)
            probs = sub.probs[state] if stream in COLLECTION_STREAMS else sub.initial[state]
            prevalence = float(model.state_prevalence(stream)[state])
        return TopItems(stream=stream, state=state, prevalence=prevalence,
                        items=ranked_items(probs, k, stream, model))

    # Conditional inference -------------------------------------------------

    def infer_scalar(self, model: EpisodeModel, episode: Episode, scalar: Scalar) -> ScalarPosterior:
        """Posterior of an unobserved scalar given everything else the episode carries."""
        if episode.scalar(scalar) is not None:
            logger.debug(f"Ignoring the observed {scalar.value} while inferring it")
            episode = episode.without(scalar)
        gamma = model.top_posterior(episode)
        if scalar is Scalar.AGE:
            pmf = gamma @ np.stack([d.pmf() for d in model.age])
            return ScalarPosterior(scalar=scalar, support_min=model.age_support[0], pmf=pmf.tolist())
        flags = model.death if scalar is Scalar.DEATH else model.sex
        return ScalarPosterior(scalar=scalar, probability=float(gamma @ np.array([d.p for d in flags])))


def _viterbi(log_initial: np.ndarray, log_transition: np.ndarray, log_emission: np.ndarray) -> List[int]:
    n = log_emission.shape[0]
    if n == 0:
        return []
    score = log_initial + log_emission[0]
    back = np.zeros((n, score.size), dtype=int)
    for t in range(1, n):
        candidates = score[:, None] + log_transition
        back[t] = np.argmax(candidates, axis=0)
        score = candidates[back[t], np.arange(score.size)] + log_emission[t]
    path = [int(np.argmax(score))]
    for t in range(n - 1, 0, -1):
        path.append(int(back[t][path[-1]]))
    return path[::-1]


analysis_service = AnalysisService()
