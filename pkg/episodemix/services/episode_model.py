"""The layered episode model.

A top-layer categorical over Z ties together per-state scalar distributions
(age, sex, death) and six stream sub-models through per-stream mixing
matrices ``p(z_x | z)``. Streams and scalars are conditionally independent
given Z, so an episode's log-likelihood under a top state is a plain sum of
per-factor terms and every restricted fit (fewer streams, held-out scalars)
just drops factors from that sum.
"""
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from episodemix.core.config import settings
from episodemix.core.exceptions import EmptyDataset, OutOfSupport
from episodemix.models.models import (
    ALL_SCALARS,
    ALL_STREAMS,
    COLLECTION_STREAMS,
    HMM_STREAMS,
    CountConvention,
    Episode,
    Hyperparams,
    LatentTrace,
    Scalar,
    Stream,
    VocabularySet,
)
from episodemix.services.submodels import (
    CollectionMixture,
    HmmPosterior,
    HmmSequenceMixture,
    MarkovSequenceMixture,
)
from episodemix.utils.distributions import (
    BernoulliDist,
    BernoulliStats,
    CategoricalDist,
    CategoricalStats,
    GaussianStats,
    QuantizedGaussianDist,
    log_sum_exp,
    normalize_counts,
    safe_log,
    weighted_mle_update,
)
from episodemix.utils.parallel import map_chunks

logger = logging.getLogger(__name__)


class EncodedEpisode:
    """An episode with every stream converted to the arrays its sub-model scores."""

    __slots__ = ("episode", "streams")

    def __init__(self, episode: Episode, streams: Dict[Stream, object]):
        self.episode = episode
        self.streams = streams


class EncodedBatch:
    """A chunk of encoded episodes with scalars and streams stacked for scoring in one pass.

    ``scalars[s]`` is ``(observed mask, values)``; unobserved values hold 0.
    """

    __slots__ = ("size", "scalars", "streams")

    def __init__(self, size: int, scalars: Dict[Scalar, Tuple[np.ndarray, np.ndarray]],
                 streams: Dict[Stream, object]):
        self.size = size
        self.scalars = scalars
        self.streams = streams


class Responsibilities:
    """Posterior over the latent layers of one episode.

    ``joint[x]`` is the (Z x K_x) matrix ``w(z, z_x)``; its rows sum to ``gamma``.
    ``hmm_posteriors[x]`` holds forward-backward results for every mixture
    state of an HMM stream (None when the stream is empty).
    """

    __slots__ = ("log_lik", "gamma", "joint", "hmm_posteriors")

    def __init__(self, log_lik: float, gamma: np.ndarray, joint: Dict[Stream, np.ndarray],
                 hmm_posteriors: Dict[Stream, Optional[HmmPosterior]]):
        self.log_lik = log_lik
        self.gamma = gamma
        self.joint = joint
        self.hmm_posteriors = hmm_posteriors

    def sub_state(self, stream: Stream) -> np.ndarray:
        return self.joint[stream].sum(axis=0)

    def hmm_marginals(self, stream: Stream) -> Optional[np.ndarray]:
        """(T x S) HMM state marginals mixed over the stream's sub-states."""
        post = self.hmm_posteriors.get(stream)
        if post is None:
            return None
        return np.einsum('k,kts->ts', self.sub_state(stream), post.state_marginals)


class ModelStats:
    """Responsibility-weighted sufficient statistics for one M-step."""

    def __init__(self, model: "EpisodeModel"):
        n_top = model.n_top
        self.top = np.zeros(n_top)
        self.age_weight = np.zeros(n_top)
        self.age_sum = np.zeros(n_top)
        self.age_sum_sq = np.zeros(n_top)
        self.sex_weight = np.zeros(n_top)
        self.sex_ones = np.zeros(n_top)
        self.death_weight = np.zeros(n_top)
        self.death_ones = np.zeros(n_top)
        self.mixing = {x: np.zeros((n_top, model.submodel(x).n_states)) for x in ALL_STREAMS}
        self.diagnoses = model.diagnoses._initialize_sufficient_statistics()
        self.beds = model.beds._initialize_sufficient_statistics()
        self.hmm = {x: model.hmm[x]._initialize_sufficient_statistics() for x in HMM_STREAMS}
        self.log_lik = 0.0
        self.n_episodes = 0

    def group(self, stream: Stream):
        if stream in COLLECTION_STREAMS:
            return self.diagnoses
        if stream is Stream.BEDS:
            return self.beds
        return self.hmm[stream]

    def add_scalars(self, episode: Episode, gamma: np.ndarray) -> None:
        if episode.age is not None:
            self.age_weight += gamma
            self.age_sum += gamma * episode.age
            self.age_sum_sq += gamma * episode.age * episode.age
        if episode.sex is not None:
            self.sex_weight += gamma
            self.sex_ones += gamma * episode.sex
        if episode.death is not None:
            self.death_weight += gamma
            self.death_ones += gamma * episode.death

    def add_scalar_batch(self, batch: EncodedBatch, gamma: np.ndarray) -> None:
        """Scalar statistics of a chunk given its (N x Z) responsibilities."""
        observed, values = batch.scalars[Scalar.AGE]
        weights, ages = gamma[observed], values[observed].astype(float)
        self.age_weight += weights.sum(axis=0)
        self.age_sum += ages @ weights
        self.age_sum_sq += (ages * ages) @ weights
        observed, values = batch.scalars[Scalar.SEX]
        self.sex_weight += gamma[observed].sum(axis=0)
        self.sex_ones += values[observed].astype(float) @ gamma[observed]
        observed, values = batch.scalars[Scalar.DEATH]
        self.death_weight += gamma[observed].sum(axis=0)
        self.death_ones += values[observed].astype(float) @ gamma[observed]

    def merge(self, other: "ModelStats") -> "ModelStats":
        for name in ("top", "age_weight", "age_sum", "age_sum_sq", "sex_weight", "sex_ones",
                     "death_weight", "death_ones"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        for x in ALL_STREAMS:
            self.mixing[x] += other.mixing[x]
        self.diagnoses.merge(other.diagnoses)
        self.beds.merge(other.beds)
        for x in HMM_STREAMS:
            self.hmm[x].merge(other.hmm[x])
        self.log_lik += other.log_lik
        self.n_episodes += other.n_episodes
        return self


def _conditional(log_joint: np.ndarray, log_marginal: np.ndarray) -> np.ndarray:
    """Row-normalised ``exp(log_joint)``; rows with zero mass stay zero."""
    out = np.zeros_like(log_joint)
    ok = np.isfinite(log_marginal)
    out[ok] = np.exp(log_joint[ok] - log_marginal[ok][..., None])
    return out


class EpisodeModel:
    """Top-layer mixture over Z with scalar factors and six stream sub-models.

    Admission and discharge diagnoses share the single ``diagnoses`` state
    pool and differ only in their mixing matrices.
    """

    def __init__(self, top, age: Sequence[QuantizedGaussianDist], sex: Sequence[BernoulliDist],
                 death: Sequence[BernoulliDist], mixing: Dict[Stream, np.ndarray],
                 diagnoses: CollectionMixture, beds: MarkovSequenceMixture,
                 hmm: Dict[Stream, HmmSequenceMixture], vocabulary: Optional[VocabularySet] = None):
        self.top = top if isinstance(top, CategoricalDist) else CategoricalDist(top)
        n_top = self.top.size
        if not len(age) == len(sex) == len(death) == n_top:
            raise ValueError("one age, sex and death distribution per top state required")
        if len({(d.support_min, d.support_max) for d in age}) != 1:
            raise ValueError("all top states must share one age support")
        self.age = list(age)
        self.sex = list(sex)
        self.death = list(death)
        self.diagnoses = diagnoses
        self.beds = beds
        self.hmm = {Stream(x): m for x, m in hmm.items()}
        missing = [x.value for x in HMM_STREAMS if x not in self.hmm]
        if missing:
            raise ValueError(f"missing HMM sub-models: {missing}")
        mixing = {Stream(k): v for k, v in mixing.items()}
        self.mixing: Dict[Stream, np.ndarray] = {}
        for x in ALL_STREAMS:
            m = np.array(mixing[x], dtype=float)
            if m.shape != (n_top, self.submodel(x).n_states):
                raise ValueError(f"mixing matrix for '{x.value}' must be {n_top} x {self.submodel(x).n_states}")
            if np.any(m < 0) or np.any(np.abs(m.sum(axis=1) - 1.0) > 1e-9):
                raise ValueError(f"mixing rows for '{x.value}' must be probability vectors")
            m.setflags(write=False)
            self.mixing[x] = m
        self.log_mixing = {x: safe_log(m) for x, m in self.mixing.items()}
        self.vocabulary = vocabulary
        if vocabulary is not None:
            for x in ALL_STREAMS:
                if vocabulary.size(x) != self.submodel(x).vocab_size:
                    raise ValueError(f"vocabulary size of '{x.value}' does not match its sub-model")
        self._age_log_pmf = np.stack([d.log_pmf_table for d in self.age])
        self._flag_log_pmf = {
            Scalar.SEX: np.stack([safe_log(np.array([1.0 - d.p, d.p])) for d in self.sex]),
            Scalar.DEATH: np.stack([safe_log(np.array([1.0 - d.p, d.p])) for d in self.death]),
        }

    # Structure ---------------------------------------------------------------

    @classmethod
    def blank(cls, hp: Hyperparams, vocab_sizes: Dict[Stream, int],
              vocabulary: Optional[VocabularySet] = None) -> "EpisodeModel":
        """Uniform model with the given shapes; the template random initialisation starts from."""
        sizes = {Stream(k): v for k, v in vocab_sizes.items()}
        if sizes[Stream.ADMISSION_DX] != sizes[Stream.DISCHARGE_DX]:
            raise ValueError("admission and discharge diagnoses must share one vocabulary size")
        n_top = hp.n_top
        lo, hi = settings.AGE_SUPPORT_MIN, settings.AGE_SUPPORT_MAX
        spread = max((hi - lo) ** 2 / 12.0, settings.VARIANCE_FLOOR)
        return cls(
            top=np.full(n_top, 1.0 / n_top),
            age=[QuantizedGaussianDist((lo + hi) / 2.0, spread, lo, hi) for _ in range(n_top)],
            sex=[BernoulliDist(0.5) for _ in range(n_top)],
            death=[BernoulliDist(0.5) for _ in range(n_top)],
            mixing={x: np.full((n_top, hp.n_states(x)), 1.0 / hp.n_states(x)) for x in ALL_STREAMS},
            diagnoses=CollectionMixture.blank(hp.n_dx, sizes[Stream.ADMISSION_DX]),
            beds=MarkovSequenceMixture.blank(hp.n_beds, sizes[Stream.BEDS]),
            hmm={x: HmmSequenceMixture.blank(hp.n_states(x), hp.n_hmm(x), sizes[x]) for x in HMM_STREAMS},
            vocabulary=vocabulary,
        )

    @property
    def n_top(self) -> int:
        return self.top.size

    @property
    def age_support(self) -> Tuple[int, int]:
        return self.age[0].support_min, self.age[0].support_max

    @property
    def hyperparams(self) -> Hyperparams:
        return Hyperparams(
            n_top=self.n_top, n_dx=self.diagnoses.n_states, n_beds=self.beds.n_states,
            n_labs=self.hmm[Stream.LABS].n_states, n_neuro=self.hmm[Stream.NEURO].n_states,
            n_meds=self.hmm[Stream.MEDS].n_states, hmm_labs=self.hmm[Stream.LABS].n_hmm,
            hmm_neuro=self.hmm[Stream.NEURO].n_hmm, hmm_meds=self.hmm[Stream.MEDS].n_hmm,
        )

    @property
    def vocab_sizes(self) -> Dict[Stream, int]:
        return {x: self.submodel(x).vocab_size for x in ALL_STREAMS}

    def submodel(self, stream: Stream):
        if stream in COLLECTION_STREAMS:
            return self.diagnoses
        if stream is Stream.BEDS:
            return self.beds
        return self.hmm[stream]

    def scalar_log_pmf(self, scalar: Scalar, value: int) -> np.ndarray:
        """Per-top-state log-probability of an observed scalar value."""
        if scalar is Scalar.AGE:
            lo, hi = self.age_support
            if not lo <= value <= hi:
                raise OutOfSupport(f"age {value} outside support [{lo}, {hi}]")
            return self._age_log_pmf[:, value - lo]
        return self._flag_log_pmf[scalar][:, int(value)]

    # Likelihood --------------------------------------------------------------

    def encode(self, episode: Episode) -> EncodedEpisode:
        if episode.age is not None:
            lo, hi = self.age_support
            if not lo <= episode.age <= hi:
                raise OutOfSupport(f"age {episode.age} outside support [{lo}, {hi}]")
        return EncodedEpisode(episode, {x: self.submodel(x).encode(episode.stream(x), x) for x in ALL_STREAMS})

    def encode_batch(self, encoded: Sequence[EncodedEpisode]) -> EncodedBatch:
        scalars = {}
        for scalar in ALL_SCALARS:
            values = [enc.episode.scalar(scalar) for enc in encoded]
            observed = np.array([v is not None for v in values], dtype=bool)
            scalars[scalar] = (observed, np.array([0 if v is None else v for v in values], dtype=np.int64))
        streams = {x: self.submodel(x).encode_batch([enc.streams[x] for enc in encoded]) for x in ALL_STREAMS}
        return EncodedBatch(len(encoded), scalars, streams)

    def _scalar_rows(self, scalar: Scalar, values: np.ndarray) -> np.ndarray:
        """(N x Z) log-probabilities of observed scalar values; ages are already checked by ``encode``."""
        if scalar is Scalar.AGE:
            return self._age_log_pmf[:, values - self.age_support[0]].T
        return self._flag_log_pmf[scalar][:, values].T

    def _evaluate_batch(self, batch: EncodedBatch, streams: Sequence[Stream], scalars: Sequence[Scalar]):
        log_given_top = np.zeros((batch.size, self.n_top))
        for scalar in scalars:
            observed, values = batch.scalars[scalar]
            if observed.any():
                log_given_top[observed] += self._scalar_rows(scalar, values[observed])
        parts = {}
        for x in streams:
            evaluation = self.submodel(x).evaluate_batch(batch.streams[x])
            log_joint = self.log_mixing[x][None, :, :] + evaluation.log_lik[:, None, :]
            log_marginal = log_sum_exp(log_joint, axis=2)
            log_given_top += log_marginal
            parts[x] = (log_joint, log_marginal, evaluation)
        return log_given_top, parts

    def _posterior_batch(self, log_given_top: np.ndarray, parts):
        log_top = self.top.log_probs[None, :] + log_given_top
        log_lik = log_sum_exp(log_top, axis=1)
        gamma = _conditional(log_top, log_lik)
        joint = {x: gamma[:, :, None] * _conditional(lj, lm) for x, (lj, lm, _) in parts.items()}
        return log_lik, gamma, joint

    def _evaluate(self, enc: EncodedEpisode, streams: Sequence[Stream], scalars: Sequence[Scalar]):
        log_given_top = np.zeros(self.n_top)
        for scalar in scalars:
            value = enc.episode.scalar(scalar)
            if value is not None:
                log_given_top += self.scalar_log_pmf(scalar, value)
        parts = {}
        for x in streams:
            evaluation = self.submodel(x).evaluate(enc.streams[x])
            log_joint = self.log_mixing[x] + evaluation.log_lik[None, :]
            log_marginal = logsumexp(log_joint, axis=1)
            log_given_top += log_marginal
            parts[x] = (log_joint, log_marginal, evaluation)
        return log_given_top, parts

    def _posterior(self, log_given_top: np.ndarray, parts) -> Tuple[float, np.ndarray, Dict[Stream, np.ndarray]]:
        log_joint = self.top.log_probs + log_given_top
        log_lik = float(logsumexp(log_joint))
        if not math.isfinite(log_lik):
            gamma = np.zeros(self.n_top)
        else:
            gamma = np.exp(log_joint - log_lik)
        joint = {x: gamma[:, None] * _conditional(lj, lm) for x, (lj, lm, _) in parts.items()}
        return log_lik, gamma, joint

    def _as_encoded(self, episode) -> EncodedEpisode:
        return episode if isinstance(episode, EncodedEpisode) else self.encode(episode)

    def log_lik_given_top(self, episode, streams: Sequence[Stream] = ALL_STREAMS,
                          scalars: Sequence[Scalar] = ALL_SCALARS) -> np.ndarray:
        return self._evaluate(self._as_encoded(episode), streams, scalars)[0]

    def episode_log_lik_given_top(self, episode, z: int, streams: Sequence[Stream] = ALL_STREAMS,
                                  scalars: Sequence[Scalar] = ALL_SCALARS) -> float:
        return float(self.log_lik_given_top(episode, streams, scalars)[z])

    def episode_log_lik(self, episode, streams: Sequence[Stream] = ALL_STREAMS,
                        scalars: Sequence[Scalar] = ALL_SCALARS) -> float:
        return float(logsumexp(self.top.log_probs + self.log_lik_given_top(episode, streams, scalars)))

    def e_step(self, episode, streams: Sequence[Stream] = ALL_STREAMS,
               scalars: Sequence[Scalar] = ALL_SCALARS) -> Responsibilities:
        enc = self._as_encoded(episode)
        log_given_top, parts = self._evaluate(enc, streams, scalars)
        log_lik, gamma, joint = self._posterior(log_given_top, parts)
        hmm_posteriors = {x: self.hmm[x].posterior(enc.streams[x], parts[x][2])
                          for x in HMM_STREAMS if x in parts}
        return Responsibilities(log_lik, gamma, joint, hmm_posteriors)

    def top_posterior(self, episode, streams: Sequence[Stream] = ALL_STREAMS,
                      scalars: Sequence[Scalar] = ALL_SCALARS) -> np.ndarray:
        log_given_top, parts = self._evaluate(self._as_encoded(episode), streams, scalars)
        return self._posterior(log_given_top, parts)[1]

    def log_lik_many(self, episodes: Sequence, streams: Sequence[Stream] = ALL_STREAMS,
                     scalars: Sequence[Scalar] = ALL_SCALARS, threads: int = 1,
                     chunk_size: Optional[int] = None) -> np.ndarray:
        """Per-episode log-likelihoods, computed in fixed chunks across ``threads`` workers."""
        def work(start, chunk):
            batch = self.encode_batch([self._as_encoded(e) for e in chunk])
            log_given_top, _ = self._evaluate_batch(batch, streams, scalars)
            return log_sum_exp(self.top.log_probs[None, :] + log_given_top, axis=1)

        parts = map_chunks(work, episodes, chunk_size or settings.CHUNK_SIZE, threads)
        return np.concatenate([np.zeros(0)] + parts)

    # Estimation --------------------------------------------------------------

    def new_stats(self) -> ModelStats:
        return ModelStats(self)

    def accumulate(self, stats: ModelStats, batch: EncodedBatch, streams: Sequence[Stream] = ALL_STREAMS,
                   scalars: Sequence[Scalar] = ALL_SCALARS) -> float:
        """E-step for a chunk of episodes, folded straight into ``stats``; returns the chunk's log-likelihood."""
        log_given_top, parts = self._evaluate_batch(batch, streams, scalars)
        log_lik, gamma, joint = self._posterior_batch(log_given_top, parts)
        stats.top += gamma.sum(axis=0)
        stats.add_scalar_batch(batch, gamma)
        for x, (_, _, evaluation) in parts.items():
            stats.mixing[x] += joint[x].sum(axis=0)
            self.submodel(x).accumulate_batch(stats.group(x), batch.streams[x], evaluation, joint[x].sum(axis=1))
        total = float(log_lik.sum())
        stats.log_lik += total
        stats.n_episodes += batch.size
        return total

    def accumulate_random(self, stats: ModelStats, enc: EncodedEpisode, rng: np.random.Generator,
                          streams: Sequence[Stream] = ALL_STREAMS) -> None:
        """Add Dirichlet(1) responsibilities for one episode (random initialisation)."""
        gamma = rng.dirichlet(np.ones(self.n_top))
        stats.top += gamma
        stats.add_scalars(enc.episode, gamma)
        for x in streams:
            sub = self.submodel(x)
            weights = rng.dirichlet(np.ones(sub.n_states))
            stats.mixing[x] += np.outer(gamma, weights)
            data = enc.streams[x]
            if x in HMM_STREAMS:
                marginals = rng.dirichlet(np.ones(sub.n_hmm), size=len(data))
                pairs = np.einsum('ti,tj->ij', marginals[:-1], marginals[1:]) if len(data) > 1 \
                    else np.zeros((sub.n_hmm, sub.n_hmm))
                sub.accumulate_posterior(
                    stats.group(x), data, weights,
                    np.broadcast_to(marginals, (sub.n_states,) + marginals.shape),
                    np.broadcast_to(pairs, (sub.n_states,) + pairs.shape))
            else:
                sub.accumulate(stats.group(x), data, None, weights)
        stats.n_episodes += 1

    def m_step(self, stats: ModelStats, streams: Sequence[Stream] = ALL_STREAMS) -> "EpisodeModel":
        """New model from accumulated statistics; states without weight keep their parameters."""
        if stats.n_episodes == 0:
            raise EmptyDataset("M-step needs statistics from at least one episode")
        dead = np.flatnonzero(stats.top <= 0)
        if dead.size:
            logger.warning(f"Top states {dead.tolist()} received no weight; keeping parameters")
        top = weighted_mle_update(CategoricalStats(self.n_top, stats.top), self.top)
        lo, hi = self.age_support
        age = [weighted_mle_update(GaussianStats(stats.age_weight[z], stats.age_sum[z], stats.age_sum_sq[z], lo, hi),
                                   self.age[z]) for z in range(self.n_top)]
        sex = [weighted_mle_update(BernoulliStats(stats.sex_weight[z], stats.sex_ones[z]), self.sex[z])
               for z in range(self.n_top)]
        death = [weighted_mle_update(BernoulliStats(stats.death_weight[z], stats.death_ones[z]), self.death[z])
                 for z in range(self.n_top)]
        mixing = {x: normalize_counts(stats.mixing[x], self.mixing[x]) if x in streams else self.mixing[x]
                  for x in ALL_STREAMS}
        diagnoses = self.diagnoses
        if any(x in streams for x in COLLECTION_STREAMS):
            diagnoses = self.diagnoses.do_mstep(stats.diagnoses)
        beds = self.beds.do_mstep(stats.beds) if Stream.BEDS in streams else self.beds
        hmm = {x: self.hmm[x].do_mstep(stats.hmm[x]) if x in streams else self.hmm[x] for x in HMM_STREAMS}
        return EpisodeModel(top, age, sex, death, mixing, diagnoses, beds, hmm, self.vocabulary)

    # Generation --------------------------------------------------------------

    def sample_episode(self, rng: np.random.Generator) -> Tuple[Episode, LatentTrace]:
        z = self.top.sample(rng)
        record = {
            "age": self.age[z].sample(rng),
            "sex": self.sex[z].sample(rng),
            "death": self.death[z].sample(rng),
        }
        sub_states, paths = {}, {}
        for x in ALL_STREAMS:
            k = int(rng.choice(self.mixing[x].shape[1], p=self.mixing[x][z]))
            data, path = self.submodel(x).sample_state(k, rng)
            record[x.value] = data
            sub_states[x] = k
            if path is not None:
                paths[x] = path
        return Episode(**record), LatentTrace(top=z, sub_states=sub_states, hmm_paths=paths)

    # Reordering and summaries ------------------------------------------------

    def permuted(self, order: Sequence[int]) -> "EpisodeModel":
        """Same distribution with top states relabelled so new state i is old state ``order[i]``."""
        order = [int(i) for i in order]
        if sorted(order) != list(range(self.n_top)):
            raise ValueError(f"{order} is not a permutation of the top states")
        return EpisodeModel(
            top=self.top.probs[order], age=[self.age[i] for i in order], sex=[self.sex[i] for i in order],
            death=[self.death[i] for i in order], mixing={x: m[order] for x, m in self.mixing.items()},
            diagnoses=self.diagnoses, beds=self.beds, hmm=self.hmm, vocabulary=self.vocabulary,
        )

    def sorted_by_weight(self) -> "EpisodeModel":
        return self.permuted(np.argsort(-self.top.probs, kind='stable'))

    def state_distribution(self, stream: Stream) -> np.ndarray:
        """(Z x K_x) matrix ``p_z * p(z_x | z)``."""
        return self.top.probs[:, None] * self.mixing[stream]

    def state_prevalence(self, stream: Stream) -> np.ndarray:
        return self.top.probs @ self.mixing[stream]


# Parameter counting and BIC --------------------------------------------------

def submodel_param_count(hp: Hyperparams, vocab_sizes: Dict[Stream, int], stream: Stream,
                         convention: CountConvention = CountConvention.SHARED) -> int:
    """Parameters owned by one stream's sub-model (mixing weights excluded)."""
    size = vocab_sizes[stream]
    n = hp.n_states(stream)
    if stream in COLLECTION_STREAMS:
        return (1 + size) * n
    if stream is Stream.BEDS:
        return (1 + size + size * size) * n
    s = hp.n_hmm(stream)
    if convention is CountConvention.PER_STATE:
        return (1 + s + s * s + s * size) * n
    return (1 + s + s * s) * n + s * (1 + size)


def param_count(hp: Hyperparams, vocab_sizes: Dict[Stream, int],
                convention: CountConvention = CountConvention.SHARED,
                streams: Sequence[Stream] = ALL_STREAMS, scalars: Sequence[Scalar] = ALL_SCALARS) -> int:
    """Free-parameter count ``d`` used by BIC.

    Under the shared convention the diagnoses pool is counted once however many
    collection streams are included; the per-state convention counts it per
    stream and gives every HMM mixture state its own emission table.
    """
    sizes = {Stream(k): v for k, v in vocab_sizes.items()}
    convention = CountConvention(convention)
    n_top = hp.n_top
    d = n_top
    d += sum(n_top * hp.n_states(x) for x in streams)
    d += n_top * sum(2 if s is Scalar.AGE else 1 for s in scalars)
    collections = [x for x in streams if x in COLLECTION_STREAMS]
    if collections:
        per_stream = submodel_param_count(hp, sizes, collections[0], convention)
        d += per_stream * (len(collections) if convention is CountConvention.PER_STATE else 1)
    for x in streams:
        if x not in COLLECTION_STREAMS:
            d += submodel_param_count(hp, sizes, x, convention)
    return d


def bic_value(d: int, n: int, log_lik: float) -> float:
    return d * math.log(n) - 2.0 * log_lik


def bic(model: EpisodeModel, data: Sequence, convention: CountConvention = CountConvention.SHARED,
        streams: Sequence[Stream] = ALL_STREAMS, scalars: Sequence[Scalar] = ALL_SCALARS,
        threads: int = 1, chunk_size: Optional[int] = None) -> float:
    if len(data) == 0:
        raise EmptyDataset("BIC needs at least one episode")
    log_lik = float(model.log_lik_many(data, streams, scalars, threads, chunk_size).sum())
    d = param_count(model.hyperparams, model.vocab_sizes, convention, streams, scalars)
    return bic_value(d, len(data), log_lik)
