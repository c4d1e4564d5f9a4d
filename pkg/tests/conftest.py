import numpy as np
import pytest

from episodemix.models.models import HMM_STREAMS, Hyperparams, Stream, VocabularySet
from episodemix.services.episode_model import EpisodeModel
from episodemix.services.generation_service import generation_service
from episodemix.services.submodels import (
    CollectionMixture,
    HmmEmission,
    HmmSequenceMixture,
    MarkovSequenceMixture,
)
from episodemix.utils.distributions import BernoulliDist, QuantizedGaussianDist

TOKENS = {
    Stream.BEDS: ["ED", "ICU", "WARD"],
    Stream.ADMISSION_DX: ["A01", "B02", "C03", "D04"],
    Stream.DISCHARGE_DX: ["A01", "B02", "C03", "D04"],
    Stream.LABS: ["NA_LO", "NA_HI", "K_LO", "K_HI"],
    Stream.NEURO: ["GCS_3", "GCS_15", "PUPIL"],
    Stream.MEDS: ["ABX", "PRESSOR", "SEDATIVE"],
}


@pytest.fixture
def vocabulary():
    return VocabularySet(streams=TOKENS)


@pytest.fixture
def vocab_sizes(vocabulary):
    return vocabulary.sizes()


def build_random_model(hp: Hyperparams, vocabulary: VocabularySet, seed: int = 0) -> EpisodeModel:
    rng = np.random.default_rng(seed)
    sizes = vocabulary.sizes()
    n_top = hp.n_top

    def rows(*shape):
        return rng.dirichlet(np.ones(shape[-1]), size=shape[:-1])

    hmm = {}
    for x in HMM_STREAMS:
        n, s = hp.n_states(x), hp.n_hmm(x)
        emission = HmmEmission(rng.uniform(0.5, 2.0, size=s), rows(s, sizes[x]))
        hmm[x] = HmmSequenceMixture(rng.uniform(1.0, 4.0, size=n), rows(n, s), rows(n, s, s), emission)
    return EpisodeModel(
        top=rng.dirichlet(np.ones(n_top)),
        age=[QuantizedGaussianDist(rng.uniform(30, 80), rng.uniform(50, 300), 0, 120) for _ in range(n_top)],
        sex=[BernoulliDist(rng.uniform(0.2, 0.8)) for _ in range(n_top)],
        death=[BernoulliDist(rng.uniform(0.05, 0.6)) for _ in range(n_top)],
        mixing={x: rows(n_top, hp.n_states(x)) for x in Stream},
        diagnoses=CollectionMixture(rng.uniform(1.0, 3.0, size=hp.n_dx), rows(hp.n_dx, sizes[Stream.ADMISSION_DX])),
        beds=MarkovSequenceMixture(rng.uniform(1.0, 3.0, size=hp.n_beds), rows(hp.n_beds, sizes[Stream.BEDS]),
                                   rows(hp.n_beds, sizes[Stream.BEDS], sizes[Stream.BEDS])),
        hmm=hmm,
        vocabulary=vocabulary,
    )


@pytest.fixture
def make_model(vocabulary):
    """Factory for models with random parameters over the test vocabulary."""
    def factory(seed: int = 0, **sizes) -> EpisodeModel:
        return build_random_model(Hyperparams(**sizes), vocabulary, seed)
    return factory


@pytest.fixture
def small_model(make_model):
    return make_model(seed=3, n_top=2, n_dx=2, n_beds=2, n_labs=2, n_neuro=1, n_meds=2,
                      hmm_labs=2, hmm_neuro=2, hmm_meds=1)


@pytest.fixture
def sampled_corpus(small_model):
    episodes, _ = generation_service.sample(small_model, 60, seed=11)
    return episodes
