import numpy as np
import pytest

from episodemix.core.exceptions import EpisodeMixError
from episodemix.services.generation_service import generation_service
from episodemix.utils.corpus import load_corpus, load_sidecar


def test_sampling_is_independent_of_threads(small_model):
    one, traces_one = generation_service.sample(small_model, 50, seed=3, threads=1, chunk_size=8)
    many, traces_many = generation_service.sample(small_model, 50, seed=3, threads=4, chunk_size=8)
    assert one == many
    assert traces_one == traces_many


def test_prefix_of_a_larger_sample(small_model):
    short, _ = generation_service.sample(small_model, 10, seed=3)
    longer, _ = generation_service.sample(small_model, 30, seed=3)
    assert longer[:10] == short


def test_sample_arguments(small_model):
    with pytest.raises(ValueError):
        generation_service.sample(small_model, 0, seed=1)
    with pytest.raises(ValueError):
        generation_service.sample(small_model, 5, seed=-1)


def test_generate_corpus_writes_corpus_and_sidecar(tmp_path, small_model, vocabulary):
    path = tmp_path / "synthetic.jsonl"
    episodes, traces = generation_service.generate_corpus(small_model, 20, 9, path)
    assert load_corpus(path, vocabulary).episodes == episodes
    assert load_sidecar(tmp_path / "synthetic.jsonl.latent.jsonl") == traces


def test_generate_corpus_needs_vocabulary(tmp_path, small_model):
    small_model.vocabulary = None
    with pytest.raises(EpisodeMixError):
        generation_service.generate_corpus(small_model, 5, 1, tmp_path / "out.jsonl")


@pytest.mark.slow
def test_top_state_frequencies_follow_weights(small_model):
    n = 20_000
    _, traces = generation_service.sample(small_model, n, seed=10, threads=4)
    counts = np.bincount([t.top for t in traces], minlength=small_model.n_top)
    p = small_model.top.probs
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 4 * sigma)
