import logging
from pathlib import Path
from typing import List, Optional, Tuple, Union

from episodemix.core.config import settings
from episodemix.core.exceptions import EpisodeMixError, IoError
from episodemix.models.models import Episode, LatentTrace
from episodemix.services.episode_model import EpisodeModel
from episodemix.utils.corpus import save_corpus, save_sidecar
from episodemix.utils.parallel import map_chunks, unit_rng

# Set up logging
logger = logging.getLogger(__name__)


class GenerationService:
    def sample(self, model: EpisodeModel, n: int, seed: int, threads: int = 1,
               chunk_size: Optional[int] = None) -> Tuple[List[Episode], List[LatentTrace]]:
        """``n`` episodes, episode ``i`` drawn from its own stream ``(seed, i)``."""
        if n < 1:
            raise ValueError("n must be at least 1")
        if seed < 0:
            raise ValueError("seed must be non-negative")

        def work(start, indices):
            return [model.sample_episode(unit_rng(seed, i)) for i in indices]

        parts = map_chunks(work, range(n), chunk_size or settings.CHUNK_SIZE, threads)
        pairs = [pair for part in parts for pair in part]
        return [p[0] for p in pairs], [p[1] for p in pairs]

    def generate_corpus(self, model: EpisodeModel, n: int, seed: int, path: Union[str, Path],
                        sidecar_path: Optional[Union[str, Path]] = None,
                        threads: int = 1) -> Tuple[List[Episode], List[LatentTrace]]:
        """Sample a corpus and write it with its latent-label sidecar."""
        if model.vocabulary is None:
            raise EpisodeMixError("the model carries no vocabulary to write tokens with")
        episodes, traces = self.sample(model, n, seed, threads)
        sidecar_path = sidecar_path or f"{path}.latent.jsonl"
        try:
            save_corpus(episodes, model.vocabulary, path)
            save_sidecar(traces, sidecar_path)
        except IoError:
            raise
        except Exception as e:
            logger.error(f"Error generating corpus: {str(e)}")
            raise EpisodeMixError(f"Failed to generate corpus: {str(e)}")
        logger.info(f"Generated {n} episodes (seed {seed}) into {path} with sidecar {sidecar_path}")
        return episodes, traces


generation_service = GenerationService()
