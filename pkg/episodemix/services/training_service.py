import logging
import math
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from episodemix.core.config import settings
from episodemix.core.exceptions import EmptyDataset, EpisodeMixError
from episodemix.models.models import Episode, FitConfig, FitReport, Hyperparams, VocabularySet
from episodemix.services.episode_model import EncodedBatch, EncodedEpisode, EpisodeModel, ModelStats
from episodemix.utils.parallel import map_chunks, unit_rng

# Set up logging
logger = logging.getLogger(__name__)


class ScoredEpisode(NamedTuple):
    log_lik: float
    top_state: Optional[int] = None
    responsibility: Optional[float] = None


def _merge_in_order(parts: List[ModelStats]) -> ModelStats:
    total = parts[0]
    for part in parts[1:]:
        total.merge(part)
    return total


def relative_change(current: float, previous: float) -> float:
    if current == previous:
        return 0.0
    return abs(current - previous) / max(abs(previous), 1e-300)


class TrainingService:
    """EM driver: random initialisation, chunked E-steps, restarts and scoring."""

    def encode_corpus(self, template: EpisodeModel, episodes: Sequence[Episode]) -> List[EncodedEpisode]:
        return [template.encode(e) for e in episodes]

    def batch_corpus(self, template: EpisodeModel, encoded: Sequence[EncodedEpisode],
                     cfg: FitConfig) -> List[EncodedBatch]:
        """One stacked batch per chunk; chunk boundaries depend on ``chunk_size`` only."""
        return map_chunks(lambda start, chunk: template.encode_batch(chunk), encoded, cfg.chunk_size, cfg.threads)

    def initial_model(self, template: EpisodeModel, encoded: Sequence[EncodedEpisode], cfg: FitConfig,
                      restart: int) -> EpisodeModel:
        """One M-step from Dirichlet(1) responsibilities drawn per episode."""
        def work(start, chunk):
            stats = template.new_stats()
            for offset, enc in enumerate(chunk):
                template.accumulate_random(stats, enc, unit_rng(cfg.seed, restart, start + offset), cfg.streams)
            return stats

        stats = _merge_in_order(map_chunks(work, encoded, cfg.chunk_size, cfg.threads))
        return template.m_step(stats, cfg.streams)

    def expectation(self, model: EpisodeModel, batches: Sequence[EncodedBatch], cfg: FitConfig) -> ModelStats:
        def work(start, chunk):
            stats = model.new_stats()
            for batch in chunk:
                model.accumulate(stats, batch, cfg.streams, cfg.scalars)
            return stats

        return _merge_in_order(map_chunks(work, batches, 1, cfg.threads))

    def _fit_once(self, template: EpisodeModel, encoded: Sequence[EncodedEpisode],
                  batches: Sequence[EncodedBatch], cfg: FitConfig, restart: int) -> Tuple[EpisodeModel, FitReport]:
        model = self.initial_model(template, encoded, cfg, restart)
        trace: List[float] = []
        converged = False
        iterations = tqdm(range(cfg.max_iters), desc=f"EM restart {restart}", disable=not cfg.show_progress)
        for iteration in iterations:
            stats = self.expectation(model, batches, cfg)
            trace.append(stats.log_lik)
            iterations.set_postfix(log_lik=f"{stats.log_lik:.4f}")
            logger.debug(f"Restart {restart} iteration {iteration + 1}: log-likelihood {stats.log_lik:.6f}")
            if len(trace) > 1 and relative_change(trace[-1], trace[-2]) < cfg.rel_tol:
                converged = True
                break
            if iteration + 1 == cfg.max_iters:
                break
            model = model.m_step(stats, cfg.streams)
        report = FitReport(log_lik_trace=trace, iterations=len(trace), converged=converged,
                           seed=cfg.seed, restart=restart)
        return model, report

    def fit(self, episodes: Sequence[Episode], hp: Hyperparams, cfg: Optional[FitConfig] = None,
            vocabulary: Optional[VocabularySet] = None,
            vocab_sizes: Optional[dict] = None) -> Tuple[EpisodeModel, FitReport]:
        """Train a model from scratch; the best restart by final log-likelihood wins (ties: earliest)."""
        cfg = cfg or FitConfig()
        if not episodes:
            raise EmptyDataset("cannot fit a model to an empty corpus")
        if vocab_sizes is None:
            if vocabulary is None:
                raise ValueError("either a vocabulary or vocabulary sizes are required")
            vocab_sizes = vocabulary.sizes()
        try:
            template = EpisodeModel.blank(hp, vocab_sizes, vocabulary)
            encoded = self.encode_corpus(template, episodes)
            batches = self.batch_corpus(template, encoded, cfg)
            logger.info(f"Fitting {hp.model_dump()} on {len(episodes)} episodes "
                        f"(seed {cfg.seed}, {cfg.restarts} restart(s), {cfg.threads} thread(s))")
            best_model, best_report, finals = None, None, []
            for restart in range(cfg.restarts):
                model, report = self._fit_once(template, encoded, batches, cfg, restart)
                finals.append(report.final_log_lik)
                logger.info(f"Restart {restart}: log-likelihood {report.final_log_lik:.6f} after "
                            f"{report.iterations} iterations (converged={report.converged})")
                if best_report is None or report.final_log_lik > best_report.final_log_lik:
                    best_model, best_report = model, report
            if not best_report.converged:
                logger.warning(f"EM stopped at max_iters={cfg.max_iters} without converging")
            best_report.restart_log_liks = finals
            return best_model.sorted_by_weight(), best_report
        except EpisodeMixError:
            raise
        except Exception as e:
            logger.error(f"Error fitting model: {str(e)}")
            raise EpisodeMixError(f"Failed to fit model: {str(e)}")

    def score(self, model: EpisodeModel, episodes: Sequence[Episode], with_states: bool = False,
              threads: int = 1, chunk_size: Optional[int] = None) -> List[ScoredEpisode]:
        """Per-episode log-likelihood, optionally with the most responsible top state."""
        if not with_states:
            return [ScoredEpisode(float(v)) for v in model.log_lik_many(episodes, threads=threads,
                                                                         chunk_size=chunk_size)]

        def work(start, chunk):
            rows = []
            for episode in chunk:
                resp = model.e_step(episode)
                z = int(np.argmax(resp.gamma))
                rows.append(ScoredEpisode(resp.log_lik, z, float(resp.gamma[z])))
            return rows

        parts = map_chunks(work, episodes, chunk_size or settings.CHUNK_SIZE, threads)
        return [row for part in parts for row in part]


training_service = TrainingService()


def total_log_lik(scores: Sequence[ScoredEpisode]) -> float:
    return math.fsum(s.log_lik for s in scores)
