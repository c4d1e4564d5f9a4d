"""Staged BIC search over the hyperparameters.

Lower layers are sized first on isolated streams (top layer of size 1, other
streams and all scalars dropped from the likelihood), then the top layer,
and finally the full model is retrained from scratch with the chosen sizes.
"""
import logging
from typing import Dict, List, NamedTuple, Optional, Sequence

from tqdm import tqdm

from episodemix.core.config import settings
from episodemix.core.exceptions import EmptyDataset
from episodemix.models.models import (
    COLLECTION_STREAMS,
    HMM_STREAMS,
    CountConvention,
    Episode,
    FitConfig,
    FitReport,
    Hyperparams,
    SearchGrid,
    SelectionReport,
    StageReport,
    Stream,
    VocabularySet,
)
from episodemix.services.episode_model import EpisodeModel, bic_value, param_count
from episodemix.services.training_service import training_service

# Set up logging
logger = logging.getLogger(__name__)


class SelectionOutcome(NamedTuple):
    hyperparams: Hyperparams
    report: SelectionReport
    model: Optional[EpisodeModel] = None
    fit_report: Optional[FitReport] = None


def argmin_bic(candidates: Sequence[int], values: Sequence[float]) -> int:
    """Candidate with the lowest BIC; ties go to the earlier (smaller) candidate."""
    best = 0
    for i, value in enumerate(values):
        if value < values[best]:
            best = i
    return candidates[best]


class SelectionService:
    def __init__(self):
        self.fits_performed = 0

    def _stage(self, episodes: Sequence[Episode], vocab_sizes: Dict[Stream, int], name: str,
               stream: Optional[Stream], grid: SearchGrid, make_hp, streams: Sequence[Stream], full: bool,
               cfg: FitConfig, convention: CountConvention) -> StageReport:
        scalars = cfg.scalars if full else []
        stage_cfg = cfg.model_copy(update={"streams": list(streams), "scalars": list(scalars)})
        values: List[float] = []
        for n in tqdm(grid.values, desc=name, disable=not cfg.show_progress):
            hp = make_hp(n)
            _, report = training_service.fit(episodes, hp, stage_cfg, vocab_sizes=vocab_sizes)
            self.fits_performed += 1
            d = param_count(hp, vocab_sizes, convention, streams, scalars)
            values.append(bic_value(d, len(episodes), report.final_log_lik))
            logger.debug(f"{name}: size {n} -> d={d}, BIC {values[-1]:.4f}")
        chosen = argmin_bic(grid.values, values)
        logger.info(f"{name}: chose {chosen} from {grid.values}")
        return StageReport(stage=name, stream=stream, candidates=list(grid.values), bic=values, chosen=chosen)

    def select_hmm_states(self, episodes: Sequence[Episode], vocab_sizes: Dict[Stream, int], stream: Stream,
                          grid: SearchGrid, cfg: Optional[FitConfig] = None,
                          convention: CountConvention = CountConvention.SHARED) -> StageReport:
        """Size the HMM state layer of one stream with a single-mixture-state model."""
        if not episodes:
            raise EmptyDataset("HMM state selection needs episodes")
        if stream not in HMM_STREAMS:
            raise ValueError(f"'{stream.value}' is not an HMM stream")
        return self._stage(episodes, vocab_sizes, "hmm_states", stream, grid,
                           lambda n: Hyperparams(n_top=1).with_hmm(stream, n), [stream], False,
                           cfg or FitConfig(), convention)

    def select_mixture_states(self, episodes: Sequence[Episode], vocab_sizes: Dict[Stream, int],
                              stream: Stream, grid: SearchGrid, n_hmm: Optional[int] = None,
                              cfg: Optional[FitConfig] = None,
                              convention: CountConvention = CountConvention.SHARED) -> StageReport:
        """Size a stream's mixture; either diagnoses stream sizes the shared pool on both streams jointly."""
        if not episodes:
            raise EmptyDataset("mixture state selection needs episodes")
        base = Hyperparams(n_top=1)
        if stream in HMM_STREAMS:
            base = base.with_hmm(stream, n_hmm or 1)
        streams = list(COLLECTION_STREAMS) if stream in COLLECTION_STREAMS else [stream]
        name = "diagnoses_states" if stream in COLLECTION_STREAMS else "mixture_states"
        return self._stage(episodes, vocab_sizes, name, stream, grid,
                           lambda n: base.with_states(stream, n), streams, False,
                           cfg or FitConfig(), convention)

    def select_top_states(self, episodes: Sequence[Episode], vocab_sizes: Dict[Stream, int], base: Hyperparams,
                          grid: SearchGrid, cfg: Optional[FitConfig] = None,
                          convention: CountConvention = CountConvention.SHARED) -> StageReport:
        cfg = cfg or FitConfig()
        return self._stage(episodes, vocab_sizes, "top_states", None, grid,
                           lambda n: base.model_copy(update={"n_top": n}), cfg.streams, True, cfg, convention)

    def staged_select(self, episodes: Sequence[Episode], vocab_sizes: Dict[Stream, int],
                      grids: Optional[Dict[str, SearchGrid]] = None, n_top: Optional[int] = None,
                      cfg: Optional[FitConfig] = None, convention: CountConvention = CountConvention.SHARED,
                      final_fit: bool = True, vocabulary: Optional[VocabularySet] = None) -> SelectionOutcome:
        """Run every stage, then retrain the full model with only the chosen sizes carried over.

        ``grids`` is keyed by :class:`Hyperparams` field name (``hmm_labs``, ``n_labs``,
        ``n_beds``, ``n_dx``, ``n_top`` ...); missing stream keys fall back to the
        stepped default grid. The top layer is searched only when ``n_top`` has a
        grid, otherwise it is fixed at ``n_top`` (default ``TOP_STATES``).
        """
        if not episodes:
            raise EmptyDataset("model selection needs episodes")
        cfg = cfg or FitConfig()
        grids = dict(grids or {})
        vocab_sizes = {Stream(k): v for k, v in vocab_sizes.items()}
        self.fits_performed = 0

        def grid_for(key: str) -> SearchGrid:
            return grids.get(key) or SearchGrid.stepped()

        stages: List[StageReport] = []
        chosen: Dict[str, int] = {}
        for stream in HMM_STREAMS:
            hmm_stage = self.select_hmm_states(episodes, vocab_sizes, stream, grid_for(f"hmm_{stream.value}"),
                                               cfg, convention)
            mix_stage = self.select_mixture_states(episodes, vocab_sizes, stream, grid_for(f"n_{stream.value}"),
                                                   hmm_stage.chosen, cfg, convention)
            stages += [hmm_stage, mix_stage]
            chosen[f"hmm_{stream.value}"] = hmm_stage.chosen
            chosen[f"n_{stream.value}"] = mix_stage.chosen
        beds_stage = self.select_mixture_states(episodes, vocab_sizes, Stream.BEDS, grid_for("n_beds"),
                                                cfg=cfg, convention=convention)
        dx_stage = self.select_mixture_states(episodes, vocab_sizes, Stream.ADMISSION_DX, grid_for("n_dx"),
                                              cfg=cfg, convention=convention)
        stages += [beds_stage, dx_stage]
        chosen["n_beds"] = beds_stage.chosen
        chosen["n_dx"] = dx_stage.chosen

        base = Hyperparams(n_top=1, **chosen)
        if "n_top" in grids:
            top_stage = self.select_top_states(episodes, vocab_sizes, base, grids["n_top"], cfg, convention)
            stages.append(top_stage)
            hp = base.model_copy(update={"n_top": top_stage.chosen})
        else:
            hp = base.model_copy(update={"n_top": n_top or settings.TOP_STATES})
        logger.info(f"Selected hyperparameters: {hp.model_dump()}")

        model, fit_report = None, None
        if final_fit:
            model, fit_report = training_service.fit(episodes, hp, cfg, vocabulary=vocabulary, vocab_sizes=vocab_sizes)
            self.fits_performed += 1
        report = SelectionReport(stages=stages, hyperparams=hp, fits_performed=self.fits_performed)
        return SelectionOutcome(hp, report, model, fit_report)


selection_service = SelectionService()
