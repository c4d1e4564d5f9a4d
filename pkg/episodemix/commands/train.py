import logging
from pathlib import Path
from typing import List, Optional

import typer

from episodemix.core.config import settings
from episodemix.core.exceptions import EXIT_NOT_CONVERGED
from episodemix.models.models import CountConvention, Scalar
from episodemix.commands.common import (
    fit_config,
    handle_errors,
    hyperparams,
    load_inputs,
    parse_grids,
    write_json,
)
from episodemix.services.selection_service import selection_service
from episodemix.services.training_service import training_service
from episodemix.utils.reports import selection_rows
from episodemix.utils.corpus import write_tsv
from episodemix.utils.serialization import save_model, save_selection

# Set up logging
logger = logging.getLogger(__name__)

CORPUS = typer.Option(..., "--corpus", help="Episode corpus (JSON Lines)")
VOCAB = typer.Option(..., "--vocab", help="Vocabulary file")


def train(
    corpus: Path = CORPUS,
    vocab: Path = VOCAB,
    out: Path = typer.Option(..., "--out", help="Where to write the model"),
    report: Optional[Path] = typer.Option(None, "--report", help="Where to write the fit report (JSON)"),
    n_top: int = typer.Option(1, min=1, help="Top-layer states"),
    n_dx: int = typer.Option(1, min=1, help="Shared diagnoses states"),
    n_beds: int = typer.Option(1, min=1),
    n_labs: int = typer.Option(1, min=1),
    n_neuro: int = typer.Option(1, min=1),
    n_meds: int = typer.Option(1, min=1),
    hmm_labs: int = typer.Option(1, min=1, help="HMM states of the labs stream"),
    hmm_neuro: int = typer.Option(1, min=1),
    hmm_meds: int = typer.Option(1, min=1),
    seed: int = typer.Option(0, min=0),
    max_iters: int = typer.Option(settings.MAX_ITERS, min=1),
    rel_tol: float = typer.Option(settings.REL_TOL, min=0.0),
    restarts: int = typer.Option(settings.RESTARTS, min=1),
    hold_out: Optional[List[Scalar]] = typer.Option(None, "--hold-out", help="Scalar kept out of the training likelihood"),
    skip_invalid: bool = typer.Option(False, help="Skip invalid records instead of failing"),
):
    """Fit a model with fixed hyperparameters."""
    with handle_errors():
        vocabulary, episodes = load_inputs(corpus, vocab, skip_invalid)
        hp = hyperparams(n_top, n_dx, n_beds, n_labs, n_neuro, n_meds, hmm_labs, hmm_neuro, hmm_meds)
        cfg = fit_config(seed, max_iters, rel_tol, restarts, hold_out)
        model, fit_report = training_service.fit(episodes, hp, cfg, vocabulary=vocabulary)
        save_model(model, out, fit_report)
        if report is not None:
            write_json(fit_report.model_dump(mode="json"), report)
    typer.echo(f"log-likelihood {fit_report.final_log_lik!r} after {fit_report.iterations} iterations")
    if not fit_report.converged:
        raise typer.Exit(code=EXIT_NOT_CONVERGED)


def select(
    corpus: Path = CORPUS,
    vocab: Path = VOCAB,
    out: Path = typer.Option(..., "--out", help="Where to write the final model"),
    report: Path = typer.Option(..., "--report", help="Where to write the selection report (JSON)"),
    table: Optional[Path] = typer.Option(None, "--table", help="Selection curves as TSV"),
    grid: Optional[List[str]] = typer.Option(None, "--grid", help="Candidate sizes, e.g. hmm_labs=1,2,3 (repeatable)"),
    n_top: Optional[int] = typer.Option(None, min=1, help=f"Fixed top-layer size (default {settings.TOP_STATES})"),
    convention: CountConvention = typer.Option(CountConvention.SHARED, help="Parameter counting for BIC"),
    seed: int = typer.Option(0, min=0),
    max_iters: int = typer.Option(settings.MAX_ITERS, min=1),
    rel_tol: float = typer.Option(settings.REL_TOL, min=0.0),
    restarts: int = typer.Option(settings.RESTARTS, min=1),
    hold_out: Optional[List[Scalar]] = typer.Option(None, "--hold-out"),
    skip_invalid: bool = typer.Option(False),
):
    """Staged BIC search, then a fresh fit with the chosen sizes."""
    with handle_errors():
        grids = parse_grids(grid)
        vocabulary, episodes = load_inputs(corpus, vocab, skip_invalid)
        cfg = fit_config(seed, max_iters, rel_tol, restarts, hold_out)
        outcome = selection_service.staged_select(episodes, vocabulary.sizes(), grids, n_top, cfg, convention,
                                                  vocabulary=vocabulary)
        save_selection(outcome.report, report)
        if table is not None:
            write_tsv(selection_rows(outcome.report), table)
        save_model(outcome.model, out, outcome.fit_report)
    typer.echo(f"selected {outcome.hyperparams.model_dump()} with {outcome.report.fits_performed} fits")
    if not outcome.fit_report.converged:
        raise typer.Exit(code=EXIT_NOT_CONVERGED)
