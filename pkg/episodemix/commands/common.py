"""Shared plumbing for the command modules: run state, error mapping, option parsing."""
import json
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional

import typer

from episodemix.core.config import settings
from episodemix.core.exceptions import EXIT_FAILURE, EpisodeMixError, IoError, SchemaViolation
from episodemix.models.models import ALL_SCALARS, FitConfig, Hyperparams, Scalar, SearchGrid, VocabularySet
from episodemix.utils.corpus import load_corpus, load_vocab

logger = logging.getLogger(__name__)


class RunState:
    """Options set once by the root callback and read by every command."""

    def __init__(self):
        self.threads = settings.THREADS
        self.quiet = False

    @property
    def show_progress(self) -> bool:
        return not self.quiet and logging.getLogger().getEffectiveLevel() <= logging.INFO


state = RunState()


@contextmanager
def handle_errors():
    """Turn library errors into a stderr message and the matching exit code."""
    try:
        yield
    except EpisodeMixError as e:
        logger.debug("Command failed", exc_info=True)
        typer.echo(f"error: {e.detail}", err=True)
        raise typer.Exit(code=e.status_code)
    except ValueError as e:
        typer.echo(f"error: {e}", err=True)
        raise typer.Exit(code=EXIT_FAILURE)


def require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise IoError(f"{what} file '{path}' does not exist")
    return path


def load_inputs(corpus: Path, vocab: Path, skip_invalid: bool = False, model=None):
    vocabulary = load_vocab(require_file(vocab, "vocabulary"))
    if model is not None:
        require_model_vocabulary(model, vocabulary)
    loaded = load_corpus(require_file(corpus, "corpus"), vocabulary, strict=not skip_invalid, threads=state.threads)
    for err in loaded.errors:
        typer.echo(f"skipped line {err.line}: {err.message}", err=True)
    return vocabulary, loaded.episodes


def require_model_vocabulary(model, vocabulary: VocabularySet) -> None:
    """Item ids read through ``vocabulary`` must mean what they meant when ``model`` was trained."""
    if model.vocabulary is not None:
        if vocabulary.streams != model.vocabulary.streams:
            raise SchemaViolation("the vocabulary differs from the one the model was trained with")
    elif vocabulary.sizes() != model.vocab_sizes:
        raise SchemaViolation("the vocabulary sizes differ from the model's")


def fit_config(seed: int, max_iters: int, rel_tol: float, restarts: int,
               hold_out: Optional[List[Scalar]] = None) -> FitConfig:
    held = set(hold_out or [])
    return FitConfig(seed=seed, max_iters=max_iters, rel_tol=rel_tol, restarts=restarts, threads=state.threads,
                     scalars=[s for s in ALL_SCALARS if s not in held], show_progress=state.show_progress)


def hyperparams(n_top: int, n_dx: int, n_beds: int, n_labs: int, n_neuro: int, n_meds: int,
                hmm_labs: int, hmm_neuro: int, hmm_meds: int) -> Hyperparams:
    return Hyperparams(n_top=n_top, n_dx=n_dx, n_beds=n_beds, n_labs=n_labs, n_neuro=n_neuro, n_meds=n_meds,
                       hmm_labs=hmm_labs, hmm_neuro=hmm_neuro, hmm_meds=hmm_meds)


def parse_grids(specs: Optional[List[str]]) -> Dict[str, SearchGrid]:
    """``name=v1,v2,...`` pairs keyed by hyperparameter field name."""
    grids = {}
    for spec in specs or []:
        name, sep, values = spec.partition("=")
        name = name.strip()
        if not sep or name not in Hyperparams.model_fields:
            raise ValueError(f"bad grid '{spec}', expected <hyperparameter>=<v1,v2,...>")
        try:
            grids[name] = SearchGrid(values=[int(v) for v in values.split(",") if v.strip()])
        except Exception as e:
            raise ValueError(f"bad grid '{spec}': {e}")
    return grids


def write_json(obj, path: Path) -> None:
    try:
        path.write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot write '{path}': {e.strerror or e}")
