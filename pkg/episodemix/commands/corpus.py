import logging
from pathlib import Path
from typing import Optional

import typer

from episodemix.commands.common import handle_errors, load_inputs, require_file, state
from episodemix.services.generation_service import generation_service
from episodemix.services.training_service import total_log_lik, training_service
from episodemix.utils.corpus import (
    build_vocab as build_vocabulary,
    load_corpus,
    save_vocab,
    summarize as summarize_corpus,
    summary_rows,
    write_tsv,
)
from episodemix.utils.serialization import load_model

# Set up logging
logger = logging.getLogger(__name__)


def build_vocab(
    corpus: Path = typer.Option(..., "--corpus"),
    out: Path = typer.Option(..., "--out", help="Where to write the vocabulary"),
):
    """Collect the sorted token list of every stream from a corpus."""
    with handle_errors():
        vocabulary = build_vocabulary(require_file(corpus, "corpus"))
        save_vocab(vocabulary, out)
    typer.echo(", ".join(f"{x.value}: {n}" for x, n in vocabulary.sizes().items()))


def sample(
    model: Path = typer.Option(..., "--model"),
    n: int = typer.Option(..., "--n", min=1, help="Episodes to draw"),
    seed: int = typer.Option(0, min=0),
    out: Path = typer.Option(..., "--out", help="Corpus to write"),
    sidecar: Optional[Path] = typer.Option(None, help="Latent-trace sidecar (default <out>.latent.jsonl)"),
):
    """Draw a synthetic corpus from a trained model."""
    with handle_errors():
        trained = load_model(require_file(model, "model"))
        generation_service.generate_corpus(trained, n, seed, out, sidecar, threads=state.threads)
    typer.echo(f"wrote {n} episodes to {out}")


def score(
    model: Path = typer.Option(..., "--model"),
    corpus: Path = typer.Option(..., "--corpus"),
    vocab: Optional[Path] = typer.Option(None, "--vocab", help="Defaults to the model's own vocabulary"),
    out: Path = typer.Option(..., "--out", help="Per-episode table (TSV)"),
    with_states: bool = typer.Option(False, help="Add the most responsible top state"),
    skip_invalid: bool = typer.Option(False),
):
    """Per-episode and total log-likelihood of a corpus."""
    with handle_errors():
        trained = load_model(require_file(model, "model"))
        if vocab is not None:
            vocabulary, episodes = load_inputs(corpus, vocab, skip_invalid, model=trained)
        else:
            if trained.vocabulary is None:
                raise ValueError("the model has no vocabulary; pass --vocab")
            episodes = load_corpus(require_file(corpus, "corpus"), trained.vocabulary, strict=not skip_invalid,
                                   threads=state.threads).episodes
        scores = training_service.score(trained, episodes, with_states, threads=state.threads)
        header = ["episode", "log_lik"] + (["top_state", "responsibility"] if with_states else [])
        rows = [header]
        for i, s in enumerate(scores):
            row = [str(i), repr(s.log_lik)]
            if with_states:
                row += [str(s.top_state), repr(s.responsibility)]
            rows.append(row)
        total = total_log_lik(scores)
        rows.append(["total", repr(total)])
        write_tsv(rows, out)
    typer.echo(f"total log-likelihood {total!r} over {len(scores)} episodes")


def summarize(
    corpus: Path = typer.Option(..., "--corpus"),
    vocab: Path = typer.Option(..., "--vocab"),
    out: Path = typer.Option(..., "--out", help="Summary table (TSV)"),
):
    """Length statistics per stream."""
    with handle_errors():
        _, episodes = load_inputs(corpus, vocab)
        summary = summarize_corpus(episodes)
        write_tsv(summary_rows(summary), out)
    typer.echo(f"summarised {summary.n_episodes} episodes")
