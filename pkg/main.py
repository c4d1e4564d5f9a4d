import logging

import typer

from episodemix.commands import analyze, corpus, train
from episodemix.commands.common import state
from episodemix.core.config import settings

app = typer.Typer(
    name="episodemix",
    help="Layered mixture model of hospitalization episodes: fit, select, sample, score and analyze",
    no_args_is_help=True,
    add_completion=False,
)


@app.callback()
def main(
    threads: int = typer.Option(settings.THREADS, min=1, help="Worker threads for E-steps and corpus parsing"),
    quiet: bool = typer.Option(False, "--quiet", "-q", help="No progress bars or info logging"),
    log_level: str = typer.Option(settings.LOG_LEVEL, help="Logging level"),
):
    logging.basicConfig(
        level=logging.WARNING if quiet else log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    state.threads = threads
    state.quiet = quiet


# Register commands
app.command("build-vocab")(corpus.build_vocab)
app.command("train")(train.train)
app.command("select")(train.select)
app.command("sample")(corpus.sample)
app.command("score")(corpus.score)
app.command("summarize")(corpus.summarize)
app.add_typer(analyze.router, name="analyze")


if __name__ == "__main__":
    app()
