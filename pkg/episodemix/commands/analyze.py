"""Analysis commands over a trained model. Every table is written as TSV."""
import json
import logging
from pathlib import Path
from typing import List, Optional

import typer

from episodemix.commands.common import handle_errors, load_inputs, require_file, state
from episodemix.core.config import settings
from episodemix.core.exceptions import EmptyDataset, IoError, ParseError, SchemaViolation, UnknownToken
from episodemix.models.models import HMM_STREAMS, Scalar, Stream
from episodemix.services.analysis_service import analysis_service
from episodemix.services.episode_model import EpisodeModel
from episodemix.utils.corpus import write_tsv
from episodemix.utils.reports import (
    component_rows,
    enrichment_rows,
    length_rows,
    ratio_rows,
    state_distribution_rows,
    top_items_rows,
    trajectory_rows,
    tree_to_dot,
)
from episodemix.utils.serialization import load_model

# Set up logging
logger = logging.getLogger(__name__)

router = typer.Typer(help="Interrogate a trained model", no_args_is_help=True)

MODEL = typer.Option(..., "--model", help="Trained model file")
OUT = typer.Option(..., "--out", help="Output table (TSV)")


def _load(model: Path) -> EpisodeModel:
    return load_model(require_file(model, "model"))


def _sub_streams(stream: Optional[Stream]) -> List[Stream]:
    return [stream] if stream is not None else [x for x in Stream]


@router.command("enrichment")
def enrichment(
    model: Path = MODEL,
    out: Path = OUT,
    stream: Optional[Stream] = typer.Option(None, help="Only this stream (default all)"),
    target: Scalar = typer.Option(Scalar.DEATH, help="Binary scalar to enrich for"),
):
    """P(target | sub-model state), sorted ascending."""
    with handle_errors():
        trained = _load(model)
        rows = []
        for x in _sub_streams(stream):
            table = enrichment_rows(analysis_service.target_enrichment(trained, x, target))
            rows += table if not rows else table[1:]
        write_tsv(rows, out)


@router.command("state-dist")
def state_dist(
    model: Path = MODEL,
    out: Path = OUT,
    stream: Stream = typer.Option(..., help="Sub-model whose state distribution to tabulate"),
):
    """P(sub-model state | top state) for one stream."""
    with handle_errors():
        trained = _load(model)
        write_tsv(state_distribution_rows(analysis_service.state_distribution(trained, stream)), out)


@router.command("components")
def components(model: Path = MODEL, out: Path = OUT):
    """Top-layer weights and scalar parameters."""
    with handle_errors():
        trained = _load(model)
        write_tsv(component_rows(analysis_service.component_report(trained)), out)


@router.command("lengths")
def lengths(
    model: Path = MODEL,
    out: Path = OUT,
    stream: Stream = typer.Option(...),
):
    """Length rate, prevalence and mortality per sub-model state."""
    with handle_errors():
        trained = _load(model)
        rates = analysis_service.hmm_count_rates(trained, stream) if stream in HMM_STREAMS else None
        write_tsv(length_rows(analysis_service.length_report(trained, stream), rates), out)


@router.command("bed-trees")
def bed_trees(
    model: Path = MODEL,
    out_dir: Path = typer.Option(..., "--out-dir", help="Directory for one DOT file per bed state"),
    threshold: float = typer.Option(settings.TREE_THRESHOLD, help="Smallest sequence probability to report"),
    max_depth: Optional[int] = typer.Option(None, min=1, help="Required when the threshold is not positive"),
):
    """Probable bed sequences of every bed state as Graphviz trees."""
    with handle_errors():
        trained = _load(model)
        if threshold <= 0 and max_depth is None:
            raise ValueError("a non-positive threshold needs --max-depth")
        trees = [analysis_service.sequence_tree(trained, k, threshold, max_depth)
                 for k in range(trained.beds.n_states)]
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            for tree in trees:
                (out_dir / f"beds_state_{tree.state}.dot").write_text(tree_to_dot(tree, trained.vocabulary),
                                                                      encoding="utf-8")
        except OSError as e:
            raise IoError(f"cannot write trees into '{out_dir}': {e.strerror or e}")
    typer.echo(f"wrote {len(trees)} trees to {out_dir}")


@router.command("trajectories")
def trajectories(
    model: Path = MODEL,
    out: Path = OUT,
    stream: Optional[Stream] = typer.Option(None, help="One HMM stream (default all)"),
    max_steps: int = typer.Option(settings.TRAJECTORY_MAX_STEPS, min=1),
    top_k: int = typer.Option(settings.TRAJECTORY_ITEMS, min=1),
    strict: bool = typer.Option(False, help="Fail when a trajectory is not absorbed"),
):
    """Greedy HMM state walks with their most probable items."""
    with handle_errors():
        trained = _load(model)
        streams = [stream] if stream is not None else list(HMM_STREAMS)
        found = [analysis_service.greedy_trajectory(trained, x, k, max_steps, top_k, strict)
                 for x in streams for k in range(trained.hmm[x].n_states)]
        write_tsv(trajectory_rows(found), out)


@router.command("top-items")
def top_items(
    model: Path = MODEL,
    out: Path = OUT,
    stream: Stream = typer.Option(...),
    k: int = typer.Option(settings.TOP_ITEMS, min=1),
):
    """Most probable items per state: HMM emissions, diagnoses states or first beds."""
    with handle_errors():
        trained = _load(model)
        if stream in HMM_STREAMS:
            n = trained.hmm[stream].n_hmm
        else:
            n = trained.submodel(stream).n_states
        write_tsv(top_items_rows([analysis_service.top_items(trained, stream, s, k) for s in range(n)]), out)


@router.command("ratios")
def ratios(
    model: Path = MODEL,
    out: Path = OUT,
    partition: Path = typer.Option(..., help='JSON {test: {"abnormal": [...], "normal": [...]}}'),
    stream: Stream = typer.Option(Stream.LABS),
):
    """Abnormal-to-normal mass ratio per HMM state and test."""
    with handle_errors():
        trained = _load(model)
        if stream not in HMM_STREAMS:
            raise ValueError(f"'{stream.value}' is not an HMM stream")
        if trained.vocabulary is None:
            raise SchemaViolation("the model carries no vocabulary to resolve test items with")
        tests = _read_partition(require_file(partition, "partition"), trained, stream)
        write_tsv(ratio_rows(stream, analysis_service.item_likelihood_ratios(trained, stream, tests)), out)


def _read_partition(path: Path, model: EpisodeModel, stream: Stream):
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise IoError(f"cannot read '{path}': {e.strerror or e}")
    except json.JSONDecodeError as e:
        raise ParseError(e.lineno, e.colno, e.msg)
    if not isinstance(raw, dict):
        raise SchemaViolation("the partition must map test names to item groups")
    tests = {}
    for test, groups in raw.items():
        if not isinstance(groups, dict) or set(groups) != {"abnormal", "normal"}:
            raise SchemaViolation(f"test '{test}' needs exactly 'abnormal' and 'normal' lists")
        resolved = []
        for name in ("abnormal", "normal"):
            ids = []
            for token in groups[name]:
                item = model.vocabulary.lookup(stream, str(token))
                if item is None:
                    raise UnknownToken(stream.value, token)
                ids.append(item)
            resolved.append(ids)
        tests[test] = tuple(resolved)
    return tests


@router.command("infer")
def infer(
    model: Path = MODEL,
    corpus: Path = typer.Option(..., "--corpus"),
    vocab: Path = typer.Option(..., "--vocab"),
    out: Path = OUT,
    target: Scalar = typer.Option(Scalar.DEATH, help="Scalar to infer; an observed value is ignored"),
    full_pmf: bool = typer.Option(False, help="Write the whole age distribution"),
):
    """Posterior of one scalar for every episode of a corpus."""
    with handle_errors():
        trained = _load(model)
        _, episodes = load_inputs(corpus, vocab, model=trained)
        if not episodes:
            raise EmptyDataset(f"no episodes in '{corpus}'")
        posteriors = [analysis_service.infer_scalar(trained, e, target) for e in episodes]
        if target is Scalar.AGE:
            lo = trained.age_support[0]
            header = ["episode", "age_mean"]
            if full_pmf:
                header += [f"p_age_{lo + i}" for i in range(len(posteriors[0].pmf))]
            rows = [header]
            for i, p in enumerate(posteriors):
                rows.append([str(i), repr(p.mean)] + ([repr(v) for v in p.pmf] if full_pmf else []))
        else:
            rows = [["episode", f"p_{target.value}"]]
            rows += [[str(i), repr(p.probability)] for i, p in enumerate(posteriors)]
        write_tsv(rows, out)
    logger.info(f"Inferred {target.value} for {len(episodes)} episodes with {state.threads} thread(s)")
