"""Corpus, vocabulary and sidecar files.

A corpus is JSON Lines: an optional header line
``{"format": "episodemix-corpus", "version": 1}`` followed by one episode per
line with the keys age, sex, death, beds, admission_dx, discharge_dx, labs,
neuro and meds (in that order when written). Tokens are strings resolved
against an explicit vocabulary file.
"""
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from episodemix.core.config import settings
from episodemix.core.exceptions import (
    EmptyDataset,
    EpisodeMixError,
    IoError,
    ParseError,
    SchemaViolation,
    UnknownToken,
)
from episodemix.models.models import (
    ALL_STREAMS,
    HMM_STREAMS,
    CorpusSummary,
    Episode,
    LatentTrace,
    LengthStats,
    Stream,
    StreamSummary,
    VocabularySet,
)
from episodemix.models.records import (
    CORPUS_FORMAT,
    SIDECAR_FORMAT,
    VOCABULARY_FORMAT,
    CorpusRecord,
    DocumentHeader,
    SidecarRecord,
    VocabularyDocument,
)
from episodemix.utils.parallel import map_chunks

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
SCALAR_KEYS = ("age", "sex", "death")


class LineError(NamedTuple):
    line: int
    message: str


class CorpusLoad(NamedTuple):
    episodes: List[Episode]
    errors: List[LineError]


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def _read_lines(path: PathLike) -> List[str]:
    try:
        with open(path, encoding="utf-8") as f:
            return f.read().splitlines()
    except OSError as e:
        raise IoError(f"cannot read '{path}': {e.strerror or e}")


def _write_lines(path: PathLike, lines: Iterable[str]) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for line in lines:
                f.write(line)
                f.write("\n")
    except OSError as e:
        logger.error(f"Error writing {path}: {str(e)}")
        raise IoError(f"cannot write '{path}': {e.strerror or e}")


def _is_header(raw) -> bool:
    return isinstance(raw, dict) and "format" in raw


def _check_header(raw: dict, expected: str, max_version: int, path: PathLike) -> None:
    try:
        header = DocumentHeader.model_validate(raw)
    except ValidationError as e:
        raise SchemaViolation(f"'{path}': bad header: {e.errors()[0]['msg']}")
    if header.format != expected:
        raise SchemaViolation(f"'{path}': expected '{expected}', found '{header.format}'")
    if header.version > max_version:
        raise SchemaViolation(f"'{path}': version {header.version} is newer than supported {max_version}")


# Vocabularies ----------------------------------------------------------------

def load_vocab(path: PathLike) -> VocabularySet:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise IoError(f"cannot read vocabulary '{path}': {e.strerror or e}")
    except json.JSONDecodeError as e:
        raise ParseError(e.lineno, e.colno, e.msg)
    try:
        doc = VocabularyDocument.model_validate(raw)
        if doc.format != VOCABULARY_FORMAT:
            raise SchemaViolation(f"'{path}': expected '{VOCABULARY_FORMAT}', found '{doc.format}'")
        return VocabularySet(streams=doc.streams)
    except ValidationError as e:
        raise SchemaViolation(f"'{path}' is not a valid vocabulary: {e.errors()[0]['msg']}")


def save_vocab(vocab: VocabularySet, path: PathLike) -> None:
    doc = VocabularyDocument(streams={x: vocab.streams[x] for x in ALL_STREAMS})
    _write_lines(path, [json.dumps(doc.model_dump(mode="json"), ensure_ascii=False, indent=1)])
    logger.info(f"Vocabulary written to {path}")


def build_vocab(path: PathLike) -> VocabularySet:
    """Sorted unique tokens per stream; both diagnosis streams get the union of their tokens."""
    tokens: Dict[Stream, set] = {x: set() for x in ALL_STREAMS}
    for line_no, raw in _iter_json(path):
        if _is_header(raw):
            continue
        record = _validate_record(raw, line_no)
        for x in ALL_STREAMS:
            value = getattr(record, x.value)
            if x in HMM_STREAMS:
                tokens[x].update(t for tp in value for t in tp)
            else:
                tokens[x].update(value)
    diagnoses = tokens[Stream.ADMISSION_DX] | tokens[Stream.DISCHARGE_DX]
    tokens[Stream.ADMISSION_DX] = tokens[Stream.DISCHARGE_DX] = diagnoses
    empty = [x.value for x in ALL_STREAMS if not tokens[x]]
    if empty:
        raise SchemaViolation(f"'{path}' has no tokens for streams {empty}")
    return VocabularySet(streams={x: sorted(tokens[x]) for x in ALL_STREAMS})


# Corpus ----------------------------------------------------------------------

def _iter_json(path: PathLike):
    for line_no, text in enumerate(_read_lines(path), start=1):
        if not text.strip():
            continue
        try:
            yield line_no, json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(line_no, e.colno, e.msg)


def _validate_record(raw, line_no: int) -> CorpusRecord:
    if not isinstance(raw, dict):
        raise SchemaViolation(f"line {line_no}: record must be an object")
    try:
        return CorpusRecord.model_validate(raw)
    except ValidationError as e:
        err = e.errors()[0]
        where = ".".join(str(p) for p in err["loc"])
        raise SchemaViolation(f"line {line_no}: {where}: {err['msg']}")


def record_to_episode(record: CorpusRecord, vocab: VocabularySet, line_no: Optional[int] = None) -> Episode:
    def ids(stream: Stream, tokens: Sequence[str]) -> List[int]:
        out = []
        for token in tokens:
            item = vocab.lookup(stream, token)
            if item is None:
                raise UnknownToken(stream.value, token, line_no)
            out.append(item)
        return out

    fields = {k: getattr(record, k) for k in SCALAR_KEYS}
    for x in ALL_STREAMS:
        value = getattr(record, x.value)
        fields[x.value] = [ids(x, tp) for tp in value] if x in HMM_STREAMS else ids(x, value)
    return Episode(**fields)


def episode_to_record(episode: Episode, vocab: VocabularySet) -> dict:
    record = {k: getattr(episode, k) for k in SCALAR_KEYS}
    for x in ALL_STREAMS:
        value = episode.stream(x)
        if x in HMM_STREAMS:
            record[x.value] = [[vocab.token(x, i) for i in tp] for tp in value]
        else:
            record[x.value] = [vocab.token(x, i) for i in value]
    return record


def parse_corpus_lines(lines: Sequence[Tuple[int, str]], vocab: VocabularySet,
                       strict: bool = True) -> CorpusLoad:
    """Parse ``(line number, text)`` pairs that carry episode records."""
    episodes, errors = [], []
    for line_no, text in lines:
        try:
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as e:
                raise ParseError(line_no, e.colno, e.msg)
            episodes.append(record_to_episode(_validate_record(raw, line_no), vocab, line_no))
        except EpisodeMixError as e:
            if strict:
                raise
            errors.append(LineError(line_no, e.detail))
    return CorpusLoad(episodes, errors)


def load_corpus(path: PathLike, vocab: VocabularySet, strict: bool = True, threads: int = 1) -> CorpusLoad:
    """Read and validate every record; in skip mode bad lines are reported instead of raised."""
    lines = [(n, text) for n, text in enumerate(_read_lines(path), start=1) if text.strip()]
    if lines:
        first = lines[0][1]
        try:
            raw = json.loads(first)
        except json.JSONDecodeError:
            raw = None
        if _is_header(raw):
            _check_header(raw, CORPUS_FORMAT, settings.CORPUS_SCHEMA_VERSION, path)
            lines = lines[1:]
    parts = map_chunks(lambda start, chunk: parse_corpus_lines(chunk, vocab, strict), lines,
                       settings.CHUNK_SIZE, threads)
    episodes = [e for part in parts for e in part.episodes]
    errors = [err for part in parts for err in part.errors]
    if errors:
        logger.warning(f"Skipped {len(errors)} invalid record(s) in {path}")
    logger.info(f"Loaded {len(episodes)} episodes from {path}")
    return CorpusLoad(episodes, errors)


def corpus_lines(episodes: Sequence[Episode], vocab: VocabularySet) -> List[str]:
    header = {"format": CORPUS_FORMAT, "version": settings.CORPUS_SCHEMA_VERSION}
    return [_dumps(header)] + [_dumps(episode_to_record(e, vocab)) for e in episodes]


def save_corpus(episodes: Sequence[Episode], vocab: VocabularySet, path: PathLike) -> None:
    _write_lines(path, corpus_lines(episodes, vocab))
    logger.info(f"Wrote {len(episodes)} episodes to {path}")


# Sidecar ---------------------------------------------------------------------

def save_sidecar(traces: Sequence[LatentTrace], path: PathLike) -> None:
    header = {"format": SIDECAR_FORMAT, "version": settings.CORPUS_SCHEMA_VERSION}
    _write_lines(path, [_dumps(header)] + [_dumps(t.model_dump(mode="json")) for t in traces])


def load_sidecar(path: PathLike) -> List[LatentTrace]:
    traces = []
    for line_no, raw in _iter_json(path):
        if _is_header(raw):
            _check_header(raw, SIDECAR_FORMAT, settings.CORPUS_SCHEMA_VERSION, path)
            continue
        try:
            record = SidecarRecord.model_validate(raw)
        except ValidationError as e:
            raise SchemaViolation(f"line {line_no}: {e.errors()[0]['msg']}")
        traces.append(LatentTrace(**record.model_dump()))
    return traces


# Summary ---------------------------------------------------------------------

def _length_stats(values: Sequence[float]) -> LengthStats:
    arr = np.asarray(values, dtype=float)
    return LengthStats(min=float(arr.min()), mean=float(arr.mean()), std=float(arr.std()), max=float(arr.max()))


def summarize(episodes: Sequence[Episode]) -> CorpusSummary:
    """Per-stream length statistics (population std) and pooled items per timepoint."""
    if not episodes:
        raise EmptyDataset("cannot summarise an empty corpus")
    streams = {}
    for x in ALL_STREAMS:
        lengths = [len(e.stream(x)) for e in episodes]
        per_timepoint = None
        if x in HMM_STREAMS:
            sizes = [len(tp) for e in episodes for tp in e.stream(x)]
            per_timepoint = _length_stats(sizes) if sizes else None
        streams[x] = StreamSummary(length=_length_stats(lengths), items_per_timepoint=per_timepoint)
    return CorpusSummary(n_episodes=len(episodes), streams=streams)


def summary_rows(summary: CorpusSummary) -> List[List[str]]:
    rows = [["stream", "measure", "min", "mean", "std", "max"]]
    for x, s in summary.streams.items():
        rows.append([x.value, "length"] + [repr(v) for v in (s.length.min, s.length.mean, s.length.std, s.length.max)])
        if s.items_per_timepoint is not None:
            t = s.items_per_timepoint
            rows.append([x.value, "items_per_timepoint"] + [repr(v) for v in (t.min, t.mean, t.std, t.max)])
    return rows


def write_tsv(rows: Sequence[Sequence], path: PathLike) -> None:
    _write_lines(path, ["\t".join(str(v) for v in row) for row in rows])
