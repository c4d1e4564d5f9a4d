"""Model and selection documents.

Floats go through ``json`` which writes ``repr`` (the shortest string that
reads back to the same double), so a saved model reloads bit for bit.
"""
import json
import logging
from pathlib import Path
from typing import Optional, Union

from pydantic import ValidationError

from episodemix.core.config import settings
from episodemix.core.exceptions import IoError, ParseError, SchemaViolation
from episodemix.models.models import ALL_STREAMS, HMM_STREAMS, FitReport, SelectionReport, VocabularySet
from episodemix.models.records import (
    MODEL_FORMAT,
    SELECTION_FORMAT,
    ModelDocument,
    SelectionDocument,
)
from episodemix.services.episode_model import EpisodeModel
from episodemix.services.submodels import (
    CollectionMixture,
    HmmEmission,
    HmmSequenceMixture,
    MarkovSequenceMixture,
)
from episodemix.utils.distributions import BernoulliDist, QuantizedGaussianDist

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def model_to_document(model: EpisodeModel, fit: Optional[FitReport] = None) -> ModelDocument:
    lo, hi = model.age_support
    return ModelDocument(
        version=settings.MODEL_SCHEMA_VERSION,
        hyperparams=model.hyperparams,
        vocabulary=dict(model.vocabulary.streams) if model.vocabulary is not None else None,
        vocab_sizes=model.vocab_sizes,
        age_support=[lo, hi],
        top_weights=model.top.probs.tolist(),
        age=[{"mean": d.mean, "variance": d.variance} for d in model.age],
        sex=[d.p for d in model.sex],
        death=[d.p for d in model.death],
        mixing={x: model.mixing[x].tolist() for x in ALL_STREAMS},
        diagnoses={"rates": model.diagnoses.rates.tolist(), "probs": model.diagnoses.probs.tolist()},
        beds={"rates": model.beds.rates.tolist(), "initial": model.beds.initial.tolist(),
              "transition": model.beds.transition.tolist()},
        hmm={x: {"rates": model.hmm[x].rates.tolist(), "initial": model.hmm[x].initial.tolist(),
                 "transition": model.hmm[x].transition.tolist(),
                 "emission": {"rates": model.hmm[x].emission.rates.tolist(),
                              "probs": model.hmm[x].emission.probs.tolist()}}
             for x in HMM_STREAMS},
        fit=fit,
    )


def model_from_document(doc: ModelDocument) -> EpisodeModel:
    if doc.format != MODEL_FORMAT:
        raise SchemaViolation(f"expected a '{MODEL_FORMAT}' document, got '{doc.format}'")
    if doc.version > settings.MODEL_SCHEMA_VERSION:
        raise SchemaViolation(f"model schema version {doc.version} is newer than supported "
                              f"{settings.MODEL_SCHEMA_VERSION}")
    lo, hi = doc.age_support
    try:
        vocabulary = VocabularySet(streams=doc.vocabulary) if doc.vocabulary is not None else None
        hmm = {x: HmmSequenceMixture(doc.hmm[x].rates, doc.hmm[x].initial, doc.hmm[x].transition,
                                     HmmEmission(doc.hmm[x].emission.rates, doc.hmm[x].emission.probs))
               for x in HMM_STREAMS}
        model = EpisodeModel(
            top=doc.top_weights,
            age=[QuantizedGaussianDist(a.mean, a.variance, lo, hi) for a in doc.age],
            sex=[BernoulliDist(p) for p in doc.sex],
            death=[BernoulliDist(p) for p in doc.death],
            mixing=doc.mixing,
            diagnoses=CollectionMixture(doc.diagnoses.rates, doc.diagnoses.probs),
            beds=MarkovSequenceMixture(doc.beds.rates, doc.beds.initial, doc.beds.transition),
            hmm=hmm,
            vocabulary=vocabulary,
        )
    except (KeyError, ValueError, ValidationError) as e:
        raise SchemaViolation(f"inconsistent model document: {e}")
    if model.hyperparams != doc.hyperparams:
        raise SchemaViolation("model tables do not match the recorded hyperparameters")
    return model


def _write_text(path: PathLike, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as e:
        logger.error(f"Error writing {path}: {str(e)}")
        raise IoError(f"cannot write '{path}': {e.strerror or e}")


def _read_json(path: PathLike) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot read '{path}': {e.strerror or e}")
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.lineno, e.colno, e.msg)


def dump_document(doc) -> str:
    return json.dumps(doc.model_dump(mode="json"), indent=1) + "\n"


def save_model(model: EpisodeModel, path: PathLike, fit: Optional[FitReport] = None) -> None:
    _write_text(path, dump_document(model_to_document(model, fit)))
    logger.info(f"Model written to {path}")


def load_model(path: PathLike) -> EpisodeModel:
    raw = _read_json(path)
    try:
        doc = ModelDocument.model_validate(raw)
    except ValidationError as e:
        raise SchemaViolation(f"'{path}' is not a valid model document: {e.errors()[0]['msg']}")
    return model_from_document(doc)


def save_selection(report: SelectionReport, path: PathLike) -> None:
    _write_text(path, dump_document(SelectionDocument(report=report)))
    logger.info(f"Selection report written to {path}")


def load_selection(path: PathLike) -> SelectionReport:
    raw = _read_json(path)
    try:
        doc = SelectionDocument.model_validate(raw)
    except ValidationError as e:
        raise SchemaViolation(f"'{path}' is not a valid selection document: {e.errors()[0]['msg']}")
    if doc.format != SELECTION_FORMAT:
        raise SchemaViolation(f"expected a '{SELECTION_FORMAT}' document, got '{doc.format}'")
    return doc.report
