"""Schemas of the documents written to and read from disk."""
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from episodemix.core.config import settings
from episodemix.models.models import Hyperparams, SelectionReport, FitReport, Stream

CORPUS_FORMAT = "episodemix-corpus"
SIDECAR_FORMAT = "episodemix-sidecar"
VOCABULARY_FORMAT = "episodemix-vocabulary"
MODEL_FORMAT = "episodemix-model"
SELECTION_FORMAT = "episodemix-selection"


class DocumentHeader(BaseModel):
    format: str
    version: int = Field(ge=1)


class CorpusRecord(BaseModel):
    """One corpus line; tokens are vocabulary strings."""
    model_config = ConfigDict(extra='forbid')

    age: Optional[int] = None
    sex: Optional[int] = None
    death: Optional[int] = None
    beds: List[str] = Field(default_factory=list)
    admission_dx: List[str] = Field(default_factory=list)
    discharge_dx: List[str] = Field(default_factory=list)
    labs: List[List[str]] = Field(default_factory=list)
    neuro: List[List[str]] = Field(default_factory=list)
    meds: List[List[str]] = Field(default_factory=list)

    @field_validator('age')
    @classmethod
    def validate_age(cls, v):
        if v is not None and not settings.AGE_SUPPORT_MIN <= v <= settings.AGE_SUPPORT_MAX:
            raise ValueError(f'must lie in [{settings.AGE_SUPPORT_MIN}, {settings.AGE_SUPPORT_MAX}]')
        return v

    @field_validator('sex', 'death')
    @classmethod
    def validate_flag(cls, v):
        if v is not None and v not in (0, 1):
            raise ValueError('must be 0, 1 or null')
        return v


class SidecarRecord(BaseModel):
    top: int
    sub_states: Dict[Stream, int]
    hmm_paths: Dict[Stream, List[int]] = Field(default_factory=dict)


class VocabularyDocument(DocumentHeader):
    format: str = VOCABULARY_FORMAT
    version: int = 1
    streams: Dict[Stream, List[str]]


class AgeParams(BaseModel):
    mean: float
    variance: float = Field(gt=0)


class CollectionParams(BaseModel):
    rates: List[float]
    probs: List[List[float]]


class MarkovParams(BaseModel):
    rates: List[float]
    initial: List[List[float]]
    transition: List[List[List[float]]]


class EmissionParams(BaseModel):
    rates: List[float]
    probs: List[List[float]]


class HmmParams(MarkovParams):
    emission: EmissionParams


class ModelDocument(DocumentHeader):
    """Every parameter table of a trained model, in linear space."""
    format: str = MODEL_FORMAT
    version: int = 1
    hyperparams: Hyperparams
    vocabulary: Optional[Dict[Stream, List[str]]] = None
    vocab_sizes: Dict[Stream, int]
    age_support: List[int] = Field(min_length=2, max_length=2)
    top_weights: List[float]
    age: List[AgeParams]
    sex: List[float]
    death: List[float]
    mixing: Dict[Stream, List[List[float]]]
    diagnoses: CollectionParams
    beds: MarkovParams
    hmm: Dict[Stream, HmmParams]
    fit: Optional[FitReport] = None


class SelectionDocument(DocumentHeader):
    format: str = SELECTION_FORMAT
    version: int = 1
    report: SelectionReport
