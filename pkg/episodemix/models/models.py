import math
from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, field_validator, model_validator

from episodemix.core.config import settings


class Stream(str, Enum):
    """The six token streams of an episode."""
    BEDS = "beds"
    ADMISSION_DX = "admission_dx"
    DISCHARGE_DX = "discharge_dx"
    LABS = "labs"
    NEURO = "neuro"
    MEDS = "meds"

    @property
    def kind(self) -> str:
        if self in COLLECTION_STREAMS:
            return "collection"
        if self is Stream.BEDS:
            return "markov"
        return "hmm"


COLLECTION_STREAMS = (Stream.ADMISSION_DX, Stream.DISCHARGE_DX)
HMM_STREAMS = (Stream.LABS, Stream.NEURO, Stream.MEDS)
ALL_STREAMS = tuple(Stream)


class Scalar(str, Enum):
    AGE = "age"
    SEX = "sex"
    DEATH = "death"


ALL_SCALARS = tuple(Scalar)


class CountConvention(str, Enum):
    """How parameters are counted for BIC."""
    SHARED = "shared"
    PER_STATE = "per-state"


class Episode(BaseModel):
    """One hospitalization record with every token already mapped to its vocabulary id."""
    model_config = ConfigDict(frozen=True)

    age: Optional[int] = None
    sex: Optional[int] = None
    death: Optional[int] = None
    beds: List[int] = Field(default_factory=list)
    admission_dx: List[int] = Field(default_factory=list)
    discharge_dx: List[int] = Field(default_factory=list)
    labs: List[List[int]] = Field(default_factory=list)
    neuro: List[List[int]] = Field(default_factory=list)
    meds: List[List[int]] = Field(default_factory=list)

    @field_validator('sex', 'death')
    @classmethod
    def validate_flag(cls, v):
        if v is not None and v not in (0, 1):
            raise ValueError('must be 0, 1 or null')
        return v

    def stream(self, stream: Stream):
        return getattr(self, stream.value)

    def scalar(self, scalar: Scalar) -> Optional[int]:
        return getattr(self, scalar.value)

    def without(self, *scalars: Scalar) -> "Episode":
        return self.model_copy(update={s.value: None for s in scalars})


class Hyperparams(BaseModel):
    """State-space sizes for every latent layer."""
    n_top: int = Field(default=1, ge=1, description="Top-layer states |Z|")
    n_dx: int = Field(default=1, ge=1, description="Shared diagnoses pool |Z_alpha| = |Z_delta|")
    n_beds: int = Field(default=1, ge=1)
    n_labs: int = Field(default=1, ge=1)
    n_neuro: int = Field(default=1, ge=1)
    n_meds: int = Field(default=1, ge=1)
    hmm_labs: int = Field(default=1, ge=1, description="HMM states |S_lambda|")
    hmm_neuro: int = Field(default=1, ge=1)
    hmm_meds: int = Field(default=1, ge=1)

    def n_states(self, stream: Stream) -> int:
        if stream in COLLECTION_STREAMS:
            return self.n_dx
        return getattr(self, f"n_{stream.value}")

    def n_hmm(self, stream: Stream) -> int:
        return getattr(self, f"hmm_{stream.value}")

    def with_states(self, stream: Stream, n: int) -> "Hyperparams":
        key = "n_dx" if stream in COLLECTION_STREAMS else f"n_{stream.value}"
        return self.model_copy(update={key: n})

    def with_hmm(self, stream: Stream, n: int) -> "Hyperparams":
        return self.model_copy(update={f"hmm_{stream.value}": n})


class FitConfig(BaseModel):
    seed: int = Field(default=0, ge=0)
    max_iters: int = Field(default_factory=lambda: settings.MAX_ITERS, ge=1)
    rel_tol: float = Field(default_factory=lambda: settings.REL_TOL, gt=0)
    restarts: int = Field(default_factory=lambda: settings.RESTARTS, ge=1)
    threads: int = Field(default_factory=lambda: settings.THREADS, ge=1)
    chunk_size: int = Field(default_factory=lambda: settings.CHUNK_SIZE, ge=1)
    streams: List[Stream] = Field(default_factory=lambda: list(ALL_STREAMS),
                                  description="Streams whose factors enter the training likelihood")
    scalars: List[Scalar] = Field(default_factory=lambda: list(ALL_SCALARS),
                                  description="Scalars whose factors enter the training likelihood")
    show_progress: bool = False


class FitReport(BaseModel):
    log_lik_trace: List[float] = Field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    seed: int = 0
    restart: int = 0
    restart_log_liks: List[float] = Field(default_factory=list)

    @property
    def final_log_lik(self) -> float:
        return self.log_lik_trace[-1] if self.log_lik_trace else -math.inf


class SearchGrid(BaseModel):
    values: List[int]

    @field_validator('values')
    @classmethod
    def validate_values(cls, v):
        if not v:
            raise ValueError('grid must not be empty')
        if any(x < 1 for x in v):
            raise ValueError('grid values must be at least 1')
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError('grid values must be strictly increasing')
        return v

    @classmethod
    def stepped(cls, step: Optional[int] = None, maximum: Optional[int] = None) -> "SearchGrid":
        step = step or settings.GRID_STEP
        maximum = maximum or settings.GRID_MAX
        return cls(values=list(range(step, maximum + 1, step)))


class StageReport(BaseModel):
    stage: str
    stream: Optional[Stream] = None
    candidates: List[int]
    bic: List[float]
    chosen: int

    @model_validator(mode='after')
    def validate_curve(self):
        if len(self.candidates) != len(self.bic):
            raise ValueError('one BIC value per candidate')
        return self


class SelectionReport(BaseModel):
    stages: List[StageReport] = Field(default_factory=list)
    hyperparams: Optional[Hyperparams] = None
    fits_performed: int = 0


class LengthStats(BaseModel):
    min: float
    mean: float
    std: float
    max: float


class StreamSummary(BaseModel):
    length: LengthStats
    items_per_timepoint: Optional[LengthStats] = None


class CorpusSummary(BaseModel):
    n_episodes: int
    streams: Dict[Stream, StreamSummary]


class RankedItem(BaseModel):
    item: int
    token: Optional[str] = None
    probability: float


class TopItems(BaseModel):
    stream: Stream
    state: int
    prevalence: Optional[float] = Field(default=None, description="Sub-model state prevalence; None for HMM states")
    items: List[RankedItem]


class EnrichmentTable(BaseModel):
    stream: Stream
    target: Scalar = Scalar.DEATH
    states: List[int] = Field(description="Sub-model state ids in ascending order of probability")
    probabilities: List[float]


class TreeNode(BaseModel):
    id: int
    parent: Optional[int] = None
    item: int
    token: Optional[str] = None
    depth: int
    probability: float = Field(description="Probability that the complete sequence is this node's path")
    reported: bool = True


class SequenceTree(BaseModel):
    stream: Stream = Stream.BEDS
    state: int
    threshold: float
    max_depth: Optional[int] = None
    empty_probability: float
    nodes: List[TreeNode] = Field(default_factory=list)

    def path(self, node_id: int) -> List[int]:
        items = []
        node = self.nodes[node_id]
        while True:
            items.append(node.item)
            if node.parent is None:
                break
            node = self.nodes[node.parent]
        return items[::-1]

    def terminations(self) -> Dict[tuple, float]:
        """Reported complete sequences and their probabilities."""
        out = {(): self.empty_probability} if self.empty_probability >= self.threshold else {}
        for node in self.nodes:
            if node.reported:
                out[tuple(self.path(node.id))] = node.probability
        return out

    def total_probability(self) -> float:
        return sum(self.terminations().values())


class Trajectory(BaseModel):
    stream: Stream
    state: int
    states: List[int]
    top_items: List[List[RankedItem]] = Field(default_factory=list)
    converged: bool


class LikelihoodRatio(BaseModel):
    state: int
    test: str
    ratio: Optional[float] = None
    administered: bool = True


class ScalarPosterior(BaseModel):
    scalar: Scalar
    probability: Optional[float] = Field(default=None, description="P(value = 1) for sex and death")
    support_min: Optional[int] = None
    pmf: Optional[List[float]] = Field(default=None, description="Age pmf over the integer support")

    @property
    def mean(self) -> float:
        if self.pmf is None:
            return self.probability
        return float(sum((self.support_min + i) * p for i, p in enumerate(self.pmf)))


class ComponentRow(BaseModel):
    state: int
    weight: float
    age_mean: float
    age_std: float
    p_sex: float
    p_death: float


class LengthRow(BaseModel):
    stream: Stream
    state: int
    rate: float
    prevalence: float
    enrichment: float


class VocabularySet(BaseModel):
    """Ordered token list per stream; a token's id is its position."""
    streams: Dict[Stream, List[str]]

    _index: Dict[Stream, Dict[str, int]] = PrivateAttr(default_factory=dict)

    @model_validator(mode='after')
    def validate_tokens(self):
        missing = [s.value for s in ALL_STREAMS if s not in self.streams]
        if missing:
            raise ValueError(f'vocabulary missing streams: {missing}')
        for stream, tokens in self.streams.items():
            if len(set(tokens)) != len(tokens):
                raise ValueError(f"duplicate tokens in stream '{stream.value}'")
            if not tokens:
                raise ValueError(f"stream '{stream.value}' has an empty vocabulary")
        if self.streams[Stream.ADMISSION_DX] != self.streams[Stream.DISCHARGE_DX]:
            raise ValueError('admission and discharge diagnoses share one state pool and need identical vocabularies')
        self._index = {s: {t: i for i, t in enumerate(tokens)} for s, tokens in self.streams.items()}
        return self

    def size(self, stream: Stream) -> int:
        return len(self.streams[stream])

    def sizes(self) -> Dict[Stream, int]:
        return {s: len(t) for s, t in self.streams.items()}

    def token(self, stream: Stream, item: int) -> str:
        return self.streams[stream][item]

    def lookup(self, stream: Stream, token: str) -> Optional[int]:
        return self._index[stream].get(token)


class LatentTrace(BaseModel):
    """Latent draws behind one sampled episode."""
    top: int
    sub_states: Dict[Stream, int]
    hmm_paths: Dict[Stream, List[int]] = Field(default_factory=dict)
