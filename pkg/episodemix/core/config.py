from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import field_validator, model_validator


class Settings(BaseSettings):
    # Project
    PROJECT_NAME: str = "episodemix"
    LOG_LEVEL: str = "INFO"

    # EM Configuration
    MAX_ITERS: int = 200
    REL_TOL: float = 1e-6  # Relative log-likelihood change that counts as converged
    RESTARTS: int = 1

    # Estimation floors
    SMOOTHING: float = 1e-6  # Pseudo-count added to every categorical/transition cell
    POISSON_RATE_FLOOR: float = 1e-6
    BERNOULLI_CLAMP: float = 1e-9
    VARIANCE_FLOOR: float = 0.25  # years^2

    # Age support (years, inclusive)
    AGE_SUPPORT_MIN: int = 0
    AGE_SUPPORT_MAX: int = 120

    # Analysis defaults
    TREE_THRESHOLD: float = 0.01
    TOP_ITEMS: int = 5
    TRAJECTORY_ITEMS: int = 3
    TRAJECTORY_MAX_STEPS: int = 50
    ADMINISTERED_MIN_MASS: float = 0.01  # Below this a test counts as not administered

    # Execution
    CHUNK_SIZE: int = 256  # Episodes per work unit; fixed so results never depend on THREADS
    THREADS: int = 1

    # Model selection grids (10, 20, ... GRID_MAX)
    GRID_STEP: int = 10
    GRID_MAX: int = 50
    TOP_STATES: int = 10  # n_top used by staged selection when no top grid is given

    # File schema versions
    MODEL_SCHEMA_VERSION: int = 1
    CORPUS_SCHEMA_VERSION: int = 1

    model_config = SettingsConfigDict(
        env_file=".env",
        case_sensitive=True,
        env_file_encoding='utf-8',
        extra='allow'
    )

    @field_validator('REL_TOL', 'SMOOTHING', 'POISSON_RATE_FLOOR', 'BERNOULLI_CLAMP', 'VARIANCE_FLOOR')
    @classmethod
    def validate_positive(cls, v):
        if v <= 0:
            raise ValueError('must be positive')
        return v

    @field_validator('MAX_ITERS', 'RESTARTS', 'CHUNK_SIZE', 'THREADS', 'GRID_STEP', 'GRID_MAX', 'TOP_STATES', 'TOP_ITEMS',
                     'TRAJECTORY_ITEMS', 'TRAJECTORY_MAX_STEPS')
    @classmethod
    def validate_at_least_one(cls, v):
        if v < 1:
            raise ValueError('must be at least 1')
        return v

    @model_validator(mode='after')
    def validate_age_support(self):
        if self.AGE_SUPPORT_MIN > self.AGE_SUPPORT_MAX:
            raise ValueError('AGE_SUPPORT_MIN must not exceed AGE_SUPPORT_MAX')
        return self


settings = Settings()
