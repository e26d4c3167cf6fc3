import os
from pydantic import BaseSettings
from functools import lru_cache

class Settings(BaseSettings):
    # Project settings
    PROJECT_NAME: str = "TrapSim"
    PROJECT_DESCRIPTION: str = "Coherent manipulation of atomic qubit ensembles in optical dipole traps and trap arrays"
    PROJECT_VERSION: str = "0.1.0"

    # Logging settings
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    LOG_FORMAT: str = "%(asctime)s %(levelname)s %(name)s: %(message)s"

    # Output settings
    OUTPUT_DIR: str = os.getenv("OUTPUT_DIR", "./out")
    CSV_SIGNIFICANT_DIGITS: int = 12
    PGM_MAX_COUNT: int = 65535

    # Reproducibility and parallelism
    DEFAULT_SEED: int = int(os.getenv("DEFAULT_SEED", "20070131"))
    N_JOBS: int = int(os.getenv("N_JOBS", "1"))
    MC_BLOCK_SIZE: int = 1024  # atoms per RNG stream; never tie this to N_JOBS

    # Integrator settings
    STEPS_PER_CYCLE: int = 500  # RK4 steps per generalized Rabi period
    RELAXATION_STEPS: int = 200  # RK4 steps per T2
    MAX_STEP_S: float = float(os.getenv("MAX_STEP_S", "1e-6"))

    class Config:
        env_file = ".env"
        case_sensitive = True

@lru_cache()
def get_settings():
    return Settings()

settings = get_settings()
