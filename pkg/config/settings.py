from pydantic_settings import BaseSettings
import os

class Settings(BaseSettings):
    PROJECT_NAME: str = "FedPass-Lab"
    VERSION: str = "1.0.0"

    # Dataset root (MNIST IDX files live here)
    DATA_DIR: str = os.getenv("FEDPASS_DATA_DIR", "data/mnist")

    # Path Config
    RESULTS_PATH: str = "results"
    CHECKPOINT_PATH: str = "checkpoints"
    LOG_PATH: str = "logs"
    DB_NAME: str = "runs.db"            # inside each output dir

    # Runtime
    LOG_LEVEL: str = os.getenv("FEDPASS_LOG_LEVEL", "INFO")
    DEFAULT_JOBS: int = int(os.getenv("FEDPASS_JOBS", "1"))

    class Config:
        env_file = ".env"
        extra = "ignore"
        case_sensitive = True

SETTINGS = Settings()
