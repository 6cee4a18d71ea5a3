from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    PROJECT_NAME: str = "crnn-ep"
    VERSION: str = "0.1.0"

    # Environment settings
    ENV: str = "development"

    # Logging settings
    LOG_DIR: str = "logs"
    LOG_FILE: str = "crnn-ep.log"
    LOG_FILE_MAX_BYTES: int = 10 * 1024 * 1024  # 10MB
    LOG_FILE_BACKUP_COUNT: int = 5
    LOG_TO_FILE: bool = False

    # Oracle guards
    BPTT_STATE_BUDGET: int = 50_000_000  # retained state elements
    GRADCHECK_MAX_PARAMETERS: int = 5_000
    FD_WORKERS: int = 1

    # Data loading
    PREFETCH_BATCHES: int = 2

    class Config:
        env_file = ".env"
        case_sensitive = True
        extra = "ignore"


settings = Settings()
