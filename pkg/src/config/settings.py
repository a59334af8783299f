import os
from dotenv import load_dotenv

load_dotenv()


class Settings:
    """Process settings loaded from environment variables."""

    # Logging
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")

    # Serving settings
    SERVE_HOST: str = os.getenv("SERVE_HOST", "0.0.0.0")
    SERVE_PORT: int = int(os.getenv("SERVE_PORT", "8000"))
    SERVE_DATA_PATH: str = os.getenv("SERVE_DATA_PATH", "")
    SERVE_CHECKPOINT_DIR: str = os.getenv("SERVE_CHECKPOINT_DIR", "")
    SERVE_MAX_K: int = int(os.getenv("SERVE_MAX_K", "100"))

    # Verification
    GRADCHECK_TOLERANCE: float = float(os.getenv("GRADCHECK_TOLERANCE", "1e-4"))
    GRADCHECK_SAMPLES: int = int(os.getenv("GRADCHECK_SAMPLES", "16"))

    @classmethod
    def validate(cls) -> bool:
        """Validate critical settings on startup."""
        try:
            assert cls.LOG_LEVEL.upper() in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"), "LOG_LEVEL"
            assert 0 < cls.SERVE_PORT < 65536, "SERVE_PORT"
            assert cls.SERVE_MAX_K > 0, "SERVE_MAX_K"
            assert 0 < cls.GRADCHECK_TOLERANCE < 1, "GRADCHECK_TOLERANCE"
            assert cls.GRADCHECK_SAMPLES >= 0, "GRADCHECK_SAMPLES"
            return True
        except AssertionError as e:
            raise ValueError(f"Invalid configuration: {e}")


settings = Settings()
