import os
from dotenv import load_dotenv

from .errors import ConfigurationError

load_dotenv()


class Settings:
    MAX_ITERS = int(os.getenv("ZIPLN_MAX_ITERS", "1000"))
    TOL = float(os.getenv("ZIPLN_TOL", "1e-6"))
    # Relative ELBO change is measured across this many iterations.
    WINDOW = int(os.getenv("ZIPLN_WINDOW", "10"))
    LEARNING_RATE = float(os.getenv("ZIPLN_LEARNING_RATE", "0.01"))
    INNER_STEPS = int(os.getenv("ZIPLN_INNER_STEPS", "5"))
    JOBS = int(os.getenv("ZIPLN_JOBS", "1"))
    REPLICATES = int(os.getenv("ZIPLN_REPLICATES", "10"))
    OUT_DIR = os.getenv("ZIPLN_OUT_DIR", os.path.join(os.getcwd(), "zipln-out"))
    LOG_LEVEL = os.getenv("ZIPLN_LOG_LEVEL", "INFO").upper()
    SEED = int(os.getenv("ZIPLN_SEED", "0"))

    @classmethod
    def validate(cls):
        for name in ("MAX_ITERS", "WINDOW", "INNER_STEPS", "JOBS", "REPLICATES"):
            if getattr(cls, name) < 1:
                raise ConfigurationError(f"ZIPLN_{name} must be a positive integer.")
        if not cls.TOL > 0:
            raise ConfigurationError("ZIPLN_TOL must be positive.")
        if not cls.LEARNING_RATE > 0:
            raise ConfigurationError("ZIPLN_LEARNING_RATE must be positive.")
