"""Co-BERT style re-ranking: PRF calibration plus groupwise scoring on a numpy autograd core."""

__version__ = "0.1.0"

from .config import ModelConfig, TrainConfig, load_config  # noqa: E402
from .model import CoBERT  # noqa: E402

__all__ = ["CoBERT", "ModelConfig", "TrainConfig", "load_config", "__version__"]
