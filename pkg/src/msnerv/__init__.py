"""Multi-scale neural video representation: fit, compress and evaluate."""

from msnerv.config import RunConfig, load_config
from msnerv.model import MSNeRV, build_model

__version__ = "0.1.0"

__all__ = ["MSNeRV", "RunConfig", "build_model", "load_config"]
