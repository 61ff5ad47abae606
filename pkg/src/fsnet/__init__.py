"""Feature-selective detection on numpy: shifted-convolution attention banks,
selective RoI pooling and a low-capacity detection head."""
from .kernels import BACKEND
from .model import DetectorConfig, FSNet

__version__ = "0.1.0"

__all__ = ["BACKEND", "DetectorConfig", "FSNet", "__version__"]
