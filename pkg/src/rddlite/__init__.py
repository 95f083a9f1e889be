"""Two-branch keypoint detection, description and matching on a small numpy autodiff core."""
from ._accel import backend_name

__version__ = "0.1.0"
__all__ = ["backend_name", "__version__"]
