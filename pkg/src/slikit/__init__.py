"""Phase-image SLAM for structured-light sensors."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .core import EulerPose, PhaseImage, PointCloud, SensorRig, default_rig
from .errors import SlikitError
from .loop import CompressiveSignature
from .metrics import PointToPointICP
from .odometry import OdometryConfig, PhaseOdometry, estimate_motion
from .pmp import PmpDecoder

__all__ = ["EulerPose", "PhaseImage", "PointCloud", "SensorRig", "default_rig", "SlikitError",
           "CompressiveSignature", "PointToPointICP", "OdometryConfig", "PhaseOdometry",
           "estimate_motion", "PmpDecoder", "__version__"]
