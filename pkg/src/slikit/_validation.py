"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

from .core import PhaseImage, PointCloud


def check_points(X, name: str = "X") -> np.ndarray:
    if isinstance(X, PointCloud):
        X = X.points
    X = check_array(X, dtype=np.float64, ensure_2d=True, input_name=name)
    if X.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {X.shape}")
    return X


def check_cloud(X, name: str = "X") -> PointCloud:
    if isinstance(X, PointCloud):
        return X
    return PointCloud(check_points(X, name))


def check_phase_image(y, name: str = "y") -> PhaseImage:
    if isinstance(y, PhaseImage):
        return y
    arr = np.asarray(y, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a PhaseImage or a 2-D array with NaN for invalid pixels")
    return PhaseImage.from_nan(arr)


def check_same_shape(images, name: str = "images") -> tuple[int, int]:
    shapes = {tuple(getattr(im, "shape", np.shape(im))) for im in images}
    if len(shapes) != 1:
        raise ValueError(f"{name} must all share one shape, got {sorted(shapes)}")
    return shapes.pop()
