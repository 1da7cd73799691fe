"""Isotropic undecimated wavelet (starlet) transform on stacks of images.

Images are stored as flattened rows of a matrix, row-major over
``(height, width)``. The transform is the a trous algorithm with the
separable B3-spline kernel (1, 4, 6, 4, 1)/16, dilated by ``2**j`` at scale
``j``, and mirror boundaries. Synthesis is the plain sum of all scales.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

B3_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass
class StarletCoeffs:
    """Detail scales and coarse residual for a stack of images.

    ``details`` has shape ``(n_scales, n_images, n_pixels)``, finest scale
    first; ``coarse`` has shape ``(n_images, n_pixels)``.
    """

    details: np.ndarray
    coarse: np.ndarray
    width: int
    height: int

    @property
    def n_scales(self) -> int:
        return self.details.shape[0]

    def copy(self) -> "StarletCoeffs":
        return StarletCoeffs(self.details.copy(), self.coarse.copy(), self.width, self.height)


def _dilated_kernel(scale: int) -> np.ndarray:
    step = 2**scale
    kernel = np.zeros(4 * step + 1)
    kernel[::step] = B3_KERNEL
    return kernel


def _smooth(cube: np.ndarray, scale: int) -> np.ndarray:
    kernel = _dilated_kernel(scale)
    out = correlate1d(cube, kernel, axis=1, mode="mirror")
    return correlate1d(out, kernel, axis=2, mode="mirror")


def _check_shape(images: np.ndarray, width: int, height: int, n_scales: int) -> None:
    if images.ndim != 2:
        raise ValueError(f"images must be a 2-D stack of flattened images, got {images.shape}")
    if width * height != images.shape[1]:
        raise ValueError(
            f"width*height = {width}*{height} does not match image length {images.shape[1]}"
        )
    if n_scales < 1:
        raise ValueError("n_scales must be at least 1")
    if min(width, height) < 2**n_scales:
        raise ValueError(
            f"images of size {width}x{height} are too small for {n_scales} scales"
        )


def starlet_forward(images, width: int, height: int, n_scales: int) -> StarletCoeffs:
    images = np.asarray(images, dtype=np.float64)
    _check_shape(images, width, height, n_scales)
    n = images.shape[0]
    current = images.reshape(n, height, width)
    details = np.empty((n_scales, n, width * height))
    for j in range(n_scales):
        smoother = _smooth(current, j)
        details[j] = (current - smoother).reshape(n, -1)
        current = smoother
    return StarletCoeffs(details, current.reshape(n, -1).copy(), width, height)


def starlet_inverse(coeffs: StarletCoeffs) -> np.ndarray:
    return coeffs.details.sum(axis=0) + coeffs.coarse
