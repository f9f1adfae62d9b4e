'''
Paired image/mask augmentation. Geometric operations resample the image bilinearly and the mask with nearest
neighbour through the same affine map, photometric operations only touch the image. Areas uncovered by a rotation or
shear are filled with black in the image and background (0) in the mask.
'''
from __future__ import annotations
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple
import numpy as np
from scipy.ndimage import affine_transform, gaussian_filter
from augmentation_op import AugmentationOp
from errors import ConfigurationError, DataError

MAX_CROP_ATTEMPTS = 10

# RGB <-> YIQ, used for the hue rotation
RGB_TO_YIQ = np.array([[0.299, 0.587, 0.114],
                       [0.596, -0.274, -0.322],
                       [0.211, -0.523, 0.312]])
YIQ_TO_RGB = np.linalg.inv(RGB_TO_YIQ)


@dataclass
class AugmentationSpec:
    enabledOps: Tuple[AugmentationOp, ...] = field(default_factory=lambda: tuple(AugmentationOp))
    rotationDegrees: float = 15.0
    shearDegrees: float = 10.0
    cropScale: Tuple[float, float] = (0.8, 1.0)
    blurSigma: Tuple[float, float] = (0.5, 1.5)
    jitter: float = 0.2
    noiseSigma: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if not self.enabledOps:
            raise ConfigurationError('AugmentationSpec.enabledOps: at least one operation must be enabled')
        if len(set(self.enabledOps)) != len(self.enabledOps):
            raise ConfigurationError(f'AugmentationSpec.enabledOps contains duplicates: {[op.label for op in self.enabledOps]}')
        if not 0.0 <= self.rotationDegrees <= 180.0:
            raise ConfigurationError(f'AugmentationSpec.rotationDegrees must lie in [0, 180], got {self.rotationDegrees}')
        if not 0.0 <= self.shearDegrees < 45.0:
            raise ConfigurationError(f'AugmentationSpec.shearDegrees must lie in [0, 45), got {self.shearDegrees}')
        low, high = self.cropScale
        if not 0.0 < low <= high <= 1.0:
            raise ConfigurationError(f'AugmentationSpec.cropScale must satisfy 0 < min <= max <= 1, got {self.cropScale}')
        low, high = self.blurSigma
        if not 0.0 < low <= high <= 5.0:
            raise ConfigurationError(f'AugmentationSpec.blurSigma must satisfy 0 < min <= max <= 5, got {self.blurSigma}')
        if not 0.0 <= self.jitter < 1.0:
            raise ConfigurationError(f'AugmentationSpec.jitter must lie in [0, 1), got {self.jitter}')
        if not 0.0 <= self.noiseSigma <= 0.5:
            raise ConfigurationError(f'AugmentationSpec.noiseSigma must lie in [0, 0.5], got {self.noiseSigma}')

    def toDict(self) -> Dict:
        return {'enabled_ops': [op.label for op in self.enabledOps], 'rotation_degrees': self.rotationDegrees,
                'shear_degrees': self.shearDegrees, 'crop_scale': list(self.cropScale),
                'blur_sigma': list(self.blurSigma), 'jitter': self.jitter, 'noise_sigma': self.noiseSigma,
                'seed': self.seed}


def _centeredAffine(matrix: np.ndarray, shape: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    '''Matrix and offset mapping output (row, col) to input coordinates around the image center.'''
    matrix = np.round(matrix, 12)
    center = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    return matrix, center - matrix @ center


def warp(image: np.ndarray, mask: np.ndarray, matrix: np.ndarray, offset: np.ndarray,
         mode: str = 'constant') -> Tuple[np.ndarray, np.ndarray]:
    '''
    Resamples a (3, H, W) image and an (H, W) mask through output -> input coordinate map matrix @ o + offset.
    '''
    warpedImage = np.stack([affine_transform(channel.astype(np.float64), matrix, offset, order=1, mode=mode, cval=0.0)
                            for channel in image])
    warpedMask = affine_transform(mask, matrix, offset, order=0, mode=mode, cval=0)
    return warpedImage.astype(np.float32), warpedMask.astype(mask.dtype)


def horizontal_flip(image: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return image[:, :, ::-1].copy(), mask[:, ::-1].copy()


def rotate(image: np.ndarray, mask: np.ndarray, degrees: float) -> Tuple[np.ndarray, np.ndarray]:
    '''
    Rotation about the image center. With (row, col) coordinates a +90 degree rotation turns [[1, 2], [3, 4]] into
    [[3, 1], [4, 2]].
    '''
    theta = np.deg2rad(degrees)
    matrix = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    return warp(image, mask, *_centeredAffine(matrix, mask.shape))


def shear(image: np.ndarray, mask: np.ndarray, degrees: float) -> Tuple[np.ndarray, np.ndarray]:
    matrix = np.array([[1.0, 0.0], [np.tan(np.deg2rad(degrees)), 1.0]])
    return warp(image, mask, *_centeredAffine(matrix, mask.shape))


def crop_resize(image: np.ndarray, mask: np.ndarray, top: int, left: int, height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    '''Cuts the region and scales it back to the full image size (pixel centers aligned).'''
    h, w = mask.shape
    scaleRow, scaleCol = height / h, width / w
    matrix = np.diag([scaleRow, scaleCol])
    offset = np.array([top + 0.5 * scaleRow - 0.5, left + 0.5 * scaleCol - 0.5])
    return warp(image, mask, matrix, offset, mode='nearest')


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    return gaussian_filter(image.astype(np.float64), sigma=(0.0, sigma, sigma)).astype(np.float32)


def color_jitter(image: np.ndarray, brightness: float, contrast: float, saturation: float, hue: float) -> np.ndarray:
    '''
    Brightness and contrast are multiplicative factors, saturation scales the distance to the per-pixel gray value
    and hue rotates the chroma plane by an angle in radians.
    '''
    x = image.astype(np.float64) * brightness
    gray = np.tensordot(RGB_TO_YIQ[0], x, axes=1)
    x = (x - gray.mean()) * contrast + gray.mean()
    gray = np.tensordot(RGB_TO_YIQ[0], x, axes=1)
    x = (x - gray[None]) * saturation + gray[None]
    yiq = np.tensordot(RGB_TO_YIQ, x, axes=1)
    cosH, sinH = np.cos(hue), np.sin(hue)
    i, q = yiq[1].copy(), yiq[2].copy()
    yiq[1] = cosH * i - sinH * q
    yiq[2] = sinH * i + cosH * q
    x = np.tensordot(YIQ_TO_RGB, yiq, axes=1)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def random_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return np.clip(image + rng.normal(0.0, sigma, image.shape), 0.0, 1.0).astype(np.float32)


def _drawCrop(shape: Tuple[int, int], spec: AugmentationSpec, rng: np.random.Generator) -> Tuple[int, int, int, int]:
    h, w = shape
    for _ in range(MAX_CROP_ATTEMPTS):
        scale = rng.uniform(*spec.cropScale)
        height, width = int(round(scale * h)), int(round(scale * w))
        if 1 <= height <= h and 1 <= width <= w:
            top = int(rng.integers(0, h - height + 1))
            left = int(rng.integers(0, w - width + 1))
            return top, left, height, width
    raise DataError(f'random_crop: no non-empty crop of a {h}x{w} image after {MAX_CROP_ATTEMPTS} draws '
                    f'(scale range {spec.cropScale})')


def apply_op(op: AugmentationOp, image: np.ndarray, mask: np.ndarray, spec: AugmentationSpec,
             rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    if op == AugmentationOp.HORIZONTAL_FLIP:
        return horizontal_flip(image, mask)
    if op == AugmentationOp.ROTATION:
        return rotate(image, mask, rng.uniform(-spec.rotationDegrees, spec.rotationDegrees))
    if op == AugmentationOp.SHEAR:
        return shear(image, mask, rng.uniform(-spec.shearDegrees, spec.shearDegrees))
    if op == AugmentationOp.RANDOM_CROP:
        return crop_resize(image, mask, *_drawCrop(mask.shape, spec, rng))
    if op == AugmentationOp.GAUSSIAN_BLUR:
        return gaussian_blur(image, rng.uniform(*spec.blurSigma)), mask
    if op == AugmentationOp.COLOR_JITTER:
        j = spec.jitter
        factors = rng.uniform(1.0 - j, 1.0 + j, size=3)
        hue = rng.uniform(-j, j) * np.pi
        return color_jitter(image, factors[0], factors[1], factors[2], hue), mask
    if op == AugmentationOp.RANDOM_NOISE:
        return random_noise(image, spec.noiseSigma, rng), mask
    raise ConfigurationError(f'Unsupported augmentation {op}')


def augment_sample(image: np.ndarray, mask: np.ndarray, spec: AugmentationSpec, drawSeed: int,
                   ops: Optional[Sequence[AugmentationOp]] = None) -> Tuple[np.ndarray, np.ndarray]:
    '''
    Applies ops (default: every enabled operation, in enabled order) with parameters drawn from a generator seeded
    with drawSeed. Returns new arrays of the input sizes.
    '''
    if image.ndim != 3 or image.shape[1:] != mask.shape:
        raise DataError(f'augment_sample: image shape {image.shape} is not aligned with mask shape {mask.shape}')
    rng = np.random.default_rng(drawSeed)
    image = image.astype(np.float32)
    for op in (spec.enabledOps if ops is None else ops):
        image, mask = apply_op(op, image, mask, spec, rng)
    return image, mask
