"""Rotation and corruption transforms for the shifted evaluation suites.

Images are (3, H, W). ``rotate`` and ``corrupt`` take and return uint8 images;
``perturb`` works on floats in [0, 1] and can return the unclamped result.
Stochastic corruptions draw from a generator seeded by
``(seed, corruption index, severity, sample id)``, so every shifted image is a pure
function of its inputs.
"""

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from .config import CORRUPTIONS, DEFAULT_SEVERITIES, ShiftConfig
from .data_io import SampleSet, write_cifar10_binary
from .errors import ConfigurationError, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ShiftSpec:
    kind: str
    angle: float | None = None
    corruption: str | None = None
    severity: int | None = None

    def __post_init__(self):
        if self.kind == "rotation":
            if self.angle is None or not 0.0 < self.angle <= 180.0:
                raise ConfigurationError(
                    f"rotation angle must lie in (0, 180], got {self.angle}"
                )
        elif self.kind == "corruption":
            if self.corruption not in CORRUPTIONS:
                raise ConfigurationError(f"unknown corruption type {self.corruption!r}")
            if self.severity not in (1, 2, 3, 4, 5):
                raise ConfigurationError(f"severity must be 1..5, got {self.severity}")
        else:
            raise ConfigurationError(f"unknown shift kind {self.kind!r}")

    @property
    def name(self) -> str:
        if self.kind == "rotation":
            return f"rotation_{self.angle:g}"
        return f"{self.corruption}_{self.severity}"

    @property
    def parameter(self) -> str:
        if self.kind == "rotation":
            return f"{self.angle:g}"
        return f"{self.corruption}:{self.severity}"


def rotate(image: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate counter-clockwise about the image centre with bilinear sampling.

    Pixels whose source falls outside the image take the channel mean.
    """
    image = np.asarray(image)
    if angle_deg % 360.0 == 0.0:
        return image.copy()
    _, height, width = image.shape
    theta = np.deg2rad(angle_deg)
    # rounded so quarter turns land exactly on the pixel grid
    cos_t, sin_t = round(float(np.cos(theta)), 15), round(float(np.sin(theta)), 15)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    sx = cx + dx * cos_t - dy * sin_t
    sy = cy + dx * sin_t + dy * cos_t
    inside = (sx >= 0) & (sx <= width - 1) & (sy >= 0) & (sy <= height - 1)

    source = image.astype(np.float64)
    out = np.empty_like(source)
    for ch, plane in enumerate(source):
        sampled = ndimage.map_coordinates(plane, [sy, sx], order=1, mode="nearest")
        out[ch] = np.where(inside, sampled, plane.mean())
    if image.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out.astype(image.dtype)


def _pixelate(x: np.ndarray, factor: float) -> np.ndarray:
    _, height, width = x.shape
    small_h = max(1, int(round(height / factor)))
    small_w = max(1, int(round(width / factor)))
    if (small_h, small_w) == (height, width):
        return x.copy()
    zoom = (1, small_h / height, small_w / width)
    small = ndimage.zoom(x, zoom, order=1, mode="nearest")
    small_h, small_w = small.shape[1:]
    rows = (np.arange(height) * small_h) // height
    cols = (np.arange(width) * small_w) // width
    return small[:, rows[:, None], cols[None, :]]


def perturb(
    x: np.ndarray,
    corruption: str,
    severity: int,
    rng: np.random.Generator,
    severities: Mapping[str, Sequence[float]] | None = None,
    clamp: bool = True,
) -> np.ndarray:
    """Apply one corruption to a float image in [0, 1]."""
    if corruption not in CORRUPTIONS:
        raise ConfigurationError(f"unknown corruption type {corruption!r}")
    if severity not in (1, 2, 3, 4, 5):
        raise ConfigurationError(f"severity must be 1..5, got {severity}")
    table = severities or DEFAULT_SEVERITIES
    level = float(table[corruption][severity - 1])
    x = np.asarray(x, dtype=np.float64)

    match corruption:
        case "gaussian_noise":
            y = x + rng.normal(0.0, level, size=x.shape)
        case "shot_noise":
            y = rng.poisson(np.clip(x, 0.0, 1.0) * level) / level
        case "impulse_noise":
            y = x.copy()
            hit = rng.random(x.shape) < level
            salt = rng.random(x.shape) < 0.5
            y[hit] = np.where(salt[hit], 1.0, 0.0)
        case "gaussian_blur":
            y = ndimage.gaussian_filter(x, sigma=(0.0, level, level), mode="reflect")
        case "contrast":
            means = x.mean(axis=(1, 2), keepdims=True)
            y = (x - means) * level + means
        case "brightness":
            y = x + level
        case "pixelate":
            y = _pixelate(x, level)
    return np.clip(y, 0.0, 1.0) if clamp else y


def corrupt(
    image: np.ndarray,
    corruption: str,
    severity: int,
    seed: int = 0,
    sample_id: int = 0,
    severities: Mapping[str, Sequence[float]] | None = None,
) -> np.ndarray:
    if corruption not in CORRUPTIONS:
        raise ConfigurationError(f"unknown corruption type {corruption!r}")
    rng = np.random.default_rng(
        [seed, CORRUPTIONS.index(corruption), severity, sample_id]
    )
    x = np.asarray(image, dtype=np.float64) / 255.0
    y = perturb(x, corruption, severity, rng, severities)
    return np.clip(np.rint(y * 255.0), 0, 255).astype(np.uint8)


def apply_shift(
    samples: SampleSet,
    spec: ShiftSpec,
    seed: int = 0,
    severities: Mapping[str, Sequence[float]] | None = None,
) -> SampleSet:
    if spec.kind == "rotation":
        images = np.stack([rotate(image, spec.angle) for image in samples.images])
    else:
        images = np.stack(
            [
                corrupt(image, spec.corruption, spec.severity, seed, i, severities)
                for i, image in enumerate(samples.images)
            ]
        )
    return samples.with_images(images)


def suite_specs(kind: str, cfg: ShiftConfig) -> list[ShiftSpec]:
    if kind == "rotation":
        return [ShiftSpec("rotation", angle=float(a)) for a in cfg.angles]
    if kind == "corruption":
        return [
            ShiftSpec("corruption", corruption=name, severity=s)
            for name in cfg.corruptions
            for s in range(1, 6)
        ]
    raise ConfigurationError(f"unknown suite kind {kind!r}")


def build_suite(
    testset: SampleSet,
    kind: str,
    cfg: ShiftConfig | None = None,
    progress: bool = False,
) -> list[tuple[ShiftSpec, SampleSet]]:
    """Every shifted copy of the test set for one suite, in a fixed order."""
    if len(testset) == 0:
        raise ValidationError("cannot build a shift suite from an empty test set")
    cfg = cfg or ShiftConfig()
    cfg.validate()
    specs = suite_specs(kind, cfg)
    suite = [
        (spec, apply_shift(testset, spec, cfg.seed, cfg.severities))
        for spec in tqdm(specs, desc=f"{kind} suite", disable=not progress)
    ]
    logger.info(
        f"[+] Built {kind} suite: {len(suite)} shifted sets of {len(testset)} images"
    )
    return suite


def write_suite(
    directory: str | Path, suite: Sequence[tuple[ShiftSpec, SampleSet]]
) -> list[Path]:
    """Materialise each shifted set as a CIFAR-10 binary file named after its spec."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for spec, shifted in suite:
        path = directory / f"{spec.name}.bin"
        write_cifar10_binary(path, shifted)
        paths.append(path)
    return paths
