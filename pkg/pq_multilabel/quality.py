"""Natural-scene-statistics quality features and the corpus-distance score.

The feature extractor follows BRISQUE: mean-subtracted contrast-normalized (MSCN)
luminance coefficients are summarised by a generalized Gaussian fit, and their four
neighbour products by asymmetric generalized Gaussian fits, at two dyadic scales.
Instead of a trained regressor the score is the Mahalanobis distance of an image's
features to the training corpus, so larger scores mean a more atypical image and a
higher rank in the uncertain pool.
"""

import functools
import logging
from dataclasses import dataclass, field
from multiprocessing import Pool
from pathlib import Path
from typing import Any, Callable, Mapping, NamedTuple

import numpy as np
import scipy.linalg
from scipy import ndimage
from scipy.special import gammaln
from tqdm import tqdm

from .data_io import SampleSet, read_csv, write_csv
from .errors import (
    DegenerateInputError,
    InsufficientDataError,
    SingularMatrixError,
    ValidationError,
)

logger = logging.getLogger(__name__)

WINDOW_SIZE = 7
WINDOW_SIGMA = 7.0 / 6.0
C_STAB = 1.0 / 255.0
SHAPE_BOUNDS = (0.2, 10.0)
SHAPE_TOLERANCE = 1e-3
MIN_FIT_SAMPLES = 100
MIN_FEATURE_SIDE = 16
ORIENTATIONS = ("H", "V", "D1", "D2")
NUM_FEATURES = 36

FEATURE_NAMES = tuple(
    name
    for scale in (1, 2)
    for name in (
        f"s{scale}_ggd_alpha",
        f"s{scale}_ggd_sigma2",
        *(
            f"s{scale}_{o}_{p}"
            for o in ORIENTATIONS
            for p in ("aggd_nu", "aggd_eta", "aggd_sigma_l2", "aggd_sigma_r2")
        ),
    )
)


class GgdFit(NamedTuple):
    alpha: float
    sigma2: float
    clamped: bool = False


class AggdFit(NamedTuple):
    nu: float
    eta: float
    sigma_l2: float
    sigma_r2: float
    clamped: bool = False


def to_luminance(image: np.ndarray) -> np.ndarray:
    """(3, H, W) uint8 RGB -> (H, W) float64 luminance in [0, 1]."""
    rgb = np.asarray(image, dtype=np.float64)
    luma = (0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]) / 255.0
    return np.clip(luma, 0.0, 1.0)


@functools.cache
def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    window = np.outer(g, g)
    window /= window.sum()
    window.flags.writeable = False
    return window


def mscn(plane: np.ndarray) -> np.ndarray:
    """Divisively normalised luminance; borders use half-sample mirror reflection."""
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2 or min(plane.shape) < WINDOW_SIZE:
        raise ValidationError(f"mscn needs a plane of at least 7x7, got {plane.shape}")
    # MSCN is invariant to an intensity offset; removing one keeps constants exact
    centered = plane - plane.flat[0]
    window = gaussian_window()
    mu = ndimage.correlate(centered, window, mode="reflect")
    var = ndimage.correlate(centered * centered, window, mode="reflect") - mu * mu
    sigma = np.sqrt(np.abs(var))
    return (centered - mu) / (sigma + C_STAB)


def pairwise_products(coeffs: np.ndarray) -> tuple[np.ndarray, ...]:
    """Horizontal, vertical, main- and anti-diagonal neighbour products."""
    x = np.asarray(coeffs, dtype=np.float64)
    if x.ndim != 2 or min(x.shape) < 2:
        raise ValidationError(f"pairwise products need at least 2x2, got {x.shape}")
    horizontal = x[:, :-1] * x[:, 1:]
    vertical = x[:-1, :] * x[1:, :]
    diagonal = x[:-1, :-1] * x[1:, 1:]
    anti_diagonal = x[:-1, 1:] * x[1:, :-1]
    return horizontal, vertical, diagonal, anti_diagonal


def _ggd_ratio(alpha):
    log_ratio = gammaln(1.0 / alpha) + gammaln(3.0 / alpha) - 2.0 * gammaln(2.0 / alpha)
    return np.exp(log_ratio)


def _aggd_ratio(nu):
    return np.exp(2.0 * gammaln(2.0 / nu) - gammaln(1.0 / nu) - gammaln(3.0 / nu))


@functools.cache
def _shape_grid() -> np.ndarray:
    lo, hi = SHAPE_BOUNDS
    return np.linspace(lo, hi, int(round((hi - lo) / SHAPE_TOLERANCE)) + 1)


@functools.cache
def _grid_values(ratio: Callable) -> np.ndarray:
    return ratio(_shape_grid())


def _solve_shape(ratio: Callable, target: float) -> tuple[float, bool]:
    """Invert a strictly monotone moment ratio on the bounded shape grid.

    A grid scan brackets the root and bisection narrows it well below the grid
    step. Targets outside the ratio's range clamp to the nearer bound.
    """
    grid = _shape_grid()
    values = _grid_values(ratio)
    sign = 1.0 if values[-1] > values[0] else -1.0
    signed = sign * values
    t = sign * target
    if t <= signed[0]:
        return float(grid[0]), True
    if t >= signed[-1]:
        return float(grid[-1]), True
    idx = int(np.searchsorted(signed, t))
    lo, hi = float(grid[idx - 1]), float(grid[idx])
    while hi - lo > 1e-10:
        mid = 0.5 * (lo + hi)
        if sign * float(ratio(mid)) < t:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi), False


def _as_samples(samples: Any, min_samples: int) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64).ravel()
    if not np.all(np.isfinite(x)):
        raise ValidationError("samples contain non-finite values")
    if x.size < min_samples:
        raise InsufficientDataError(
            f"need at least {min_samples} samples, got {x.size}"
        )
    return x


def fit_ggd(samples: Any, min_samples: int = MIN_FIT_SAMPLES) -> GgdFit:
    """Moment-matching generalized Gaussian fit; ``sigma2`` is the mean square."""
    x = _as_samples(samples, min_samples)
    m1 = float(np.mean(np.abs(x)))
    m2 = float(np.mean(x * x))
    if m2 == 0.0:
        raise DegenerateInputError("all samples are zero")
    alpha, clamped = _solve_shape(_ggd_ratio, m2 / (m1 * m1))
    return GgdFit(alpha, m2, clamped)


def fit_aggd(samples: Any, min_samples: int = MIN_FIT_SAMPLES) -> AggdFit:
    x = _as_samples(samples, min_samples)
    left = x[x < 0]
    right = x[x >= 0]
    if left.size == 0 or not np.any(right > 0):
        raise DegenerateInputError("samples are one-sided")
    sigma_l2 = float(np.mean(left * left))
    sigma_r2 = float(np.mean(right * right))
    sigma_l, sigma_r = np.sqrt(sigma_l2), np.sqrt(sigma_r2)
    r = float(np.mean(np.abs(x))) ** 2 / float(np.mean(x * x))
    # gamma-hat correction written symmetric in (sigma_l, sigma_r) so x -> -x is exact
    correction = (
        (sigma_l**3 + sigma_r**3) * (sigma_l + sigma_r) / (sigma_l**2 + sigma_r**2) ** 2
    )
    nu, clamped = _solve_shape(_aggd_ratio, r * correction)
    scale = np.exp(gammaln(2.0 / nu) - 0.5 * (gammaln(1.0 / nu) + gammaln(3.0 / nu)))
    eta = float((sigma_r - sigma_l) * scale)
    return AggdFit(nu, eta, sigma_l2, sigma_r2, clamped)


def _downsample(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape[0] // 2, plane.shape[1] // 2
    return plane[: 2 * h, : 2 * w].reshape(h, 2, w, 2).mean(axis=(1, 3))


def brisque_features(plane: np.ndarray) -> np.ndarray:
    """36-vector of GGD / AGGD parameters at the input scale and at half size."""
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2 or min(plane.shape) < MIN_FEATURE_SIDE:
        raise ValidationError(
            f"feature extraction needs at least {MIN_FEATURE_SIDE}x{MIN_FEATURE_SIDE}, "
            f"got {plane.shape}"
        )
    features: list[float] = []
    current = plane
    for scale in (1, 2):
        coeffs = mscn(current)
        # the plane-size check above replaces the per-fit sample minimum
        try:
            ggd = fit_ggd(coeffs, min_samples=1)
        except DegenerateInputError as err:
            raise DegenerateInputError(f"scale {scale}, MSCN: {err}") from err
        features.extend((ggd.alpha, ggd.sigma2))
        for orientation, product in zip(ORIENTATIONS, pairwise_products(coeffs)):
            try:
                aggd = fit_aggd(product, min_samples=1)
            except DegenerateInputError as err:
                raise DegenerateInputError(
                    f"scale {scale}, orientation {orientation}: {err}"
                ) from err
            features.extend((aggd.nu, aggd.eta, aggd.sigma_l2, aggd.sigma_r2))
        current = _downsample(current)
    result = np.array(features, dtype=np.float64)
    assert result.shape == (NUM_FEATURES,)
    return result


@dataclass(frozen=True)
class ReferenceModel:
    """Mean and covariance of a feature corpus; factorised once on construction."""

    mean: np.ndarray
    covariance: np.ndarray
    ridge: float = 1e-6
    _factor: Any = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=np.float64)
        if cov.shape != (len(self.mean), len(self.mean)):
            raise ValidationError(
                f"covariance shape {cov.shape} does not match the mean"
            )
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-9:
            raise ValidationError("covariance is not symmetric")
        if self.ridge < 0:
            raise ValidationError("ridge must be >= 0")
        regularised = cov + self.ridge * np.eye(len(cov))
        eigenvalues = np.linalg.eigvalsh(regularised)
        if eigenvalues[0] <= 1e-12 * max(1.0, eigenvalues[-1]):
            raise SingularMatrixError(
                f"covariance + ridge*I is not invertible (smallest eigenvalue "
                f"{eigenvalues[0]:.3e}); increase the ridge"
            )
        object.__setattr__(self, "_factor", scipy.linalg.cho_factor(regularised))

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve(self._factor, rhs)


def fit_reference_model(corpus: Any, ridge: float = 1e-6) -> ReferenceModel:
    features = np.asarray(corpus, dtype=np.float64)
    if features.ndim != 2 or len(features) < 2:
        raise InsufficientDataError(
            f"reference corpus needs at least 2 feature vectors, got {len(features)}"
        )
    if not np.all(np.isfinite(features)):
        raise ValidationError("reference corpus contains non-finite features")
    if len(features) <= features.shape[1]:
        logger.warning(
            f"Reference corpus of {len(features)} vectors is not larger than the "
            f"feature dimension {features.shape[1]}; relying on the ridge"
        )
    mean = features.mean(axis=0)
    cov = np.cov(features, rowvar=False, ddof=1)
    cov = 0.5 * (cov + cov.T)
    return ReferenceModel(mean, cov, ridge)


def quality_score(features: np.ndarray, ref: ReferenceModel) -> float:
    return float(quality_scores(np.asarray(features)[None, :], ref)[0])


def quality_scores(features: np.ndarray, ref: ReferenceModel) -> np.ndarray:
    """Mahalanobis distance of each row to the reference corpus."""
    features = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise ValidationError("features contain non-finite values")
    diff = features - ref.mean
    solved = ref.solve(diff.T)
    d2 = np.einsum("ij,ji->i", diff, solved)
    return np.sqrt(np.maximum(d2, 0.0))


def ranking_from_scores(
    scores: np.ndarray, ids: np.ndarray | None = None
) -> np.ndarray:
    """Ids by descending score, ties by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.arange(len(scores)) if ids is None else np.asarray(ids)
    order = np.lexsort((ids, -scores))
    return ids[order]


def image_features(image: np.ndarray) -> np.ndarray | None:
    """Features of one RGB image, or None when its statistics are degenerate."""
    try:
        return brisque_features(to_luminance(image))
    except DegenerateInputError as err:
        logger.debug(f"Degenerate image statistics: {err}")
        return None


def extract_corpus_features(samples: SampleSet, n_jobs: int = 1) -> np.ndarray:
    """(N, 36) feature matrix; degenerate images get a row of NaN."""
    progress = dict(
        total=len(samples),
        desc="Quality features",
        disable=not logger.isEnabledFor(logging.INFO),
    )
    if n_jobs > 1:
        with Pool(n_jobs) as pool:
            mapped = pool.imap(image_features, samples.images, chunksize=32)
            rows = list(tqdm(mapped, **progress))
    else:
        rows = [image_features(image) for image in tqdm(samples.images, **progress)]
    features = np.full((len(samples), NUM_FEATURES), np.nan)
    for idx, row in enumerate(rows):
        if row is not None:
            features[idx] = row
    return features


def _scores_with_fallback(features: np.ndarray, ref: ReferenceModel) -> np.ndarray:
    degenerate = np.isnan(features).any(axis=1)
    scores = np.zeros(len(features))
    if np.any(~degenerate):
        scores[~degenerate] = quality_scores(features[~degenerate], ref)
    # constant images carry no information and belong in the pool
    if np.any(degenerate):
        top = scores[~degenerate].max() if np.any(~degenerate) else 0.0
        scores[degenerate] = top + 1.0
    return scores


def rank_by_quality(
    samples: SampleSet, ref: ReferenceModel, n_jobs: int = 1
) -> np.ndarray:
    features = extract_corpus_features(samples, n_jobs)
    return ranking_from_scores(_scores_with_fallback(features, ref), samples.ids)


@dataclass(frozen=True)
class QualityTable:
    ids: np.ndarray
    features: np.ndarray
    scores: np.ndarray
    reference: ReferenceModel | None = None

    @property
    def degenerate(self) -> np.ndarray:
        return np.isnan(self.features).any(axis=1)

    @property
    def ranking(self) -> np.ndarray:
        return ranking_from_scores(self.scores, self.ids)


def score_corpus(
    samples: SampleSet, ridge: float = 1e-6, n_jobs: int = 1
) -> QualityTable:
    """Extract features, fit the reference on the corpus itself and score it."""
    logger.info(f"[+] Scoring perceptual quality of {len(samples)} images")
    features = extract_corpus_features(samples, n_jobs)
    usable = ~np.isnan(features).any(axis=1)
    if usable.sum() < 2:
        raise InsufficientDataError(
            f"only {int(usable.sum())} image(s) have non-degenerate statistics"
        )
    if not usable.all():
        logger.warning(f"{int((~usable).sum())} degenerate image(s) ranked first")
    ref = fit_reference_model(features[usable], ridge)
    scores = _scores_with_fallback(features, ref)
    return QualityTable(samples.ids, features, scores, ref)


def write_scores_csv(
    path: str | Path, table: QualityTable, meta: Mapping[str, Any] | None = None
) -> None:
    header = ["id", "score", *(f"f{i + 1}" for i in range(NUM_FEATURES))]
    rows = (
        [int(i), float(s), *(float(v) for v in f)]
        for i, s, f in zip(table.ids, table.scores, table.features)
    )
    write_csv(path, header, rows, meta)


def read_scores_csv(path: str | Path) -> QualityTable:
    _, rows = read_csv(path)
    if not rows or "score" not in rows[0]:
        raise ValidationError(f"{path}: not a quality score file")
    ids = np.array([int(r["id"]) for r in rows], dtype=np.int64)
    scores = np.array([float(r["score"]) for r in rows])
    features = np.array(
        [[float(r[f"f{i + 1}"]) for i in range(NUM_FEATURES)] for r in rows]
    )
    order = np.argsort(ids, kind="stable")
    return QualityTable(ids[order], features[order], scores[order])
