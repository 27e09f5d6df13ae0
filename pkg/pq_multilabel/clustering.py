"""K-means label model.

One centroid per class is fitted on the training features, each centroid is mapped
to a distinct class by greedy majority vote, and a pooled sample's candidate labels
are the classes of its nearest centroids.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .data_io import SampleSet, write_csv
from .errors import ConfigurationError, ValidationError
from .quality import to_luminance

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class KMeansModel:
    centroids: np.ndarray
    inertia: float
    assignment: np.ndarray
    n_iter: int
    inertia_history: tuple[float, ...] = ()
    centroid_class: np.ndarray | None = None

    @property
    def k(self) -> int:
        return len(self.centroids)


def extract_features(
    samples: SampleSet, mode: str = "pixel", quality_features: np.ndarray | None = None
) -> np.ndarray:
    """Clustering features, one row per sample.

    ``pixel`` flattens the luminance plane. ``quality`` standardises the 36 quality
    features per dimension over the corpus; degenerate rows land on the corpus mean.
    """
    if mode == "pixel":
        if len(samples) == 0:
            return np.zeros((0, samples.images.shape[2] * samples.images.shape[3]))
        return np.stack([to_luminance(image).ravel() for image in samples.images])
    if mode == "quality":
        if quality_features is None:
            from .quality import extract_corpus_features

            quality_features = extract_corpus_features(samples)
        features = np.asarray(quality_features, dtype=np.float64)
        mean = np.nanmean(features, axis=0)
        std = np.nanstd(features, axis=0)
        std = np.where(std > 0, std, 1.0)
        standardised = (features - mean) / std
        return np.where(np.isnan(standardised), 0.0, standardised)
    raise ConfigurationError(f"unknown feature mode {mode!r}")


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(points * points, axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(centroids * centroids, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def kmeans_plusplus_init(
    points: np.ndarray, k: int, rng: np.random.Generator
) -> np.ndarray:
    n = len(points)
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(0, n)]
    closest = _squared_distances(points, centroids[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total > 0:
            next_idx = rng.choice(n, p=closest / total)
        else:
            next_idx = rng.integers(0, n)
        centroids[i] = points[next_idx]
        latest = _squared_distances(points, centroids[i : i + 1])[:, 0]
        closest = np.minimum(closest, latest)
    return centroids


def kmeans_fit(
    points: np.ndarray, k: int, seed: int, max_iter: int = 300, tol: float = 1e-6
) -> KMeansModel:
    """k-means++ seeding followed by Lloyd iterations."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValidationError(f"points must be a 2-D array, got shape {points.shape}")
    if not np.all(np.isfinite(points)):
        raise ValidationError("points contain non-finite values")
    n = len(points)
    if k < 2 or n < k:
        raise ValidationError(f"need n >= k >= 2, got n={n}, k={k}")
    rng = np.random.default_rng(seed)
    centroids = kmeans_plusplus_init(points, k, rng)
    history: list[float] = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = _squared_distances(points, centroids)
        assignment = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(n), assignment].sum())
        if history and inertia > history[-1] * (1 + 1e-9) + 1e-9:
            raise RuntimeError(
                f"Lloyd inertia increased at iteration {n_iter}: "
                f"{history[-1]} -> {inertia}"
            )
        history.append(inertia)

        new_centroids = np.empty_like(centroids)
        own = d2[np.arange(n), assignment]
        for j in range(k):
            members = assignment == j
            if np.any(members):
                new_centroids[j] = points[members].mean(axis=0)
            else:
                # re-seed on the point farthest from its own centroid
                far = int(np.argmax(own))
                new_centroids[j] = points[far]
                own[far] = 0.0
                logger.debug(f"Empty cluster {j} re-seeded at point {far}")
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if shift < tol:
            break

    d2 = _squared_distances(points, centroids)
    assignment = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(n), assignment].sum())
    if inertia > history[-1] * (1 + 1e-9) + 1e-9:
        raise RuntimeError(
            f"Lloyd inertia increased in the final assignment: {inertia}"
        )
    history.append(inertia)
    logger.info(
        f"[+] K-means converged after {n_iter} iterations, inertia {inertia:.6g}"
    )
    return KMeansModel(centroids, inertia, assignment, n_iter, tuple(history))


def greedy_vote_assignment(votes: np.ndarray) -> np.ndarray:
    """Distinct centroid -> class mapping, largest vote first.

    Ties go to the lower centroid index, then the lower class id.
    """
    votes = np.asarray(votes, dtype=np.float64)
    k, c = votes.shape
    masked = votes.copy()
    mapping = np.full(k, -1, dtype=np.int64)
    for _ in range(min(k, c)):
        flat = int(np.argmax(masked))
        row, col = divmod(flat, c)
        mapping[row] = col
        masked[row, :] = -np.inf
        masked[:, col] = -np.inf
    return mapping


def label_centroids(
    model: KMeansModel, points: np.ndarray, clean_labels: np.ndarray, num_classes: int
) -> KMeansModel:
    if model.k != num_classes:
        raise ConfigurationError(
            f"label generation needs k = C, got k={model.k}, C={num_classes}"
        )
    points = np.asarray(points, dtype=np.float64)
    assignment = np.argmin(_squared_distances(points, model.centroids), axis=1)
    votes = np.zeros((model.k, num_classes), dtype=np.int64)
    np.add.at(votes, (assignment, np.asarray(clean_labels, dtype=np.int64)), 1)
    return replace(model, centroid_class=greedy_vote_assignment(votes))


def generate_labels(x: np.ndarray, model: KMeansModel, m: int) -> list[int]:
    """Classes of the ``m`` nearest centroids, nearest first."""
    if model.centroid_class is None:
        raise ConfigurationError("centroids have not been assigned classes")
    if not 1 <= m <= model.k:
        raise ValidationError(f"m must lie in [1, {model.k}], got {m}")
    diff = model.centroids - np.asarray(x, dtype=np.float64)
    d2 = np.sum(diff * diff, axis=1)
    order = np.argsort(d2, kind="stable")
    return [int(c) for c in model.centroid_class[order[:m]]]


def fit_label_model(
    samples: SampleSet,
    mode: str = "pixel",
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-6,
    quality_features: np.ndarray | None = None,
) -> tuple[KMeansModel, np.ndarray]:
    """Fit k = C centroids and label them; returns the model and the feature rows."""
    features = extract_features(samples, mode, quality_features)
    logger.info(
        f"[+] Fitting {samples.num_classes}-means on {features.shape} {mode} features"
    )
    model = kmeans_fit(features, samples.num_classes, seed, max_iter, tol)
    model = label_centroids(
        model, features, samples.require_labels(), samples.num_classes
    )
    return model, features


def write_kmeans_csv(
    path: str | Path, model: KMeansModel, meta: Mapping[str, Any] | None = None
) -> None:
    width = model.centroids.shape[1]
    header = ["centroid", "class", *(f"x{i + 1}" for i in range(width))]
    classes = (
        model.centroid_class
        if model.centroid_class is not None
        else np.full(model.k, -1, dtype=np.int64)
    )
    rows = (
        [j, int(classes[j]), *(float(v) for v in model.centroids[j])]
        for j in range(model.k)
    )
    write_csv(path, header, rows, meta)
