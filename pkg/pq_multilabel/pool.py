"""Training-label conditions and the perceptual-quality pool.

The pool is the top slice of the quality ranking. Its most uncertain members get
three generated labels, the next ones two, the rest one; every other sample keeps
its clean label. A sample with m labels is trained on as m (image, label) pairs.
"""

import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path
from typing import Any, NamedTuple

import msgspec
import numpy as np

from .config import PoolConfig
from .data_io import LabelFile, SampleSet, write_csv
from .errors import ConfigurationError, ValidationError

logger = logging.getLogger(__name__)

Labeler = Callable[[int, int], Sequence[int]]


class Provenance(StrEnum):
    CLEAN = "clean"
    GENERATED = "generated"
    HUMAN = "human"
    SYNTHETIC = "synthetic"


class TrainPair(NamedTuple):
    sample_id: int
    label: int
    replication: int


@dataclass(frozen=True)
class MultiLabelDataset:
    samples: SampleSet
    labels: tuple[tuple[int, ...], ...]
    provenance: tuple[Provenance, ...]
    condition: str = "clean"

    def __post_init__(self):
        n = len(self.samples)
        if len(self.labels) != n or len(self.provenance) != n:
            raise ValidationError(
                "one label list and provenance tag per sample required"
            )
        for sample_id, labels in enumerate(self.labels):
            if not labels:
                raise ValidationError(f"sample {sample_id} has an empty label list")

    @property
    def pool_ids(self) -> np.ndarray:
        return np.array(
            [i for i, tag in enumerate(self.provenance) if tag != Provenance.CLEAN],
            dtype=np.int64,
        )

    @property
    def num_labels(self) -> np.ndarray:
        return np.array([len(labels) for labels in self.labels], dtype=np.int64)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def pool_sizes(n: int, cfg: PoolConfig) -> tuple[int, int, int]:
    """``(pool, triple, double)`` counts for a dataset of ``n`` samples."""
    pool = _round_half_up(cfg.pool_frac * n)
    triple = min(_round_half_up(cfg.triple_frac * n), pool)
    multi = min(_round_half_up(cfg.multi_frac * n), pool)
    return pool, triple, max(multi - triple, 0)


def clean_condition(samples: SampleSet) -> MultiLabelDataset:
    labels = samples.require_labels()
    return MultiLabelDataset(
        samples,
        tuple((int(y),) for y in labels),
        tuple(Provenance.CLEAN for _ in labels),
        condition="clean",
    )


def build_pool(
    samples: SampleSet, ranking: Sequence[int], cfg: PoolConfig, labeler: Labeler
) -> MultiLabelDataset:
    clean = samples.require_labels()
    n = len(samples)
    ranking = np.asarray(ranking, dtype=np.int64)
    if len(ranking) != n or not np.array_equal(np.sort(ranking), np.arange(n)):
        raise ValidationError("ranking must be a permutation of the dataset ids")
    cfg.validate(samples.num_classes)
    n_pool, n_triple, n_double = pool_sizes(n, cfg)
    top_m = min(3, cfg.k_max)

    labels: list[tuple[int, ...]] = [(int(y),) for y in clean]
    provenance = [Provenance.CLEAN] * n
    for rank, sample_id in enumerate(ranking[:n_pool]):
        if rank < n_triple:
            m = top_m
        elif rank < n_triple + n_double:
            m = 2
        else:
            m = 1
        generated = tuple(int(y) for y in labeler(int(sample_id), m))
        if len(generated) != m:
            raise ValidationError(
                f"labeler returned {len(generated)} labels, expected {m}"
            )
        labels[sample_id] = generated
        provenance[sample_id] = Provenance.GENERATED
    logger.info(
        f"[+] Pool of {n_pool}/{n} samples: {n_triple} x{top_m}, {n_double} x2, "
        f"{n_pool - n_triple - n_double} x1"
    )
    return MultiLabelDataset(
        samples, tuple(labels), tuple(provenance), condition="pq_multi"
    )


def replicate(mld: MultiLabelDataset) -> list[TrainPair]:
    return [
        TrainPair(sample_id, label, rep)
        for sample_id, labels in enumerate(mld.labels)
        for rep, label in enumerate(labels)
    ]


def disagreement_rate(
    mld: MultiLabelDataset, clean_labels: np.ndarray | None = None
) -> float:
    """Fraction of training pairs whose label differs from the sample's clean label."""
    if clean_labels is None:
        clean = mld.samples.require_labels()
    else:
        clean = np.asarray(clean_labels)
    if len(clean) != len(mld.samples):
        raise ValidationError("clean labels must cover every sample")
    pairs = replicate(mld)
    if not pairs:
        return 0.0
    wrong = sum(1 for pair in pairs if pair.label != clean[pair.sample_id])
    return wrong / len(pairs)


def simulate_annotators(
    samples: SampleSet, num_annotators: int, noise_rate: float, seed: int
) -> LabelFile:
    """Independent simulated annotators that each mislabel at ``noise_rate``.

    A mislabel is a uniformly drawn class different from the clean one.
    """
    if num_annotators < 1:
        raise ConfigurationError("num_annotators must be >= 1")
    if not 0.0 <= noise_rate <= 1.0:
        raise ConfigurationError(f"noise_rate must lie in [0, 1], got {noise_rate}")
    clean = samples.require_labels()
    c = samples.num_classes
    rng = np.random.default_rng(seed)
    flips = rng.random((len(clean), num_annotators)) < noise_rate
    offsets = rng.integers(1, c, size=(len(clean), num_annotators))
    annotations = np.where(flips, (clean[:, None] + offsets) % c, clean[:, None])
    labels = {i: tuple(int(v) for v in row) for i, row in enumerate(annotations)}
    name = f"simulated:{num_annotators}x{noise_rate}"
    return LabelFile(labels, c, source="simulated", name=name)


def _label_provenance(label_file: LabelFile) -> Provenance:
    return Provenance.HUMAN if label_file.source == "file" else Provenance.SYNTHETIC


def build_condition(
    condition: str,
    samples: SampleSet,
    label_files: Mapping[str, LabelFile],
    cfg: PoolConfig,
    ranking: Sequence[int] | None = None,
    labeler: Labeler | None = None,
) -> MultiLabelDataset:
    """Label set for one training condition.

    ``label_files`` maps ``noisy_single`` / ``human_multi`` to their sources.
    """
    if condition == "clean":
        return clean_condition(samples)
    if condition in ("noisy_single", "human_multi"):
        label_file = label_files.get(condition)
        if label_file is None:
            raise ConfigurationError(f"condition {condition} requires a label file")
        label_file.check_covers(len(samples))
        tag = _label_provenance(label_file)
        if condition == "noisy_single":
            lists = tuple((int(y),) for y in label_file.first_labels(len(samples)))
        else:
            lists = tuple(tuple(label_file.labels[i]) for i in range(len(samples)))
        return MultiLabelDataset(samples, lists, tuple(tag for _ in lists), condition)
    if condition == "pq_multi":
        if ranking is None or labeler is None:
            raise ConfigurationError(
                "condition pq_multi requires a quality ranking and a labeler"
            )
        if cfg.calibrate and "noisy_single" in label_files:
            target_mld = build_condition("noisy_single", samples, label_files, cfg)
            mld, _ = calibrate_pool(
                samples, ranking, cfg, labeler, disagreement_rate(target_mld)
            )
            return mld
        return build_pool(samples, ranking, cfg, labeler)
    raise ConfigurationError(f"unknown condition {condition!r}")


def calibrate_pool(
    samples: SampleSet,
    ranking: Sequence[int],
    cfg: PoolConfig,
    labeler: Labeler,
    target_rate: float,
) -> tuple[MultiLabelDataset, PoolConfig]:
    """Bisect ``pool_frac`` on a 0.01 grid until the disagreement matches the target.

    The search spans [multi_frac, 1] in both directions from the configured
    fraction, assuming the disagreement does not fall as the pool grows. The
    closest fraction wins; the configured one is kept unless another is strictly
    closer.
    """
    trials: dict[int, tuple[float, MultiLabelDataset, PoolConfig]] = {}

    def trial(step: int) -> tuple[float, MultiLabelDataset, PoolConfig]:
        if step not in trials:
            current = msgspec.structs.replace(cfg, pool_frac=step / 100)
            mld = build_pool(samples, ranking, current, labeler)
            trials[step] = (disagreement_rate(mld), mld, current)
        return trials[step]

    start = build_pool(samples, ranking, cfg, labeler)
    best = (abs(disagreement_rate(start) - target_rate), start, cfg)
    if best[0] > cfg.calibration_tolerance:
        lowest = math.ceil(round(cfg.multi_frac * 100, 6))
        lo, hi = lowest, 100
        # smallest step whose rate reaches the target, or 100
        while lo < hi:
            mid = (lo + hi) // 2
            if trial(mid)[0] >= target_rate:
                hi = mid
            else:
                lo = mid + 1
        for step in (lo - 1, lo):
            if step >= lowest:
                rate, mld, current = trial(step)
                if abs(rate - target_rate) < best[0]:
                    best = (abs(rate - target_rate), mld, current)
    gap, mld, current = best
    if gap > cfg.calibration_tolerance:
        logger.warning(
            f"Pool calibration stopped {gap:.4f} away from the target disagreement "
            f"{target_rate:.4f} at pool_frac={current.pool_frac:.2f}"
        )
    else:
        logger.info(f"[+] Calibrated pool_frac={current.pool_frac:.2f} (gap {gap:.4f})")
    return mld, current


def write_pairs_csv(
    path: str | Path, mld: MultiLabelDataset, meta: Mapping[str, Any] | None = None
) -> None:
    rows = (
        [pair.sample_id, pair.label, mld.provenance[pair.sample_id].value]
        for pair in replicate(mld)
    )
    write_csv(path, ["id", "label", "provenance"], rows, meta)


def write_pool_manifest(
    path: str | Path,
    mld: MultiLabelDataset,
    ranking: Sequence[int] | None = None,
    scores: np.ndarray | None = None,
    meta: Mapping[str, Any] | None = None,
) -> None:
    """One row per sample in ranking order.

    Rank and score stay blank when no ranking is given.
    """
    n = len(mld.samples)
    order = np.arange(n) if ranking is None else np.asarray(ranking)
    rows = []
    for rank, sample_id in enumerate(order):
        rows.append(
            [
                int(sample_id),
                "" if ranking is None else rank,
                "" if scores is None else float(scores[sample_id]),
                len(mld.labels[sample_id]),
            ]
        )
    write_csv(path, ["id", "rank", "score", "num_labels"], rows, meta)
