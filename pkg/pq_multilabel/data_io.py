"""Dataset ingestion, synthetic data, CSV helpers and checkpoint persistence.

CIFAR-10 binary batches hold records of 3073 bytes: one label byte followed by
1024 red, 1024 green and 1024 blue bytes of a row-major 32x32 image. Images are
kept in that channel-planar order throughout the package, as (3, H, W) uint8
arrays.
"""

import csv
import logging
import struct
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any

import msgspec
import numpy as np
import torch

from .errors import (
    CorruptCheckpointError,
    FormatError,
    IncompatibleCheckpointError,
    ValidationError,
)

if TYPE_CHECKING:
    from .model import Classifier

logger = logging.getLogger(__name__)

CIFAR_SIDE = 32
IMAGE_BYTES = 3 * CIFAR_SIDE * CIFAR_SIDE
RECORD_BYTES = IMAGE_BYTES + 1

CHECKPOINT_MAGIC = b"PQCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Sample:
    id: int
    image: np.ndarray
    clean_label: int | None = None
    quality_score: float | None = None


@dataclass(frozen=True)
class SampleSet:
    """Immutable, numpy-backed sequence of :class:`Sample`.

    ``images`` is (N, 3, H, W) uint8, ``labels`` (N,) int64 or None, ``scores``
    (N,) float64 or None. Sample ids are the dense indices 0..N-1.
    """

    images: np.ndarray
    num_classes: int
    labels: np.ndarray | None = None
    scores: np.ndarray | None = None

    def __post_init__(self):
        images = np.asarray(self.images)
        if images.ndim != 4 or images.shape[1] != 3 or images.dtype != np.uint8:
            raise ValidationError(
                f"images must be (N, 3, H, W) uint8, got {images.shape} {images.dtype}"
            )
        images = np.ascontiguousarray(images)
        images.flags.writeable = False
        object.__setattr__(self, "images", images)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64).copy()
            if labels.shape != (len(images),):
                raise ValidationError("labels must hold one entry per image")
            if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise ValidationError(f"labels must lie in [0, {self.num_classes})")
            labels.flags.writeable = False
            object.__setattr__(self, "labels", labels)
        if self.scores is not None:
            scores = np.asarray(self.scores, dtype=np.float64).copy()
            if scores.shape != (len(images),):
                raise ValidationError("scores must hold one entry per image")
            scores.flags.writeable = False
            object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, idx: int) -> Sample:
        if not -len(self) <= idx < len(self):
            raise IndexError(idx)
        idx = idx % len(self)
        return Sample(
            id=idx,
            image=self.images[idx],
            clean_label=None if self.labels is None else int(self.labels[idx]),
            quality_score=None if self.scores is None else float(self.scores[idx]),
        )

    def __iter__(self) -> Iterator[Sample]:
        for idx in range(len(self)):
            yield self[idx]

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self))

    @property
    def side(self) -> int:
        return self.images.shape[2]

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise ValidationError("clean labels are required but absent")
        return self.labels

    def with_images(self, images: np.ndarray) -> "SampleSet":
        return SampleSet(images, self.num_classes, self.labels, None)

    def with_scores(self, scores: np.ndarray) -> "SampleSet":
        return SampleSet(self.images, self.num_classes, self.labels, scores)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], num_classes: int) -> "SampleSet":
        images = np.stack([s.image for s in samples]) if samples else np.zeros(
            (0, 3, CIFAR_SIDE, CIFAR_SIDE), np.uint8
        )
        labels = None
        if samples and all(s.clean_label is not None for s in samples):
            labels = np.array([s.clean_label for s in samples], dtype=np.int64)
        return cls(images, num_classes, labels)


@dataclass(frozen=True)
class LabelFile:
    """Ordered label lists per sample id, exactly as read from disk."""

    labels: Mapping[int, tuple[int, ...]]
    num_classes: int
    source: str = "file"
    name: str = ""

    def __len__(self) -> int:
        return len(self.labels)

    def check_covers(self, n: int) -> None:
        missing = [i for i in range(n) if i not in self.labels]
        if missing:
            raise ValidationError(
                f"label file {self.name or '<memory>'} has no labels for "
                f"{len(missing)} sample(s), first missing id {missing[0]}"
            )
        extra = [i for i in self.labels if not 0 <= i < n]
        if extra:
            raise ValidationError(
                f"label file {self.name or '<memory>'} references id {extra[0]} "
                f"outside the dataset of {n} samples"
            )

    def first_labels(self, n: int) -> np.ndarray:
        self.check_covers(n)
        return np.array([self.labels[i][0] for i in range(n)], dtype=np.int64)


def decode_cifar10_binary(raw: bytes, count: int, num_classes: int = 10) -> SampleSet:
    if count < 0:
        raise ValidationError(f"count must be >= 0, got {count}")
    available, remainder = divmod(len(raw), RECORD_BYTES)
    if remainder:
        raise FormatError(
            f"truncated record at byte offset {available * RECORD_BYTES}: "
            f"{remainder} of {RECORD_BYTES} bytes present"
        )
    if count > available:
        raise FormatError(
            f"insufficient records: {count} requested, file ends at byte offset "
            f"{len(raw)} after {available} records"
        )
    if count == 0:
        empty = np.zeros((0, 3, CIFAR_SIDE, CIFAR_SIDE), np.uint8)
        return SampleSet(empty, num_classes, np.zeros(0, np.int64))
    records = np.frombuffer(raw, dtype=np.uint8, count=count * RECORD_BYTES)
    records = records.reshape(count, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if len(bad):
        raise FormatError(
            f"label byte {labels[bad[0]]} >= {num_classes} at byte offset "
            f"{bad[0] * RECORD_BYTES}"
        )
    images = records[:, 1:].reshape(count, 3, CIFAR_SIDE, CIFAR_SIDE)
    return SampleSet(images, num_classes, labels)


def load_cifar10_binary(
    path: str | Path, count: int, num_classes: int = 10
) -> SampleSet:
    path = Path(path)
    try:
        samples = decode_cifar10_binary(path.read_bytes(), count, num_classes)
    except FormatError as err:
        raise FormatError(f"{path}: {err}") from err
    logger.info(f"[+] Loaded {len(samples)} CIFAR-10 records from {path}")
    return samples


def encode_cifar10_binary(samples: SampleSet) -> bytes:
    if samples.images.shape[2:] != (CIFAR_SIDE, CIFAR_SIDE):
        raise ValidationError(
            f"CIFAR-10 binary records hold 32x32 images, got {samples.images.shape[2:]}"
        )
    labels = samples.require_labels()
    records = np.empty((len(samples), RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = samples.images.reshape(len(samples), IMAGE_BYTES)
    return records.tobytes()


def write_cifar10_binary(path: str | Path, samples: SampleSet) -> None:
    Path(path).write_bytes(encode_cifar10_binary(samples))


def load_label_file(path: str | Path, num_classes: int) -> LabelFile:
    """Read a ``id,label1[,label2,label3]`` CSV; blank trailing cells are allowed."""
    path = Path(path)
    labels: dict[int, tuple[int, ...]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0].strip() != "id" or len(header) < 2:
            raise FormatError(f"{path}: header must start with id,label1")
        for row_number, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                sample_id = int(row[0])
                cells = [cell.strip() for cell in row[1:]]
                values = tuple(int(cell) for cell in cells if cell)
            except ValueError as err:
                raise ValidationError(f"{path}: row {row_number}: {err}") from err
            where = f"{path}: row {row_number}"
            if not values:
                raise ValidationError(f"{where}: no labels for id {sample_id}")
            if sample_id in labels:
                raise ValidationError(f"{where}: duplicate id {sample_id}")
            for value in values:
                if not 0 <= value < num_classes:
                    raise ValidationError(
                        f"{where}: label {value} outside [0, {num_classes})"
                    )
            labels[sample_id] = values
    logger.info(f"[+] Loaded {len(labels)} label rows from {path}")
    return LabelFile(labels, num_classes, source="file", name=str(path))


def write_label_file(path: str | Path, label_file: LabelFile) -> None:
    width = max((len(v) for v in label_file.labels.values()), default=1)
    header = ["id"] + [f"label{i + 1}" for i in range(width)]
    rows = []
    for sample_id in sorted(label_file.labels):
        values = list(label_file.labels[sample_id])
        rows.append([sample_id, *values, *[""] * (width - len(values))])
    write_csv(path, header, rows)


def synthetic_dataset(
    seed: int,
    n: int,
    num_classes: int,
    side: int = CIFAR_SIDE,
    noise_sigma: float = 0.05,
) -> SampleSet:
    """Oriented sinusoidal gratings, one orientation per class.

    Class c is drawn at c * 180 / C degrees with a random phase, a contrast drawn
    from [0.3, 1.0] and seeded Gaussian pixel noise.
    """
    if n < num_classes:
        raise ValidationError(f"need n >= C, got n={n}, C={num_classes}")
    if side < 8:
        raise ValidationError(f"side must be >= 8, got {side}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    angles = np.deg2rad(labels * (180.0 / num_classes))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n)
    contrasts = rng.uniform(0.3, 1.0, size=n)
    frequency = 4.0 / side

    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    # projection of every pixel on each sample's grating normal
    proj = (
        xx[None] * np.cos(angles)[:, None, None]
        + yy[None] * np.sin(angles)[:, None, None]
    )
    grating = np.sin(2.0 * np.pi * frequency * proj + phases[:, None, None])
    planes = 0.5 + 0.5 * contrasts[:, None, None] * grating
    images = planes[:, None] + rng.normal(0.0, noise_sigma, size=(n, 3, side, side))
    images = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    return SampleSet(images, num_classes, labels)


def write_csv(
    path: str | Path,
    header: Sequence[str],
    rows: Iterable[Sequence[Any]],
    meta: Mapping[str, Any] | None = None,
) -> None:
    """UTF-8, LF-terminated CSV with optional leading ``# key=value`` lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        for key, value in (meta or {}).items():
            f.write(f"# {key}={value}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(cell) for cell in row])


def format_cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def read_csv(path: str | Path) -> tuple[dict[str, str], list[dict[str, str]]]:
    """Return ``(meta, rows)`` for a file written by :func:`write_csv`."""
    meta: dict[str, str] = {}
    body = []
    with open(path, newline="", encoding="utf-8") as f:
        for line in f:
            if line.startswith("# "):
                key, _, value = line[2:].rstrip("\n").partition("=")
                meta[key] = value
            else:
                body.append(line)
    return meta, list(csv.DictReader(body))


class _TensorEntry(msgspec.Struct, frozen=True):
    name: str
    shape: tuple[int, ...]
    dtype: str


class _Manifest(msgspec.Struct, frozen=True):
    classifier: dict[str, Any]
    duq: dict[str, Any] | None
    tensors: tuple[_TensorEntry, ...]


_HEADER = struct.Struct("<4sHI")


def save_checkpoint(model: "Classifier") -> bytes:
    """Serialize a classifier: magic, version, msgpack manifest, raw LE tensors."""
    entries = []
    payload = []
    for name, tensor in model.state_dict().items():
        array = tensor.detach().cpu().numpy()
        if not np.all(np.isfinite(array)):
            raise ValidationError(f"parameter {name} holds non-finite values")
        le = array.astype(array.dtype.newbyteorder("<"), copy=False)
        entries.append(_TensorEntry(name, tuple(array.shape), le.dtype.str))
        payload.append(np.ascontiguousarray(le).tobytes())
    manifest = _Manifest(
        classifier=msgspec.to_builtins(model.cfg),
        duq=None if model.duq_cfg is None else msgspec.to_builtins(model.duq_cfg),
        tensors=tuple(entries),
    )
    encoded = msgspec.msgpack.encode(manifest)
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(encoded))
    return header + encoded + b"".join(payload)


def load_checkpoint(data: bytes) -> "Classifier":
    from .config import ClassifierConfig, DuqConfig
    from .model import build_classifier

    if len(data) < _HEADER.size:
        raise CorruptCheckpointError(f"checkpoint of {len(data)} bytes has no header")
    magic, version, manifest_len = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(
            f"checkpoint version {version}, "
            f"this build reads version {CHECKPOINT_VERSION}"
        )
    start = _HEADER.size
    try:
        manifest = msgspec.msgpack.decode(
            data[start : start + manifest_len], type=_Manifest
        )
        cfg = msgspec.convert(manifest.classifier, ClassifierConfig)
        duq_cfg = None
        if manifest.duq is not None:
            duq_cfg = msgspec.convert(manifest.duq, DuqConfig)
    except (msgspec.DecodeError, msgspec.ValidationError) as err:
        raise CorruptCheckpointError(f"unreadable checkpoint manifest: {err}") from err

    model = build_classifier(cfg, duq_cfg)
    expected = {name: tuple(t.shape) for name, t in model.state_dict().items()}
    stored = {entry.name: entry.shape for entry in manifest.tensors}
    if expected != stored:
        raise CorruptCheckpointError(
            "shape manifest does not match the architecture described by the checkpoint"
        )

    offset = start + manifest_len
    state = {}
    for entry in manifest.tensors:
        dtype = np.dtype(entry.dtype)
        nbytes = dtype.itemsize * int(np.prod(entry.shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise CorruptCheckpointError(
                f"checkpoint truncated inside tensor {entry.name}"
            )
        count = nbytes // dtype.itemsize
        array = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        state[entry.name] = array.reshape(entry.shape).astype(dtype.newbyteorder("="))
        offset += nbytes
    if offset != len(data):
        raise CorruptCheckpointError(
            f"{len(data) - offset} trailing bytes after last tensor"
        )

    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in state.items()})
    return model
