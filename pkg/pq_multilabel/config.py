"""Experiment configuration.

All settings live in frozen msgspec Structs so a TOML file decodes straight into
typed, validated objects. Every leaf field can be overridden from the command line
as ``--<section>.<field> <toml value>``.
"""

import hashlib
import logging
import os
import tomllib
from pathlib import Path
from typing import Any, Iterator

import msgspec

from .errors import ConfigurationError

logger = logging.getLogger(__name__)

HEADS = ("vanilla", "mc_dropout", "duq")
CONDITIONS = ("clean", "noisy_single", "human_multi", "pq_multi")
SUITES = ("rotation", "corruption")
HUMAN_LABEL_SETS = ("aggre", "random1", "random2", "random3", "worst")
CORRUPTIONS = (
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "gaussian_blur",
    "contrast",
    "brightness",
    "pixelate",
)

DEFAULT_SEVERITIES = {
    "gaussian_noise": (0.04, 0.06, 0.08, 0.09, 0.10),
    "shot_noise": (60.0, 25.0, 12.0, 5.0, 3.0),
    "impulse_noise": (0.01, 0.02, 0.03, 0.05, 0.07),
    "gaussian_blur": (0.4, 0.6, 0.8, 1.0, 1.2),
    "contrast": (0.75, 0.5, 0.4, 0.3, 0.15),
    "brightness": (0.05, 0.10, 0.15, 0.20, 0.25),
    "pixelate": (1.33, 1.6, 2.0, 2.67, 4.0),
}


class _Section(msgspec.Struct, frozen=True, kw_only=True, forbid_unknown_fields=True):
    pass


class SyntheticConfig(_Section):
    seed: int = 0
    n_train: int = 5000
    n_test: int = 1000
    side: int = 32
    noise_sigma: float = 0.05


class DataConfig(_Section):
    # empty paths select the synthetic grating dataset
    train_path: str = ""
    test_path: str = ""
    train_count: int = 50000
    test_count: int = 10000
    num_classes: int = 10
    synthetic: SyntheticConfig = msgspec.field(default_factory=SyntheticConfig)


class LabelConfig(_Section):
    noisy_single_file: str = ""
    human_multi_file: str = ""
    # which CIFAR-10-N set the noisy_single file was exported from
    human_label_set: str = "worst"
    simulate_annotators: int = 0
    annotator_noise: float = 0.4
    annotator_seed: int = 0

    def validate(self) -> None:
        if self.human_label_set not in HUMAN_LABEL_SETS:
            raise ConfigurationError(
                f"labels.human_label_set must be one of {HUMAN_LABEL_SETS}, "
                f"got {self.human_label_set!r}"
            )
        if self.simulate_annotators < 0:
            raise ConfigurationError("labels.simulate_annotators must be >= 0")
        if not 0.0 <= self.annotator_noise <= 1.0:
            raise ConfigurationError("labels.annotator_noise must lie in [0, 1]")


class QualityConfig(_Section):
    ridge: float = 1e-6
    n_jobs: int = 1


class ClusteringConfig(_Section):
    feature_mode: str = "pixel"
    seed: int = 0
    max_iter: int = 300
    tol: float = 1e-6


class PoolConfig(_Section):
    pool_frac: float = 0.40
    multi_frac: float = 0.10
    k_max: int = 3
    triple_frac: float = 0.05
    seed: int = 0
    calibrate: bool = False
    calibration_tolerance: float = 0.01

    def validate(self, num_classes: int) -> None:
        if not 0.0 <= self.pool_frac <= 1.0:
            raise ConfigurationError(
                f"pool_frac must lie in [0, 1], got {self.pool_frac}"
            )
        if self.pool_frac > 0 and not 0.0 < self.multi_frac <= self.pool_frac:
            raise ConfigurationError(
                f"need 0 < multi_frac <= pool_frac, got multi_frac={self.multi_frac}, "
                f"pool_frac={self.pool_frac}"
            )
        if not 0.0 <= self.triple_frac <= self.multi_frac:
            raise ConfigurationError(
                f"need 0 <= triple_frac <= multi_frac, got {self.triple_frac}"
            )
        if not 2 <= self.k_max <= num_classes:
            raise ConfigurationError(
                f"k_max must lie in [2, {num_classes}], got {self.k_max}"
            )


class ClassifierConfig(_Section):
    input_shape: tuple[int, int, int] = (3, 32, 32)
    conv_channels: tuple[int, ...] = (16, 32)
    kernel_size: int = 3
    dense_width: int = 64
    dropout_p: float = 0.2
    num_classes: int = 10
    seed: int = 0
    zero_head: bool = False
    dtype: str = "float32"

    def validate(self) -> None:
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError(
                f"dropout_p must lie in [0, 1), got {self.dropout_p}"
            )
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"unsupported dtype {self.dtype!r}")
        if self.kernel_size % 2 != 1:
            raise ConfigurationError("kernel_size must be odd")
        side = min(self.input_shape[1:])
        if side % (2 ** len(self.conv_channels)) != 0:
            raise ConfigurationError(
                f"input side {side} is not divisible by 2^{len(self.conv_channels)}"
            )


class DuqConfig(_Section):
    embedding_size: int = 32
    length_scale: float = 0.1
    gamma: float = 0.999

    def validate(self) -> None:
        if self.length_scale <= 0:
            raise ConfigurationError("length_scale must be positive")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in (0, 1), got {self.gamma}")


class TrainHyper(_Section):
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ConfigurationError(
                "epochs must be >= 0, batch_size and learning_rate positive"
            )
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigurationError("momentum and weight_decay must be >= 0")


class ShiftConfig(_Section):
    angles: tuple[float, ...] = tuple(float(a) for a in range(15, 181, 15))
    corruptions: tuple[str, ...] = CORRUPTIONS
    severities: dict[str, tuple[float, ...]] = msgspec.field(
        default_factory=lambda: dict(DEFAULT_SEVERITIES)
    )
    seed: int = 0

    def validate(self) -> None:
        for angle in self.angles:
            if not 0.0 < angle <= 180.0:
                raise ConfigurationError(f"rotation angle {angle} outside (0, 180]")
        for name in self.corruptions:
            if name not in CORRUPTIONS:
                raise ConfigurationError(f"unknown corruption type {name!r}")
            if len(self.severities.get(name, ())) != 5:
                raise ConfigurationError(f"corruption {name!r} needs 5 severity values")


class AcceptanceConfig(_Section):
    enabled: bool = True
    retry: bool = True
    epoch_factor: int = 2
    noise_entropy_gap: float = 0.3
    noise_accuracy_gap: float = 0.03
    framework_entropy_gap: float = 0.15
    framework_accuracy_slack: float = 0.01


class ExperimentConfig(_Section):
    data: DataConfig = msgspec.field(default_factory=DataConfig)
    labels: LabelConfig = msgspec.field(default_factory=LabelConfig)
    quality: QualityConfig = msgspec.field(default_factory=QualityConfig)
    clustering: ClusteringConfig = msgspec.field(default_factory=ClusteringConfig)
    pool: PoolConfig = msgspec.field(default_factory=PoolConfig)
    classifier: ClassifierConfig = msgspec.field(default_factory=ClassifierConfig)
    duq: DuqConfig = msgspec.field(default_factory=DuqConfig)
    hyper: TrainHyper = msgspec.field(default_factory=TrainHyper)
    shifts: ShiftConfig = msgspec.field(default_factory=ShiftConfig)
    acceptance: AcceptanceConfig = msgspec.field(default_factory=AcceptanceConfig)
    heads: tuple[str, ...] = HEADS
    conditions: tuple[str, ...] = CONDITIONS
    suites: tuple[str, ...] = SUITES
    seeds: tuple[int, ...] = (0, 1, 2)
    mc_samples: int = 20
    output_dir: str = ""

    def validate(self) -> None:
        for name, chosen, allowed in (
            ("heads", self.heads, HEADS),
            ("conditions", self.conditions, CONDITIONS),
            ("suites", self.suites, SUITES),
        ):
            if not chosen:
                raise ConfigurationError(f"at least one entry required in {name}")
            unknown = [c for c in chosen if c not in allowed]
            if unknown:
                raise ConfigurationError(
                    f"unknown {name}: {unknown}; allowed {allowed}"
                )
        if not self.seeds:
            raise ConfigurationError("at least one seed required")
        if self.classifier.num_classes != self.data.num_classes:
            raise ConfigurationError(
                f"classifier.num_classes={self.classifier.num_classes} does not match "
                f"data.num_classes={self.data.num_classes}"
            )
        if self.clustering.feature_mode not in ("pixel", "quality"):
            raise ConfigurationError(
                f"clustering.feature_mode must be pixel or quality, "
                f"got {self.clustering.feature_mode!r}"
            )
        if self.mc_samples < 1:
            raise ConfigurationError("mc_samples must be >= 1")
        self.labels.validate()
        self.pool.validate(self.data.num_classes)
        self.classifier.validate()
        self.duq.validate()
        self.hyper.validate()
        self.shifts.validate()


def default_config_path() -> str:
    return os.path.join(os.path.dirname(__file__), "desk_config.toml")


def leaf_fields(
    struct_type=ExperimentConfig, prefix: str = ""
) -> Iterator[tuple[str, Any]]:
    """Yield ``(dotted_path, field)`` for every non-Struct field, depth first."""
    for field in msgspec.structs.fields(struct_type):
        path = f"{prefix}{field.name}"
        if isinstance(field.type, type) and issubclass(field.type, msgspec.Struct):
            yield from leaf_fields(field.type, prefix=path + ".")
        else:
            yield path, field


def parse_flag_value(raw: str) -> Any:
    """Read a flag value using TOML value syntax; bare words stay strings."""
    try:
        return tomllib.loads(f"value = {raw}")["value"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_overrides(
    cfg: ExperimentConfig, overrides: dict[str, Any]
) -> ExperimentConfig:
    if not overrides:
        return cfg
    tree = msgspec.to_builtins(cfg)
    for path, value in overrides.items():
        node = tree
        *parents, leaf = path.split(".")
        for part in parents:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigurationError(f"unknown configuration section in {path!r}")
            node = node[part]
        if leaf not in node:
            raise ConfigurationError(f"unknown configuration field {path!r}")
        node[leaf] = parse_flag_value(value) if isinstance(value, str) else value
    try:
        return msgspec.convert(tree, ExperimentConfig)
    except msgspec.ValidationError as err:
        raise ConfigurationError(f"invalid override: {err}") from err


def load_config(
    path: str | os.PathLike | None = None, overrides: dict[str, Any] | None = None
) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
    else:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            cfg = msgspec.toml.decode(path.read_bytes(), type=ExperimentConfig)
        except (msgspec.ValidationError, msgspec.DecodeError) as err:
            raise ConfigurationError(f"{path}: {err}") from err
    cfg = apply_overrides(cfg, overrides or {})
    cfg.validate()
    logger.debug(f"Resolved configuration {config_digest(cfg)}")
    return cfg


def config_digest(cfg: ExperimentConfig) -> str:
    """Short hash of everything that can change a result (output_dir excluded)."""
    canonical = msgspec.json.encode(
        msgspec.structs.replace(cfg, output_dir=""), order="sorted"
    )
    return hashlib.sha256(canonical).hexdigest()[:16]
