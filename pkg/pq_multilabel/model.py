"""Small convolutional classifier and its three prediction heads.

The network is conv blocks (conv, ReLU, 2x2 max-pool), a flatten, inverted
dropout, and one dense ReLU layer whose activations are the features. A linear
layer on the features gives the vanilla and MC-Dropout heads; the DUQ head
replaces it with per-class RBF kernels around moving centroids.

Dropout only fires when a ``torch.Generator`` is passed to ``forward`` so every
stochastic pass is a pure function of its seed.
"""

import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Mapping, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import entr
from torch import nn
from torch.utils.data import DataLoader
from tqdm import tqdm

from dataset.dataset import TORCH_DTYPES, PairDataset, image_tensor

from .config import ClassifierConfig, DuqConfig, TrainHyper
from .data_io import SampleSet, write_csv
from .errors import ConfigurationError, TrainingError, ValidationError
from .pool import TrainPair

logger = logging.getLogger(__name__)

INFERENCE_BATCH = 256
KERNEL_FLOOR = 1e-30


class EpochLog(NamedTuple):
    epoch: int
    loss: float
    train_acc: float


class DuqPrediction(NamedTuple):
    kernels: np.ndarray
    probs: np.ndarray
    underflow: np.ndarray


class InvertedDropout(nn.Module):
    def __init__(self, p: float):
        super().__init__()
        self.p = p

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None):
        if generator is None or self.p == 0.0:
            return x
        keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= self.p
        return x * keep / (1.0 - self.p)


class DuqHead(nn.Module):
    """Per-class maps W_c (m x d) and centroids e_c (m) for RBF kernels."""

    def __init__(self, in_features: int, num_classes: int, cfg: DuqConfig):
        super().__init__()
        self.cfg = cfg
        self.W = nn.Parameter(torch.empty(num_classes, cfg.embedding_size, in_features))
        nn.init.kaiming_normal_(self.W, nonlinearity="relu")
        self.register_buffer(
            "centroids", torch.normal(0.0, 0.05, size=(num_classes, cfg.embedding_size))
        )

    def embed(self, features: torch.Tensor) -> torch.Tensor:
        return torch.einsum("cmd,nd->ncm", self.W, features)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        z = self.embed(features)
        mean_sq = ((z - self.centroids.unsqueeze(0)) ** 2).mean(dim=-1)
        return torch.exp(-mean_sq / (2.0 * self.cfg.length_scale**2))

    @torch.no_grad()
    def update_centroids(self, features: torch.Tensor, labels: torch.Tensor) -> None:
        z = self.embed(features)
        gamma = self.cfg.gamma
        for c in torch.unique(labels).tolist():
            batch_mean = z[labels == c, c].mean(dim=0)
            self.centroids[c] = gamma * self.centroids[c] + (1.0 - gamma) * batch_mean


class Classifier(nn.Module):
    def __init__(self, cfg: ClassifierConfig, duq_cfg: DuqConfig | None = None):
        super().__init__()
        self.cfg = cfg
        self.duq_cfg = duq_cfg
        channels, height, width = cfg.input_shape
        convs = []
        for out_channels in cfg.conv_channels:
            convs.append(
                nn.Conv2d(
                    channels,
                    out_channels,
                    cfg.kernel_size,
                    padding=cfg.kernel_size // 2,
                )
            )
            channels = out_channels
            height, width = height // 2, width // 2
        self.convs = nn.ModuleList(convs)
        self.dropout = InvertedDropout(cfg.dropout_p)
        self.dense = nn.Linear(channels * height * width, cfg.dense_width)
        if duq_cfg is None:
            self.head: nn.Module = nn.Linear(cfg.dense_width, cfg.num_classes)
            if cfg.zero_head:
                nn.init.zeros_(self.head.weight)
                nn.init.zeros_(self.head.bias)
        else:
            self.head = DuqHead(cfg.dense_width, cfg.num_classes, duq_cfg)
        self.history: list[EpochLog] = []

    @property
    def is_duq(self) -> bool:
        return isinstance(self.head, DuqHead)

    @property
    def dtype(self) -> torch.dtype:
        return TORCH_DTYPES[self.cfg.dtype]

    def features(
        self, x: torch.Tensor, generator: torch.Generator | None = None
    ) -> torch.Tensor:
        for conv in self.convs:
            x = F.max_pool2d(F.relu(conv(x)), 2)
        x = self.dropout(torch.flatten(x, 1), generator)
        return F.relu(self.dense(x))

    def forward(
        self, x: torch.Tensor, generator: torch.Generator | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """``(features, outputs)``: logits for a linear head, kernels for DUQ."""
        f = self.features(x, generator)
        return f, self.head(f)


def build_classifier(
    cfg: ClassifierConfig, duq_cfg: DuqConfig | None = None
) -> Classifier:
    cfg.validate()
    if duq_cfg is not None:
        duq_cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = Classifier(cfg, duq_cfg)
    return model.to(TORCH_DTYPES[cfg.dtype])


def _as_batch(model: Classifier, images: np.ndarray | torch.Tensor) -> torch.Tensor:
    if isinstance(images, np.ndarray):
        if images.dtype == np.uint8:
            images = image_tensor(images, model.dtype)
        else:
            images = torch.from_numpy(images)
    x = images.to(model.dtype)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or tuple(x.shape[1:]) != tuple(model.cfg.input_shape):
        raise ValidationError(
            f"input of shape {tuple(x.shape)} does not match the configured "
            f"{tuple(model.cfg.input_shape)}"
        )
    return x


def forward(
    model: Classifier, images: np.ndarray | torch.Tensor
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic pass; returns (features, logits or kernels) as float64 arrays."""
    x = _as_batch(model, images)
    with torch.no_grad():
        f, out = model(x)
    return f.double().numpy(), out.double().numpy()


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _batched_outputs(
    model: Classifier, x: torch.Tensor, generator: torch.Generator | None = None
) -> np.ndarray:
    chunks = []
    with torch.no_grad():
        for start in range(0, len(x), INFERENCE_BATCH):
            _, out = model(x[start : start + INFERENCE_BATCH], generator)
            chunks.append(out.double().numpy())
    if not chunks:
        return np.zeros((0, model.cfg.num_classes))
    return np.concatenate(chunks)


def predict(model: Classifier, images: np.ndarray | torch.Tensor) -> np.ndarray:
    if model.is_duq:
        raise ConfigurationError("predict needs a linear head; use duq_predict")
    return softmax(_batched_outputs(model, _as_batch(model, images)))


def _stochastic_passes(
    model: Classifier, images: np.ndarray | torch.Tensor, samples: int, seed: int
) -> np.ndarray:
    """Softmax outputs of ``samples`` dropout-active passes, shape (T, N, C)."""
    x = _as_batch(model, images)
    generator = torch.Generator().manual_seed(seed)
    passes = [softmax(_batched_outputs(model, x, generator)) for _ in range(samples)]
    return np.stack(passes)


def mc_dropout_predict(
    model: Classifier,
    images: np.ndarray | torch.Tensor,
    samples: int = 20,
    seed: int = 0,
) -> np.ndarray:
    if model.cfg.dropout_p == 0.0:
        raise ConfigurationError("MC-Dropout needs dropout_p > 0")
    if model.is_duq:
        raise ConfigurationError("MC-Dropout needs a linear head")
    if samples < 1:
        raise ConfigurationError("MC-Dropout needs at least one pass")
    return _stochastic_passes(model, images, samples, seed).mean(axis=0)


def duq_kernels(model: Classifier, features: np.ndarray) -> np.ndarray:
    """K_c = exp(-||W_c f - e_c||^2 / (2 m sigma^2)) in float64."""
    head = model.head
    if not isinstance(head, DuqHead):
        raise ConfigurationError("model has no DUQ head")
    W = head.W.detach().double().numpy()
    e = head.centroids.detach().double().numpy()
    z = np.einsum("cmd,nd->ncm", W, np.asarray(features, dtype=np.float64))
    sq = np.sum((z - e[None]) ** 2, axis=-1)
    m = W.shape[1]
    return np.exp(-sq / (2.0 * m * head.cfg.length_scale**2))


def duq_predict(model: Classifier, images: np.ndarray | torch.Tensor) -> DuqPrediction:
    x = _as_batch(model, images)
    features = []
    with torch.no_grad():
        for start in range(0, len(x), INFERENCE_BATCH):
            features.append(model.features(x[start : start + INFERENCE_BATCH]).double())
    if features:
        f = torch.cat(features).numpy()
    else:
        f = np.zeros((0, model.cfg.dense_width))
    kernels = duq_kernels(model, f)
    total = kernels.sum(axis=1, keepdims=True)
    underflow = total[:, 0] < KERNEL_FLOOR
    c = model.cfg.num_classes
    normalised = kernels / np.maximum(total, KERNEL_FLOOR)
    probs = np.where(underflow[:, None], 1.0 / c, normalised)
    if underflow.any():
        logger.warning(
            f"DUQ kernel sum underflowed on {int(underflow.sum())} input(s); "
            "reporting a uniform distribution for them"
        )
    return DuqPrediction(kernels, probs, underflow)


def entropy(p: np.ndarray) -> np.ndarray:
    """Shannon entropy in bits along the last axis, with 0 log 0 = 0."""
    return entr(np.asarray(p, dtype=np.float64)).sum(axis=-1) / np.log(2.0)


def _seeds(seed: int) -> tuple[int, int]:
    shuffle_seed, dropout_seed = np.random.SeedSequence(seed).generate_state(2)
    return int(shuffle_seed), int(dropout_seed)


def train(
    pairs: Sequence[TrainPair],
    samples: SampleSet,
    cfg: ClassifierConfig,
    hyper: TrainHyper,
    head: str = "vanilla",
    duq_cfg: DuqConfig | None = None,
    progress: bool = False,
) -> Classifier:
    """SGD with momentum over seeded-shuffled pairs.

    ``head`` is ``vanilla`` (cross-entropy on logits; also serves MC-Dropout) or
    ``duq`` (per-class binary cross-entropy on the kernels plus a centroid moving
    average per batch).
    """
    if not pairs:
        raise ValidationError("training needs at least one pair")
    if head not in ("vanilla", "duq"):
        raise ConfigurationError(f"unknown training head {head!r}")
    hyper.validate()
    if tuple(cfg.input_shape) != (3, samples.side, samples.images.shape[3]):
        raise ValidationError(
            f"classifier input {cfg.input_shape} does not match images "
            f"{samples.images.shape[1:]}"
        )
    duq = (duq_cfg or DuqConfig()) if head == "duq" else None
    model = build_classifier(cfg, duq)
    if hyper.epochs == 0:
        return model

    shuffle_seed, dropout_seed = _seeds(hyper.seed)
    loader = DataLoader(
        PairDataset(samples, list(pairs), model.dtype),
        batch_size=hyper.batch_size,
        shuffle=True,
        generator=torch.Generator().manual_seed(shuffle_seed),
    )
    dropout_gen = torch.Generator().manual_seed(dropout_seed)
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=hyper.learning_rate,
        momentum=hyper.momentum,
        weight_decay=hyper.weight_decay,
    )
    c = cfg.num_classes

    epochs = range(1, hyper.epochs + 1)
    for epoch in tqdm(epochs, desc=f"train {head}", disable=not progress):
        model.train()
        total_loss, correct, seen = 0.0, 0, 0
        for batch, (x, y) in enumerate(loader, start=1):
            optimizer.zero_grad()
            features, out = model(x, dropout_gen)
            if duq is None:
                loss = F.cross_entropy(out, y)
            else:
                target = F.one_hot(y, c).to(out.dtype)
                loss = F.binary_cross_entropy(out, target, reduction="sum") / len(y)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss.item()} at epoch {epoch}, batch {batch}"
                )
            loss.backward()
            optimizer.step()
            if duq is not None:
                with torch.no_grad():
                    model.head.update_centroids(model.features(x), y)
            total_loss += loss.item() * len(y)
            correct += int((out.argmax(dim=1) == y).sum())
            seen += len(y)
        model.eval()
        if model.is_duq and not torch.all(torch.isfinite(model.head.centroids)):
            raise TrainingError(f"DUQ centroids became non-finite at epoch {epoch}")
        log = EpochLog(epoch, total_loss / seen, correct / seen)
        model.history.append(log)
        logger.debug(
            f"epoch {epoch}: loss {log.loss:.4f}, train acc {log.train_acc:.4f}"
        )
    logger.info(
        f"[+] Trained {head} head for {hyper.epochs} epochs on {len(pairs)} pairs, "
        f"final loss {model.history[-1].loss:.4f}"
    )
    return model


def write_training_log(
    path: str | Path, history: Sequence[EpochLog], meta: Mapping[str, Any] | None = None
) -> None:
    write_csv(
        path,
        ["epoch", "loss", "train_acc"],
        ([h.epoch, h.loss, h.train_acc] for h in history),
        meta,
    )
