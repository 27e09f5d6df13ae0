import sys

import numpy as np
import torch
from torch.utils.data import Dataset

from pq_multilabel.data_io import SampleSet, synthetic_dataset
from pq_multilabel.pool import TrainPair

TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def image_tensor(
    images: np.ndarray, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Scale uint8 images to [-0.5, 0.5].

    Accepts (3, H, W) or (N, 3, H, W); the layout is kept.
    """
    scaled = np.asarray(images, dtype=np.float64) / 255.0 - 0.5
    return torch.from_numpy(scaled).to(dtype)


class PairDataset(Dataset):
    """One (image, label) item per training pair.

    A sample with three labels shows up three times, once per label.
    """

    def __init__(
        self,
        samples: SampleSet,
        pairs: list[TrainPair],
        dtype: torch.dtype = torch.float32,
    ):
        self.images = image_tensor(samples.images, dtype)
        self.sample_ids = torch.tensor([p.sample_id for p in pairs], dtype=torch.long)
        self.labels = torch.tensor([p.label for p in pairs], dtype=torch.long)
        if len(pairs) and (
            self.sample_ids.min() < 0 or self.sample_ids.max() >= len(samples)
        ):
            raise IndexError("training pair references a sample outside the dataset")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, idx):
        return self.images[self.sample_ids[idx]], self.labels[idx]


if __name__ == "__main__":
    print("[ ] Testing pair dataset builder")

    n = int(sys.argv[1]) if len(sys.argv) > 1 else 20
    samples = synthetic_dataset(seed=0, n=n, num_classes=10)
    pairs = [TrainPair(i, int(y), 0) for i, y in enumerate(samples.labels)]
    ds = PairDataset(samples, pairs)

    print(f"Loaded {len(ds)} pairs")
    print("--- First item ---")
    image, label = ds[0]
    print("Image:", tuple(image.shape), f"range [{image.min():.3f}, {image.max():.3f}]")
    print("Label:", int(label))
