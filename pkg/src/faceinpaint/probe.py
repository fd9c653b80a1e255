"""Eyebrow-thickness probe: a small classifier over a crop around the edit region.

The probe stands in for human judgement of whether an edit matches its prompt.
It is trained on clean synthetic faces whose thickness bucket is known and is
only emitted when its held-out accuracy clears ``MIN_ACCURACY``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import masks as mt
from .checkpoint import read_manifest, read_tensors, write_archive
from .dataset import ATTR_CLASSES, SyntheticFaceSpec, generate_face
from .errors import LoadError, ProbeTrainingError

MIN_ACCURACY = 0.95
CROP_H, CROP_W = 10, 24


def crop_around(image: np.ndarray, mask: np.ndarray, h: int = CROP_H, w: int = CROP_W,
                shift: tuple[int, int] = (0, 0)) -> np.ndarray:
    """(C, h, w) window centred on the bounding box of ``mask``; edges are replicated."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ProbeTrainingError("cannot crop around an empty mask")
    cy = (ys.min() + ys.max() + 1) // 2 + shift[0]
    cx = (xs.min() + xs.max() + 1) // 2 + shift[1]
    padded = np.pad(image, ((0, 0), (h, h), (w, w)), mode="edge")
    y0, x0 = cy - h // 2 + h, cx - w // 2 + w
    return padded[:, y0:y0 + h, x0:x0 + w]


class ProbeNet(nn.Module):
    def __init__(self, channels: int = 3, classes: int = 3, width: int = 16):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, padding=1)
        self.head = nn.Linear(2 * width, classes)

    def forward(self, x):
        h = F.relu(self.conv1(x))
        h = F.relu(self.conv2(h))
        return self.head(h.amax(dim=(-2, -1)))


@dataclass
class ProbeModel:
    net: ProbeNet
    accuracy: float          # held-out accuracy on clean data

    @torch.no_grad()
    def predict(self, crops: np.ndarray) -> np.ndarray:
        self.net.eval()
        x = torch.from_numpy(np.asarray(crops, dtype=np.float32))
        if x.ndim == 3:
            x = x[None]
        return self.net(x).argmax(-1).numpy()

    def save(self, path) -> None:
        write_archive(path, self.net.state_dict(), {"kind": "probe", "accuracy": self.accuracy,
                                                    "crop": [CROP_H, CROP_W]})

    @classmethod
    def load(cls, path) -> "ProbeModel":
        manifest = read_manifest(path)
        if manifest.get("kind") != "probe":
            raise LoadError(f"{path}: not a probe checkpoint")
        net = ProbeNet()
        net.load_state_dict(read_tensors(path, manifest))
        return cls(net=net, accuracy=float(manifest["accuracy"]))


def brow_probe_data(n: int, seed: int, size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Crops and thickness buckets from ``n`` clean faces with coarse-mask-style jitter."""
    rng = np.random.default_rng(seed)
    crops, labels = [], []
    for i in range(n):
        spec = SyntheticFaceSpec.sample(int(rng.integers(2 ** 31)), size=size)
        spec.brow_bucket = i % 3
        face = generate_face(spec)
        region = eval_brow_mask(spec)
        shift = (int(rng.integers(-1, 2)), int(rng.integers(-1, 2)))
        crops.append(crop_around(face.image, region, shift=shift))
        labels.append(spec.brow_bucket)
    return np.stack(crops).astype(np.float32), np.array(labels)


def eval_brow_mask(spec: SyntheticFaceSpec) -> np.ndarray:
    """Edit mask that covers the eyebrows at every thickness bucket, dilated by one pixel."""
    union = None
    for b in range(3):
        s = SyntheticFaceSpec(**{**spec.__dict__, "brow_bucket": b})
        m = mt.attr_mask(generate_face(s).seg, ATTR_CLASSES["eyebrows"])
        union = m if union is None else union | m
    return mt.dilate(union, 1)


def train_probe(crops: np.ndarray, labels: np.ndarray, seed: int = 0, epochs: int = 30,
                holdout: float = 0.2, min_accuracy: float = MIN_ACCURACY) -> ProbeModel:
    """Fit the probe; raise ``ProbeTrainingError`` if held-out accuracy is below ``min_accuracy``."""
    crops = np.asarray(crops, dtype=np.float32)
    labels = np.asarray(labels)
    n = len(labels)
    if n < 10:
        raise ProbeTrainingError(f"need at least 10 examples, got {n}")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_test = max(1, int(round(holdout * n)))
    test, tr = order[:n_test], order[n_test:]
    x = torch.from_numpy(crops)
    y = torch.from_numpy(labels).long()
    net = ProbeNet(channels=crops.shape[1], classes=int(labels.max()) + 1 if labels.size else 3)
    opt = torch.optim.Adam(net.parameters(), lr=3e-3)
    for _ in range(epochs):
        net.train()
        for chunk in np.array_split(rng.permutation(tr), max(1, len(tr) // 64)):
            loss = F.cross_entropy(net(x[chunk]), y[chunk])
            opt.zero_grad()
            loss.backward()
            opt.step()
    probe = ProbeModel(net=net, accuracy=0.0)
    probe.accuracy = float((probe.predict(crops[test]) == labels[test]).mean())
    if probe.accuracy < min_accuracy:
        raise ProbeTrainingError(f"held-out accuracy {probe.accuracy:.3f} < {min_accuracy}; probe not emitted")
    return probe


def train_brow_probe(n: int = 1500, seed: int = 0) -> ProbeModel:
    crops, labels = brow_probe_data(n, seed)
    return train_probe(crops, labels, seed=seed)
