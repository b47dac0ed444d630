"""Online cluster assignment: one forward pass and an argmax per sample."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Network, forward


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    confidences: np.ndarray
    representations: np.ndarray | None = None


def argmax_rows(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Winning column and its value per row; ties go to the lowest index."""
    y = np.asarray(y)
    labels = np.argmax(y, axis=1)
    return labels.astype(np.int64), y[np.arange(y.shape[0]), labels]


def label_representations(net: Network, patches, batch_size: int = 256) -> np.ndarray:
    """Softmax rows for every patch, computed ``batch_size`` at a time."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if len(patches) == 0:
        raise ValueError("no patches to cluster")
    net.eval()
    chunks = []
    for start in range(0, len(patches), batch_size):
        _, y = forward(net, patches[start:start + batch_size])
        chunks.append(y)
    return np.concatenate(chunks)


def assign_clusters(net: Network, patches, batch_size: int = 256, keep_representations=False):
    """Cluster label and confidence for each patch (list of patches or stacked array).

    No state from training is needed besides the network, so patches never
    seen during training are handled the same way.
    """
    y = label_representations(net, patches, batch_size)
    labels, conf = argmax_rows(y)
    return ClusterAssignment(labels, conf, y if keep_representations else None)
