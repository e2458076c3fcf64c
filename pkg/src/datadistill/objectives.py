"""Training objectives, including the malicious relabeling one.

The poisoning objective is ordinary cross-entropy on a batch whose
attacked-class labels have been rewritten to the target class, so one
gradient step on data distilled under it makes a trained classifier
misclassify the attacked class while leaving the rest intact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models
from .data import LabeledDataset
from .errors import EmptyClassError


@dataclass(frozen=True)
class CrossEntropy:
    def transform_labels(self, labels):
        return labels


@dataclass(frozen=True)
class QuadraticMSE:
    def transform_labels(self, labels):
        return labels


@dataclass(frozen=True)
class Poison:
    attacked: int  # class K whose examples should be misread ...
    target: int  # ... as this class

    def __post_init__(self):
        if self.attacked == self.target:
            raise ValueError("attacked and target class must differ")

    def transform_labels(self, labels):
        labels = np.asarray(labels)
        out = labels.copy()
        out[labels == self.attacked] = self.target
        return out


def poison_relabel(batch: LabeledDataset, attacked: int, target: int) -> LabeledDataset:
    """Rewrite every attacked-class label to the target class."""
    if attacked == target:
        raise ValueError("attacked and target class must differ")
    labels = batch.labels.copy()
    labels[batch.labels == attacked] = target
    return LabeledDataset(batch.inputs, labels, batch.num_classes)


def poison_loss(model, params, batch, attacked: int, target: int):
    """Cross-entropy against the relabeled batch, as a scalar node."""
    return models.loss(model, params, batch, objective=Poison(attacked, target))


def attack_metrics(model, params, testset: LabeledDataset, attacked: int, target: int) -> dict:
    """Attack success / collateral accuracy of concrete weights.

    attack_success: fraction of true attacked-class examples predicted as
    the target class.  other_accuracy: plain accuracy on the remaining
    classes.  relabeled_accuracy: accuracy against the rewritten labels.
    """
    logits = models.predict_np(model, params, testset.inputs)
    pred = np.argmax(logits, axis=1)
    is_k = testset.labels == attacked
    if not is_k.any():
        raise EmptyClassError(f"testset has no class-{attacked} examples")
    attack_success = float(np.mean(pred[is_k] == target))
    other_accuracy = float(np.mean(pred[~is_k] == testset.labels[~is_k]))
    relabeled = testset.labels.copy()
    relabeled[is_k] = target
    relabeled_accuracy = float(np.mean(pred == relabeled))
    return {
        "attack_success": attack_success,
        "other_accuracy": other_accuracy,
        "relabeled_accuracy": relabeled_accuracy,
    }
