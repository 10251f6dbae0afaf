"""Evaluation metrics and test-time augmentation."""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, ShapeError

Array = np.ndarray


def balanced_accuracy(predictions: Array, labels: Array) -> float:
    """Mean of per-class recalls over the classes present in `labels`."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ShapeError(
            f"predictions {predictions.shape} and labels {labels.shape} differ"
        )
    if labels.size == 0:
        raise ConfigurationError("balanced accuracy of an empty label set")
    recalls = []
    for c in np.unique(labels):
        sel = labels == c
        recalls.append(float((predictions[sel] == c).mean()))
    return float(np.mean(recalls))


def dice_score(prediction: Array, truth: Array) -> float:
    """2|P & T| / (|P| + |T|) for binary masks; 1.0 when both are empty."""
    prediction = np.asarray(prediction)
    truth = np.asarray(truth)
    if prediction.shape != truth.shape:
        raise ShapeError(f"masks {prediction.shape} and {truth.shape} differ")
    p = prediction > 0.5
    t = truth > 0.5
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / total


def mean_dice(pred_masks: Array, true_masks: Array) -> float:
    """Per-sample dice averaged over the batch axis."""
    pred_masks = np.asarray(pred_masks)
    true_masks = np.asarray(true_masks)
    if pred_masks.shape != true_masks.shape:
        raise ShapeError(f"masks {pred_masks.shape} and {true_masks.shape} differ")
    return float(
        np.mean([dice_score(p, t) for p, t in zip(pred_masks, true_masks)])
    )


def test_time_augment(predict_fn, image: Array, n_views: int = 4) -> Array:
    """Average class probabilities over rotations and flips of one image.

    predict_fn maps [N,C,H,W] -> probabilities [N,K]; views beyond the
    four rotations are horizontal flips of them.
    """
    if n_views < 1:
        raise ConfigurationError(f"need at least one view, got {n_views}")
    views = []
    for k in range(min(n_views, 4)):
        views.append(np.rot90(image, k, axes=(1, 2)))
    for k in range(max(0, n_views - 4)):
        views.append(np.rot90(image[:, :, ::-1], k, axes=(1, 2)))
    batch = np.ascontiguousarray(np.stack(views))
    probs = predict_fn(batch)
    return probs.mean(axis=0)
