"""Evaluation: generic/personal accuracy, angle diagnostics, and the
within-class feature-variability measure.

Generic accuracy (GA) scores the global model with the standard classifier
on the union of client test splits. Personal accuracy (PA) averages each
client's on-shard test accuracy under its own personal model. Angle reports
track the mean pairwise angle between class means (globally over all
classes, locally over each client's existing classes) and, for learnable
classifiers, between classifier columns split by existing/missing classes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .etfgeom import mean_pairwise_angle
from .neuralnet import PhiVector, forward, logits

__all__ = [
    "EvalReport",
    "AngleReport",
    "predict",
    "generic_accuracy",
    "personal_accuracy",
    "angle_report",
    "nc1_variability",
]


@dataclass(frozen=True)
class AngleReport:
    global_all_class_mean_angle: float | None
    per_client_existing_class_mean_angle: float | None
    classifier_existing_angle: float | None
    classifier_missing_angle: float | None
    skipped_clients: int = 0   # clients with < 2 usable classes


@dataclass(frozen=True)
class EvalReport:
    ga: float
    pa: float
    per_client_acc: tuple
    angles: AngleReport | None = None


def _mask_bool(class_mask, n_classes: int) -> np.ndarray:
    if class_mask is None:
        return np.ones(n_classes, dtype=bool)
    arr = np.asarray(list(class_mask) if isinstance(class_mask, (set, frozenset)) else class_mask)
    if arr.dtype == bool:
        return arr
    mask = np.zeros(n_classes, dtype=bool)
    mask[arr.astype(int)] = True
    return mask


def predict(backbone, classifier, inputs, e_h: float = 1.0, class_mask=None,
            phi: PhiVector | None = None) -> np.ndarray:
    """Argmax over (masked, optionally phi-scaled) logits.

    Ties break toward the lowest class index. Global evaluation passes no
    phi and the full mask; personal evaluation passes the client's phi and
    its existing-class mask.
    """
    fb, _ = forward(backbone, inputs, e_h)
    z = logits(fb, classifier, phi)
    mask = _mask_bool(class_mask, z.shape[1])
    if not mask.any():
        raise ValueError("class mask must be nonempty")
    z = np.where(mask[None, :], z, -np.inf)
    return np.argmax(z, axis=1)


def generic_accuracy(backbone, classifier, inputs, labels, e_h: float = 1.0) -> float:
    """Accuracy of the global model over a (nonempty) global test set."""
    y = np.asarray(labels)
    if y.size == 0:
        raise ValueError("empty test set")
    pred = predict(backbone, classifier, inputs, e_h)
    return float(np.mean(pred == y))


def personal_accuracy(personal_models, shards, ds, e_h: float = 1.0):
    """Mean over clients of on-shard test accuracy.

    `personal_models` is one (backbone, classifier, phi, mask) tuple per
    shard: phi/mask are None for fine-tuned global baselines and the
    client's own adaptation for distribution-adapted arms.
    """
    if len(personal_models) != len(shards):
        raise ValueError(
            f"need one model per client: {len(personal_models)} models for {len(shards)} shards"
        )
    per_client = []
    for (backbone, classifier, phi, mask), shard in zip(personal_models, shards):
        if backbone is None or classifier is None:
            raise ValueError(f"missing model for client {shard.client_id}")
        idx = shard.test_indices
        if idx.size == 0:
            raise ValueError(f"client {shard.client_id} has an empty test split")
        pred = predict(backbone, classifier, ds.features[idx], e_h,
                       class_mask=mask, phi=phi)
        per_client.append(float(np.mean(pred == ds.labels[idx])))
    return float(np.mean(per_client)), per_client


def _class_means(backbone, ds, indices, e_h, classes) -> np.ndarray:
    """Mean normalized feature per class over the given sample indices."""
    fb, _ = forward(backbone, ds.features[indices], e_h)
    labels = ds.labels[indices]
    means = []
    for c in classes:
        rows = fb.h[labels == c]
        if rows.size == 0:
            raise ValueError(f"class {c} absent from the evaluation set")
        means.append(rows.mean(axis=0))
    return np.asarray(means)


def angle_report(backbone, classifier, shards, ds, global_test_indices,
                 e_h: float = 1.0, local_entries=None) -> AngleReport:
    """Angle diagnostics for one evaluation point.

    Global: mean pairwise angle between all C class means of the global
    model's features on the global test set (every class must appear there).
    Local: for each entry (shard, local_backbone, local_classifier or None),
    the mean pairwise angle between that client's existing-class means of
    its own model's features on its test split, averaged over clients with
    >= 2 usable classes; local classifiers (learnable variants) additionally
    get their column angles split into the client's existing and missing
    class sets. Clients with fewer than two classes in a set are skipped.
    """
    all_classes = range(ds.n_classes)
    global_means = _class_means(backbone, ds, global_test_indices, e_h, all_classes)
    global_angle = mean_pairwise_angle(global_means)

    local_angles, exist_angles, miss_angles = [], [], []
    skipped = 0
    for shard, local_bb, local_clf in (local_entries or []):
        test_idx = shard.test_indices
        present = [c for c in shard.existing_classes
                   if np.any(ds.labels[test_idx] == c)]
        if len(present) >= 2:
            means = _class_means(local_bb, ds, test_idx, e_h, present)
            local_angles.append(mean_pairwise_angle(means))
        else:
            skipped += 1
        if local_clf is not None:
            cols = np.asarray(local_clf).T   # class vectors as rows
            existing = list(shard.existing_classes)
            missing = [c for c in all_classes if c not in shard.existing_classes]
            if len(existing) >= 2:
                exist_angles.append(mean_pairwise_angle(cols, existing))
            if len(missing) >= 2:
                miss_angles.append(mean_pairwise_angle(cols, missing))

    def _mean(vals):
        return float(np.mean(vals)) if vals else None

    return AngleReport(
        global_all_class_mean_angle=float(global_angle),
        per_client_existing_class_mean_angle=_mean(local_angles),
        classifier_existing_angle=_mean(exist_angles),
        classifier_missing_angle=_mean(miss_angles),
        skipped_clients=skipped,
    )


def nc1_variability(features, labels) -> float:
    """Trace of the average within-class covariance of the features.

    Equals the pooled mean squared distance of each feature to its class
    mean; zero exactly when every feature sits at its class mean.
    """
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    total = 0.0
    for c in np.unique(y):
        rows = f[y == c]
        diff = rows - rows.mean(axis=0)
        total += float(np.sum(diff * diff))
    return total / len(y)
