"""Task and concept evaluation metrics.

Classification metrics and CCC are tiny closed-form computations kept in
numpy.  The concept alignment score follows the published recipe it cites
(2-means clustering per concept, homogeneity against thresholded labels),
so it delegates clustering and homogeneity to scikit-learn rather than
reimplementing either.
"""

import numpy as np
from sklearn.cluster import KMeans
from sklearn.metrics import homogeneity_score


def classification_metrics(preds, labels, n_classes):
    """Overall accuracy, per-class accuracy (recall), and macro F1.

    Per-class table covers every class present in the ground truth.  Macro
    F1 averages over classes present in predictions or labels; classes
    absent from both are excluded.
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.size == 0 or preds.shape != labels.shape:
        raise ValueError(f"need equal-length nonempty vectors, got {preds.shape} vs {labels.shape}")
    if preds.min() < 0 or preds.max() >= n_classes or labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"class ids must lie in [0, {n_classes})")

    overall = float(np.mean(preds == labels))
    per_class = {}
    f1s = []
    for c in range(n_classes):
        in_labels = labels == c
        in_preds = preds == c
        if in_labels.any():
            per_class[c] = float(np.mean(preds[in_labels] == c))
        if not in_labels.any() and not in_preds.any():
            continue
        tp = float(np.sum(in_preds & in_labels))
        fp = float(np.sum(in_preds & ~in_labels))
        fn = float(np.sum(~in_preds & in_labels))
        f1s.append(2 * tp / (2 * tp + fp + fn))
    return overall, per_class, float(np.mean(f1s))


def ccc(preds, labels):
    """Concordance correlation coefficient with population (1/N) moments.

    Convention: two constant sequences with equal means agree perfectly
    (1.0); with unequal means the formula itself yields 0.
    """
    p = np.asarray(preds, dtype=np.float64)
    l = np.asarray(labels, dtype=np.float64)
    if p.shape != l.shape or p.ndim != 1:
        raise ValueError(f"need equal-length 1-d sequences, got {p.shape} vs {l.shape}")
    if p.size < 2:
        raise ValueError("ccc needs at least 2 samples")
    mp, ml = p.mean(), l.mean()
    vp = float(np.mean((p - mp) ** 2))
    vl = float(np.mean((l - ml) ** 2))
    cov = float(np.mean((p - mp) * (l - ml)))
    denom = vp + vl + (mp - ml) ** 2
    if denom == 0.0:
        return 1.0
    return 2.0 * cov / denom


def cas(embeddings, concept_labels, seed=0):
    """Concept alignment score, as a percentage.

    For each concept, cluster its per-sample mixed embeddings with k-means
    (k = 2, 10 restarts, fixed seed) and score cluster homogeneity against
    the 0.5-thresholded labels; average over concepts.  A concept whose
    labels are single-class is perfectly homogeneous by definition.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    lab = np.asarray(concept_labels, dtype=np.float64)
    if emb.ndim != 3 or lab.shape != emb.shape[:2]:
        raise ValueError(f"embeddings (N, n_concepts, m) vs labels (N, n_concepts): "
                         f"got {emb.shape} and {lab.shape}")
    if len(emb) < 2:
        raise ValueError("cas needs at least 2 samples")
    scores = []
    for i in range(emb.shape[1]):
        y = (lab[:, i] >= 0.5).astype(np.int64)
        if y.min() == y.max():
            scores.append(1.0)
            continue
        km = KMeans(n_clusters=2, n_init=10, random_state=seed)
        clusters = km.fit_predict(emb[:, i, :])
        scores.append(float(homogeneity_score(y, clusters)))
    return 100.0 * float(np.mean(scores))


def concept_auc(probs, targets):
    """Rank-based (Mann-Whitney) AUC with ties counting half.

    Returns None when thresholded targets contain a single class.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64) >= 0.5
    if p.shape != y.shape or p.ndim != 1:
        raise ValueError(f"need equal-length 1-d vectors, got {p.shape} vs {y.shape}")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(p, kind="stable")
    ranks = np.empty(p.size, dtype=np.float64)
    sp = p[order]
    i = 0
    while i < p.size:
        j = i
        while j + 1 < p.size and sp[j + 1] == sp[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum = float(ranks[y].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def evaluation_report(preds, labels, task, n_classes=None, probs=None,
                      concept_targets=None, embeddings=None, seed=0,
                      split="test"):
    """Assemble the full metric bundle for one evaluated split."""
    report = {"split": split, "seed": int(seed), "n_samples": int(len(labels))}
    if task == "classification":
        overall, per_class, macro = classification_metrics(preds, labels, n_classes)
        report["overall_accuracy"] = overall
        report["per_class_accuracy"] = {str(k): v for k, v in per_class.items()}
        report["macro_f1"] = macro
    else:
        report["ccc"] = ccc(preds, labels)
        report["mse"] = float(np.mean((np.asarray(preds) - np.asarray(labels)) ** 2))
    if probs is not None and concept_targets is not None:
        probs = np.asarray(probs)
        concept_targets = np.asarray(concept_targets)
        aucs = []
        for i in range(probs.shape[1]):
            a = concept_auc(probs[:, i], concept_targets[:, i])
            aucs.append(a if a is None else float(a))
        report["concept_auc"] = aucs
    if embeddings is not None and concept_targets is not None:
        report["cas"] = cas(embeddings, concept_targets, seed=seed)
    return report
