"""Downstream evaluation of frozen embeddings.

Linear probing, mean-classifier accuracy, prompt-style cross-modal
classification, cross-modal retrieval metrics (R@K, median rank, average
recall over both directions), and a deterministic 2-d principal-component
projection for plotting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import encoder as enc
from .linear_head import fit_softmax, predict_classes
from .mixture import TokenSeq


@dataclass
class RetrievalReport:
    recall_at: dict  # direction -> {k: fraction}
    medr: dict  # direction -> lower-median rank
    avg_recall: float
    ranks: dict  # direction -> (Q,) int array


@dataclass
class PromptReport:
    accuracy: float
    per_class: dict  # class id -> accuracy over images for that binary task


@dataclass
class EvalReport:
    linear_probe_acc: Optional[float] = None
    mean_classifier_acc: Optional[float] = None
    retrieval: Optional[RetrievalReport] = None
    prompt: Optional[PromptReport] = None
    label_fraction: Optional[float] = None

    def to_dict(self) -> dict:
        d: dict = {}
        if self.linear_probe_acc is not None:
            d["linear_probe_acc"] = self.linear_probe_acc
        if self.mean_classifier_acc is not None:
            d["mean_classifier_acc"] = self.mean_classifier_acc
        if self.label_fraction is not None:
            d["label_fraction"] = self.label_fraction
        if self.retrieval is not None:
            d["retrieval"] = {
                "recall_at": {k: dict(v) for k, v in self.retrieval.recall_at.items()},
                "medr": dict(self.retrieval.medr),
                "avg_recall": self.retrieval.avg_recall,
            }
        if self.prompt is not None:
            d["prompt"] = {
                "accuracy": self.prompt.accuracy,
                "per_class": dict(self.prompt.per_class),
            }
        return d


def linear_probe(
    train_embs: np.ndarray,
    train_labels: np.ndarray,
    test_embs: np.ndarray,
    test_labels: np.ndarray,
    label_fraction: float,
    rng: np.random.Generator,
    gtol: float = 1e-6,
    max_iter: int = 1000,
    l2: float = 1e-4,
) -> float:
    """Accuracy of a softmax head trained on a labeled fraction of the
    (frozen) training embeddings and evaluated on the test embeddings.

    The labeled subset is resampled up to 10 times until it covers every
    class present in the training labels; persistent failure raises.  A weak
    ridge term keeps the optimum finite on separable embeddings.
    """
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    if not 0.0 < label_fraction <= 1.0:
        raise ValueError("label_fraction must be in (0, 1]")
    n = train_embs.shape[0]
    classes = np.unique(train_labels)
    if classes.size < 2:
        raise ValueError("need at least 2 classes in the training labels")
    n_labeled = max(1, int(round(label_fraction * n)))
    subset = None
    if n_labeled >= n:
        subset = np.arange(n)
    else:
        for _ in range(10):
            candidate = rng.choice(n, size=n_labeled, replace=False)
            if np.unique(train_labels[candidate]).size == classes.size:
                subset = candidate
                break
        if subset is None:
            raise ValueError(
                f"labeled subset of size {n_labeled} missed a class in 10 resampling attempts"
            )
    fit = fit_softmax(
        train_embs[subset],
        train_labels[subset],
        num_classes=int(classes.max() + 1),
        fit_intercept=True,
        gtol=gtol,
        max_iter=max_iter,
        l2=l2,
    )
    preds = predict_classes(fit, test_embs)
    return float(np.mean(preds == test_labels))


def mean_classifier_accuracy(
    train_embs: np.ndarray,
    train_labels: np.ndarray,
    test_embs: np.ndarray,
    test_labels: np.ndarray,
) -> float:
    """Accuracy of the classifier whose row c is the mean embedding of class c."""
    train_labels = np.asarray(train_labels, dtype=np.int64)
    classes = np.unique(train_labels)
    mus = np.stack([train_embs[train_labels == c].mean(axis=0) for c in classes])
    logits = test_embs @ mus.T
    preds = classes[np.argmax(logits, axis=1)]
    return float(np.mean(preds == np.asarray(test_labels)))


def _ranks_with_tie_break(scores: np.ndarray, true_idx: np.ndarray) -> np.ndarray:
    """Rank of the true partner per query under descending score; ties are
    broken by gallery index order, so results are deterministic."""
    true_scores = scores[np.arange(scores.shape[0]), true_idx]
    better = (scores > true_scores[:, None]).sum(axis=1)
    gallery_idx = np.arange(scores.shape[1])
    tied_before = ((scores == true_scores[:, None]) & (gallery_idx[None, :] < true_idx[:, None])).sum(axis=1)
    return 1 + better + tied_before


def _lower_median(values: np.ndarray) -> float:
    ordered = np.sort(values)
    return float(ordered[(ordered.size - 1) // 2])


def retrieval_metrics(
    query_embs: np.ndarray,
    gallery_embs: np.ndarray,
    ks: Sequence[int] = (10, 50, 100),
    pairing: Optional[np.ndarray] = None,
) -> RetrievalReport:
    """R@K, median rank, and average recall over both retrieval directions.

    ``pairing[i]`` is the gallery index of query i's true partner (identity
    by default) and must be a bijection.  Median rank is the lower median.
    """
    q = query_embs.shape[0]
    g = gallery_embs.shape[0]
    if pairing is None:
        if q != g:
            raise ValueError("default pairing requires equal query/gallery sizes")
        pairing = np.arange(q)
    pairing = np.asarray(pairing, dtype=np.int64)
    if q != g or not np.array_equal(np.sort(pairing), np.arange(g)):
        raise ValueError("pairing must be a bijection between queries and gallery")
    inverse = np.empty_like(pairing)
    inverse[pairing] = np.arange(q)

    scores = query_embs @ gallery_embs.T
    ranks_fwd = _ranks_with_tie_break(scores, pairing)
    ranks_bwd = _ranks_with_tie_break(scores.T, inverse)

    recall_at = {}
    medr = {}
    ranks = {"query_to_gallery": ranks_fwd, "gallery_to_query": ranks_bwd}
    values = []
    for direction, r in ranks.items():
        recall_at[direction] = {int(k): float(np.mean(r <= k)) for k in ks}
        medr[direction] = _lower_median(r)
        values.extend(recall_at[direction].values())
    return RetrievalReport(
        recall_at=recall_at, medr=medr, avg_recall=float(np.mean(values)), ranks=ranks
    )


def prompt_classify(
    image_embs: np.ndarray,
    image_labels: np.ndarray,
    prompts: dict[int, tuple[TokenSeq, TokenSeq]],
    params: enc.EncoderParams,
) -> PromptReport:
    """Binary prompt classification per class: predict positive when the
    image scores higher against the class's positive prompt than against its
    negative prompt (ties predict negative); ground truth is whether the
    image's latent class equals the prompted class."""
    image_labels = np.asarray(image_labels, dtype=np.int64)
    per_class = {}
    correct_total = 0
    count_total = 0
    for cls in sorted(prompts):
        neg_prompt, pos_prompt = prompts[cls]
        if len(neg_prompt) == 0 or len(pos_prompt) == 0:
            raise ValueError(f"class {cls}: missing prompt")
        prompt_embs, _ = enc.forward_tokens(params, [neg_prompt, pos_prompt])
        s_neg = image_embs @ prompt_embs[0]
        s_pos = image_embs @ prompt_embs[1]
        pred = s_pos > s_neg
        truth = image_labels == cls
        correct = pred == truth
        per_class[int(cls)] = float(np.mean(correct))
        correct_total += int(correct.sum())
        count_total += correct.size
    return PromptReport(accuracy=correct_total / count_total, per_class=per_class)


def project_2d(embeddings: np.ndarray) -> np.ndarray:
    """Top-2 principal components with a deterministic sign convention: the
    largest-magnitude loading of each component is made positive."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least 2 embedding rows")
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2].copy()
    for row in components:
        pivot = int(np.argmax(np.abs(row)))
        if row[pivot] < 0:
            row *= -1.0
    return centered @ components.T
