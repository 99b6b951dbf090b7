"""Video-level predictions from selected frames, top-1 accuracy and mAP."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .envdata import FrameSequence
from .sampler import ModelParameters, classifier_head, trunk

log = logging.getLogger(__name__)


@dataclass
class Prediction:
    id: str
    scores: np.ndarray  # length C, softmax of the pooled logits
    predicted: int
    positions: np.ndarray


@dataclass
class MetricsReport:
    top1: float
    mAP: float
    per_class_ap: np.ndarray  # NaN for classes without positives

    def as_dict(self) -> dict:
        return {"top1": self.top1, "mAP": self.mAP}


def frame_logits(params: ModelParameters, frames: np.ndarray) -> np.ndarray:
    """Classifier logits for every row of ``frames`` (no tape kept)."""
    tape = nx.Tape()
    w = params.bind(tape)
    return classifier_head(w, trunk(w, tape.const(frames))).value


def pooled_prediction(seq_id: str, logits: np.ndarray, positions) -> Prediction:
    pooled = np.asarray(logits).mean(axis=0, keepdims=True)
    scores = nx.softmax(pooled)[0]
    return Prediction(seq_id, scores, int(np.argmax(scores)), np.asarray(positions))


def predict_from_positions(params: ModelParameters, seq: FrameSequence, positions) -> Prediction:
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size == 0 or positions.min() < 0 or positions.max() >= seq.num_frames:
        raise IndexError(f"positions out of range for F={seq.num_frames}")
    return pooled_prediction(seq.id, frame_logits(params, seq.frames[positions]), positions)


def top1(preds: Sequence[Prediction], labels: Sequence[int]) -> float:
    if len(preds) == 0:
        raise ValueError("top1 of an empty prediction list")
    if len(preds) != len(labels):
        raise ValueError("predictions and labels differ in length")
    return sum(p.predicted == y for p, y in zip(preds, labels)) / len(preds)


def average_precision(scores: np.ndarray, relevant: np.ndarray, ids: Sequence[str]) -> float:
    """Uninterpolated AP; equal scores are ordered by video id."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], ids[i]))
    hits, total = 0, 0.0
    for rank, i in enumerate(order, 1):
        if relevant[i]:
            hits += 1
            total += hits / rank
    return total / hits if hits else float("nan")


def mean_average_precision(preds: Sequence[Prediction], labels: Sequence[int]) -> MetricsReport:
    if len(preds) == 0:
        raise ValueError("mAP of an empty prediction list")
    scores = np.array([p.scores for p in preds])
    labels = np.asarray(labels)
    ids = [p.id for p in preds]
    n_classes = scores.shape[1]
    aps = np.full(n_classes, np.nan)
    for c in range(n_classes):
        rel = labels == c
        if not rel.any():
            log.info("class %d has no positives; excluded from mAP", c)
            continue
        aps[c] = average_precision(scores[:, c], rel, ids)
    valid = aps[~np.isnan(aps)]
    mAP = float(valid.mean()) if valid.size else float("nan")
    return MetricsReport(top1(preds, labels), mAP, aps)


def write_predictions_csv(path, preds: Sequence[Prediction], labels: Sequence[int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        n_classes = len(preds[0].scores) if preds else 0
        w.writerow(["id", "label", "predicted"] + [f"score_{c}" for c in range(n_classes)])
        for p, y in zip(preds, labels):
            w.writerow([p.id, y, p.predicted] + [repr(float(s)) for s in p.scores])
