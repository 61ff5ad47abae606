"""Inference (scores, box decoding, per-class NMS) and mAP evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BBOX_STDS, clip_boxes, decode_delta, iou_matrix, nms
from .model import FSNet
from .ops import softmax
from .synth import CLASS_NAMES
from .train import scene_proposals


@dataclass(frozen=True)
class Detection:
    cls: int
    score: float
    box: tuple[float, float, float, float]

    def line(self) -> str:
        return f"{self.cls} {self.score:.6f} " + " ".join(f"{v:.2f}" for v in self.box)


def infer(net: FSNet, image: np.ndarray, proposals: np.ndarray) -> list[Detection]:
    """Detections for one (3, H, W) or (1, 3, H, W) image, sorted by score.

    Proposals whose arg-max class is background are dropped; the rest go
    through per-class NMS.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    if len(proposals) == 0:
        return []
    img = image[None] if image.ndim == 3 else image
    H, W = img.shape[2:]
    logits, deltas, _ = net.forward(img, proposals)
    probs = softmax(logits.astype(np.float64))
    boxes = clip_boxes(decode_delta(deltas.astype(np.float64) * BBOX_STDS, proposals), W, H)
    labels = probs.argmax(axis=1)
    scores = probs[np.arange(len(probs)), labels]
    dets = []
    thr = net.cfg.score_threshold
    for c in range(1, net.cfg.num_classes + 1):
        idx = np.flatnonzero((labels == c) & (scores >= thr))
        if len(idx) == 0:
            continue
        for k in nms(boxes[idx], scores[idx], net.cfg.nms_threshold):
            i = idx[k]
            dets.append(Detection(c, float(scores[i]), tuple(float(v) for v in boxes[i])))
    dets.sort(key=lambda d: (-d.score, d.cls, d.box))
    return dets


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone precision envelope (all points, no 11-point sampling)."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate_map(detections: list[list[Detection]], gts: list[tuple[np.ndarray, np.ndarray]],
                 num_classes: int, iou_threshold: float = 0.5):
    """Per-class AP and their mean over classes present in ``gts``.

    ``detections[i]`` and ``gts[i] = (boxes, classes)`` describe image i. A
    detection is a true positive when its best-overlapping same-class gt has
    IoU >= ``iou_threshold`` and was not matched before. Equal scores are
    ordered by (image, box) so the result does not depend on input order.
    """
    ap = {}
    for c in range(1, num_classes + 1):
        gt_boxes = {i: np.asarray(b, dtype=np.float64).reshape(-1, 4)[np.asarray(k) == c]
                    for i, (b, k) in enumerate(gts)}
        n_gt = sum(len(b) for b in gt_boxes.values())
        if n_gt == 0:
            continue
        cand = [(i, d) for i, dets in enumerate(detections) for d in dets if d.cls == c]
        cand.sort(key=lambda t: (-t[1].score, t[0], t[1].box))
        matched = {i: np.zeros(len(b), dtype=bool) for i, b in gt_boxes.items()}
        tp = np.zeros(len(cand))
        for j, (i, d) in enumerate(cand):
            g = gt_boxes[i]
            if len(g) == 0:
                continue
            ov = iou_matrix(np.array(d.box)[None], g)[0]
            best = int(ov.argmax())
            if ov[best] >= iou_threshold and not matched[i][best]:
                matched[i][best] = True
                tp[j] = 1
        ctp = np.cumsum(tp)
        recall = ctp / n_gt
        precision = ctp / np.maximum(np.arange(1, len(cand) + 1), 1)
        ap[c] = average_precision(recall, precision)
    mean = float(np.mean(list(ap.values()))) if ap else float("nan")
    return ap, mean


def detection_recall(detections: list[list[Detection]], gts, iou_threshold: float = 0.5) -> float:
    """Fraction of gt objects with a same-class detection at IoU >= threshold."""
    hit = total = 0
    for dets, (boxes, classes) in zip(detections, gts):
        for b, c in zip(np.asarray(boxes).reshape(-1, 4), classes):
            total += 1
            cand = np.array([d.box for d in dets if d.cls == c]).reshape(-1, 4)
            if len(cand) and iou_matrix(b[None], cand).max() >= iou_threshold:
                hit += 1
    return hit / total if total else 1.0


@dataclass
class EvalResult:
    ap: dict[int, float]
    mean_ap: float
    recall: float
    detections: list[list[Detection]]

    def lines(self) -> list[str]:
        out = [f"{'class':<14}{'AP':>8}"]
        out += [f"{CLASS_NAMES[c]:<14}{v:>8.4f}" for c, v in sorted(self.ap.items())]
        out.append(f"{'mAP':<14}{self.mean_ap:>8.4f}")
        out.append(f"{'recall@0.5':<14}{self.recall:>8.4f}")
        return out


def evaluate_scenes(net: FSNet, scenes, iou_threshold: float = 0.5) -> EvalResult:
    """Run inference on every scene with its synthetic proposals and score it."""
    dets = [infer(net, sc.image, scene_proposals(sc, net.cfg)) for sc in scenes]
    gts = [(sc.boxes, sc.classes) for sc in scenes]
    ap, mean = evaluate_map(dets, gts, net.cfg.num_classes, iou_threshold)
    return EvalResult(ap, mean, detection_recall(dets, gts, iou_threshold), dets)
