"""Proposal and detection metrics.

Proposals are (start, end, score) triples and detections are
(start, end, class_id, score), both grouped per video id. Ground-truth
intervals are (start, end) pairs for recall metrics and (start, end,
class_id) triples for detection mAP. All metric values live in [0, 1].
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError

# tIoU thresholds 0.5 to 0.95 in steps of 0.05; 1.0 is excluded because exact
# overlap of real-valued boundaries is measure-zero.
AR_TIOU_THRESHOLDS: tuple[float, ...] = tuple(np.arange(10) * 0.05 + 0.5)

MAP_TIOU_THRESHOLDS: tuple[float, ...] = (0.3, 0.4, 0.5, 0.6, 0.7)


def tiou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Temporal intersection-over-union of two (start, end) intervals."""
    a_s, a_e = float(a[0]), float(a[1])
    b_s, b_e = float(b[0]), float(b[1])
    if not (a_s < a_e) or not (b_s < b_e):
        raise ValidationError(f"degenerate interval in tiou: {a}, {b}")
    inter = max(0.0, min(a_e, b_e) - max(a_s, b_s))
    union = (a_e - a_s) + (b_e - b_s) - inter
    return inter / union


def tiou_arrays(starts: np.ndarray, ends: np.ndarray, gt_start: float, gt_end: float) -> np.ndarray:
    """Vectorized tIoU of many intervals against one interval."""
    inter = np.maximum(0.0, np.minimum(ends, gt_end) - np.maximum(starts, gt_start))
    union = (ends - starts) + (gt_end - gt_start) - inter
    return inter / union


def _sorted_props(props: Sequence[tuple]) -> list[tuple]:
    # stable sort keeps input order among ties, so results are deterministic
    return sorted(props, key=lambda p: -p[-1])


def _match_ranks(
    proposals_by_video: Mapping[str, Sequence[tuple]],
    gts_by_video: Mapping[str, Sequence[tuple]],
    thresholds: Sequence[float],
) -> tuple[np.ndarray, int]:
    """For every (gt, threshold): 1-based rank of the first matching proposal.

    Rank is np.inf when no proposal reaches the threshold. Feeding ranks into
    AR@AN for every AN makes the AUC sweep cheap.
    """
    ranks = []
    total_gt = 0
    for vid, gts in gts_by_video.items():
        gts = list(gts)
        total_gt += len(gts)
        props = _sorted_props(proposals_by_video.get(vid, []))
        if props:
            starts = np.array([p[0] for p in props])
            ends = np.array([p[1] for p in props])
        for gs, ge in ((g[0], g[1]) for g in gts):
            if not props:
                ranks.append([np.inf] * len(thresholds))
                continue
            overlaps = tiou_arrays(starts, ends, gs, ge)
            row = []
            for th in thresholds:
                hits = np.nonzero(overlaps >= th)[0]
                row.append(float(hits[0]) + 1.0 if hits.size else np.inf)
            ranks.append(row)
    return np.asarray(ranks, dtype=np.float64).reshape(total_gt, len(thresholds)), total_gt


def average_recall(
    proposals_by_video: Mapping[str, Sequence[tuple]],
    gts_by_video: Mapping[str, Sequence[tuple]],
    an: int,
    thresholds: Sequence[float] = AR_TIOU_THRESHOLDS,
) -> float:
    """Mean over tIoU thresholds of corpus-level recall at top-``an`` proposals.

    A ground truth counts as recalled at threshold th if any of the video's
    ``an`` highest-scoring proposals overlaps it with tIoU >= th.
    """
    if an < 1:
        raise ValidationError(f"AN must be >= 1, got {an}")
    ranks, total_gt = _match_ranks(proposals_by_video, gts_by_video, thresholds)
    if total_gt == 0:
        return 0.0
    recalls = (ranks <= an).mean(axis=0)
    return float(recalls.mean())


def ar_curve(
    proposals_by_video: Mapping[str, Sequence[tuple]],
    gts_by_video: Mapping[str, Sequence[tuple]],
    an_max: int = 100,
    thresholds: Sequence[float] = AR_TIOU_THRESHOLDS,
) -> np.ndarray:
    """AR@AN for AN = 1 .. an_max as one array."""
    if an_max < 1:
        raise ValidationError(f"an_max must be >= 1, got {an_max}")
    ranks, total_gt = _match_ranks(proposals_by_video, gts_by_video, thresholds)
    if total_gt == 0:
        return np.zeros(an_max)
    ans = np.arange(1, an_max + 1, dtype=np.float64)
    # matched(gt, th, an) = rank <= an, averaged over gts then thresholds
    matched = ranks[:, :, None] <= ans[None, None, :]
    return matched.mean(axis=(0, 1))


def auc(
    proposals_by_video: Mapping[str, Sequence[tuple]],
    gts_by_video: Mapping[str, Sequence[tuple]],
    an_max: int = 100,
    thresholds: Sequence[float] = AR_TIOU_THRESHOLDS,
) -> float:
    """Mean of AR@AN over AN in {1, ..., an_max}; the normalized curve area.

    AR@0 is identically zero, so the average starts at AN = 1.
    """
    return float(ar_curve(proposals_by_video, gts_by_video, an_max, thresholds).mean())


def _interpolated_ap(tp_flags: list[bool], num_gt: int) -> float:
    """Area under the interpolated precision envelope of one PR curve."""
    if num_gt == 0 or not tp_flags:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(tp_flags, dtype=bool))
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # precision envelope: max precision achievable at recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def map_at(
    detections_by_video: Mapping[str, Sequence[tuple]],
    gts_by_video: Mapping[str, Sequence[tuple]],
    threshold: float,
) -> float:
    """Detection mAP at one tIoU threshold.

    Per class: detections are sorted by score; each is greedily matched to the
    not-yet-matched ground truth of the same class and video with highest
    tIoU >= threshold. mAP averages AP over classes present in the ground
    truth.
    """
    classes = sorted({int(g[2]) for gts in gts_by_video.values() for g in gts})
    if not classes:
        return 0.0
    aps = []
    for cls in classes:
        dets = [
            (vid, d[0], d[1], d[3])
            for vid, ds in detections_by_video.items()
            for d in ds
            if int(d[2]) == cls
        ]
        dets.sort(key=lambda d: -d[3])
        gt_by_vid = {
            vid: [(g[0], g[1]) for g in gts if int(g[2]) == cls]
            for vid, gts in gts_by_video.items()
        }
        matched = {vid: [False] * len(gts) for vid, gts in gt_by_vid.items()}
        num_gt = sum(len(g) for g in gt_by_vid.values())
        tp_flags = []
        for vid, ds, de, _score in dets:
            best_i, best_ov = -1, -1.0
            for i, (gs, ge) in enumerate(gt_by_vid.get(vid, [])):
                if matched[vid][i]:
                    continue
                ov = tiou((ds, de), (gs, ge))
                if ov >= threshold and ov > best_ov:
                    best_i, best_ov = i, ov
            if best_i >= 0:
                matched[vid][best_i] = True
                tp_flags.append(True)
            else:
                tp_flags.append(False)
        aps.append(_interpolated_ap(tp_flags, num_gt))
    return float(np.mean(aps))


@dataclass
class EvalReport:
    ar_at_an: dict[int, float]
    auc: float
    map_at_tiou: dict[float, float]
    per_video_recall: dict[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        values = list(self.ar_at_an.values()) + [self.auc] + list(self.map_at_tiou.values())
        if any(not (0.0 <= v <= 1.0) for v in values):
            raise ValidationError("metric values must lie in [0, 1]")
        ans = sorted(self.ar_at_an)
        ars = [self.ar_at_an[a] for a in ans]
        if any(b < a - 1e-12 for a, b in zip(ars, ars[1:])):
            raise ValidationError("AR@AN must be non-decreasing in AN")

    def to_dict(self) -> dict:
        return {
            "ar_at_an": {str(k): v for k, v in sorted(self.ar_at_an.items())},
            "auc": self.auc,
            "map_at_tiou": {f"{k:.2f}": v for k, v in sorted(self.map_at_tiou.items())},
            "per_video_recall": dict(sorted(self.per_video_recall.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
