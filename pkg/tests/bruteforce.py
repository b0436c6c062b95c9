"""Naive reference implementations used as independent oracles in tests.

Everything here is written for obviousness, not speed: plain loops, no shared
code with the package beyond primitive float ops. Metric functions follow the
stated rules literally.
"""

from fractions import Fraction

import numpy as np


def exact_tiou(a, b) -> Fraction:
    """tIoU in exact rational arithmetic; inputs must be Fraction-convertible."""
    a_s, a_e = Fraction(a[0]), Fraction(a[1])
    b_s, b_e = Fraction(b[0]), Fraction(b[1])
    inter = max(Fraction(0), min(a_e, b_e) - max(a_s, b_s))
    union = (a_e - a_s) + (b_e - b_s) - inter
    return inter / union


def float_tiou(a, b) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    return inter / ((a[1] - a[0]) + (b[1] - b[0]) - inter)


def bf_average_recall(proposals_by_video, gts_by_video, an, thresholds):
    """Literal rule: a gt is recalled at th if any top-an proposal overlaps >= th."""
    recalls = []
    for th in thresholds:
        matched = 0
        total = 0
        for vid, gts in gts_by_video.items():
            props = sorted(proposals_by_video.get(vid, []), key=lambda p: -p[2])[:an]
            for gt in gts:
                total += 1
                if any(float_tiou((p[0], p[1]), (gt[0], gt[1])) >= th for p in props):
                    matched += 1
        recalls.append(matched / total if total else 0.0)
    return sum(recalls) / len(recalls)


def bf_auc(proposals_by_video, gts_by_video, an_max, thresholds):
    values = [
        bf_average_recall(proposals_by_video, gts_by_video, an, thresholds)
        for an in range(1, an_max + 1)
    ]
    return sum(values) / len(values)


def bf_map_at(detections_by_video, gts_by_video, threshold):
    classes = sorted({g[2] for gts in gts_by_video.values() for g in gts})
    if not classes:
        return 0.0
    aps = []
    for cls in classes:
        dets = []
        for vid, ds in detections_by_video.items():
            for d in ds:
                if d[2] == cls:
                    dets.append((vid, d[0], d[1], d[3]))
        dets.sort(key=lambda d: -d[3])
        gt_pool = {
            vid: [[g[0], g[1], False] for g in gts if g[2] == cls]
            for vid, gts in gts_by_video.items()
        }
        num_gt = sum(len(v) for v in gt_pool.values())
        flags = []
        for vid, ds, de, _ in dets:
            best_i, best_ov = -1, -1.0
            for i, (gs, ge, used) in enumerate(gt_pool.get(vid, [])):
                if used:
                    continue
                ov = float_tiou((ds, de), (gs, ge))
                if ov >= threshold and ov > best_ov:
                    best_i, best_ov = i, ov
            if best_i >= 0:
                gt_pool[vid][best_i][2] = True
                flags.append(1)
            else:
                flags.append(0)
        # naive interpolated AP: scan every recall point, take the max
        # precision at equal-or-higher recall each time
        if num_gt == 0 or not flags:
            aps.append(0.0)
            continue
        precisions, recalls = [], []
        tp = 0
        for i, f in enumerate(flags, start=1):
            tp += f
            precisions.append(tp / i)
            recalls.append(tp / num_gt)
        ap = 0.0
        prev_r = 0.0
        for i, r in enumerate(recalls):
            p_max = max(p for p, rr in zip(precisions, recalls) if rr >= r)
            ap += (r - prev_r) * p_max
            prev_r = r
        aps.append(ap)
    return sum(aps) / len(aps)


def bf_soft_nms(intervals, scores, sigma, score_floor):
    """List-based soft NMS; returns (kept interval indices, kept scores)."""
    remaining = list(range(len(scores)))
    live_scores = [float(s) for s in scores]
    kept_idx, kept_scores = [], []
    while remaining:
        # first maximum wins ties, matching argmax over the remaining order
        m = remaining[0]
        for i in remaining[1:]:
            if live_scores[i] > live_scores[m]:
                m = i
        kept_idx.append(m)
        kept_scores.append(live_scores[m])
        remaining.remove(m)
        survivors = []
        for i in remaining:
            ov = float_tiou(intervals[m], intervals[i])
            live_scores[i] = float(live_scores[i] * np.exp(-(ov * ov) / sigma))
            if live_scores[i] >= score_floor:
                survivors.append(i)
        remaining = survivors
    return kept_idx, kept_scores


def bf_boundary_candidates(signal, rel_threshold):
    """Literal boundary rule: strict local max, or above rel_threshold * max."""
    T = len(signal)
    peak = max(signal)
    out = []
    for t in range(T):
        if t == 0:
            is_local = signal[0] > signal[1]
        elif t == T - 1:
            is_local = signal[T - 1] > signal[T - 2]
        else:
            is_local = signal[t] > signal[t - 1] and signal[t] > signal[t + 1]
        if is_local or signal[t] > rel_threshold * peak:
            out.append(t)
    return out


def bf_candidate_pairs(start_signal, end_signal, rel_threshold, max_duration):
    starts = bf_boundary_candidates(start_signal, rel_threshold)
    ends = bf_boundary_candidates(end_signal, rel_threshold)
    return [
        (s, e) for s in starts for e in ends if e > s and e - s <= max_duration
    ]
