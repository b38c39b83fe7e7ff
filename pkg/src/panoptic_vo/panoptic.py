"""Panoptic label maps, the dynamic-mask confidence filter, IoU matching and VPQ."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DimensionMismatch, LengthMismatch, WindowTooLarge

VOID_CLASS = -1
DEFAULT_DYNAMIC_THRESHOLD = 0.5
DEFAULT_ETA = 10.0
DEFAULT_MIN_IOU = 0.5


@dataclass(frozen=True)
class PanopticMap:
    """Per-pixel ``(class_id, instance_id)``; ``instance_id == 0`` marks stuff or void."""

    class_id: np.ndarray
    instance_id: np.ndarray
    thing_classes: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        c = np.asarray(self.class_id, dtype=np.int32)
        i = np.asarray(self.instance_id, dtype=np.int32)
        if c.shape != i.shape or c.ndim != 2:
            raise DimensionMismatch(f"class map {c.shape} and instance map {i.shape} differ")
        object.__setattr__(self, "class_id", c)
        object.__setattr__(self, "instance_id", i)
        object.__setattr__(self, "thing_classes", frozenset(int(k) for k in self.thing_classes))

    @property
    def shape(self) -> tuple[int, int]:
        return self.class_id.shape

    def is_thing(self) -> np.ndarray:
        return np.isin(self.class_id, list(self.thing_classes))

    def instances(self) -> dict[int, int]:
        """Map every instance id present to its class id."""
        ids = self.instance_id
        out = {}
        for inst in np.unique(ids[ids > 0]):
            out[int(inst)] = int(self.class_id[ids == inst][0])
        return out

    def validate(self) -> None:
        thing = self.is_thing()
        if np.any((self.instance_id > 0) & ~thing):
            raise ValueError("instance ids found on stuff pixels")
        if np.any((self.instance_id == 0) & thing):
            raise ValueError("thing pixels without an instance id")
        ids = self.instance_id
        for inst in np.unique(ids[ids > 0]):
            if np.unique(self.class_id[ids == inst]).size != 1:
                raise ValueError(f"instance {inst} spans several classes")

    def relabeled(self, mapping: dict[int, int]) -> "PanopticMap":
        """Replace instance ids via ``mapping``; ids missing from it are kept."""
        ids = self.instance_id.copy()
        for old, new in mapping.items():
            ids[self.instance_id == old] = new
        return PanopticMap(self.class_id, ids, self.thing_classes)


def _check_shape(a, b, what="arrays"):
    if np.shape(a)[:2] != np.shape(b)[:2]:
        raise DimensionMismatch(f"{what} have shapes {np.shape(a)} and {np.shape(b)}")


def build_dynamic_mask(seg: PanopticMap, motion_prob, threshold=DEFAULT_DYNAMIC_THRESHOLD,
                       soft=False) -> np.ndarray:
    """Panoptic-aware dynamic mask.

    Stuff is static.  Each thing instance takes the median motion probability
    of its pixels, binarized at ``threshold`` unless ``soft`` is set.
    """
    motion_prob = np.asarray(motion_prob, dtype=np.float64)
    _check_shape(seg.class_id, motion_prob, "segmentation and motion probability")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    mask = np.zeros(seg.shape)
    ids = seg.instance_id
    for inst in np.unique(ids[ids > 0]):
        sel = ids == inst
        m = float(np.median(motion_prob[sel]))
        mask[sel] = m if soft else float(m >= threshold)
    return mask


def panoptic_confidence(raw, mask, eta=DEFAULT_ETA) -> np.ndarray:
    """``sigmoid(w + (1 - M_d) * eta)`` on both flow components of every pixel."""
    raw = np.asarray(raw, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    _check_shape(raw, mask, "confidence and mask")
    if eta < 0:
        raise ValueError("eta must be non-negative")
    return expit(raw + ((1.0 - mask) * eta)[..., None])


def iou(mask_a, mask_b) -> float:
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def greedy_assign(pair_iou: dict, min_iou: float) -> dict:
    """One-to-one greedy matching of ``(prev, curr) -> iou`` pairs.

    Pairs are visited by descending IoU; ties go to the lower previous id,
    then the lower current id.  Returns ``{curr: prev}``.
    """
    order = sorted(pair_iou.items(), key=lambda kv: (-kv[1], kv[0][0], kv[0][1]))
    used_prev, out = set(), {}
    for (prev, curr), score in order:
        if score < min_iou:
            break
        if prev in used_prev or curr in out:
            continue
        used_prev.add(prev)
        out[curr] = prev
    return out


def iou_match(prev_warped: PanopticMap, curr: PanopticMap, min_iou=DEFAULT_MIN_IOU,
              next_id=None):
    """Assign track ids to the instances of ``curr``.

    Returns ``(mapping, next_id)`` where ``mapping`` sends each current
    instance id to a track id and ``next_id`` is the updated fresh-id counter.
    """
    _check_shape(prev_warped.class_id, curr.class_id, "panoptic maps")
    prev_inst = prev_warped.instances()
    curr_inst = curr.instances()
    if next_id is None:
        next_id = max(prev_inst, default=0) + 1
    pair_iou = {}
    for c, c_cls in curr_inst.items():
        c_mask = curr.instance_id == c
        for p, p_cls in prev_inst.items():
            if p_cls != c_cls:
                continue
            score = iou(prev_warped.instance_id == p, c_mask)
            if score > 0.0:
                pair_iou[(p, c)] = score
    mapping = greedy_assign(pair_iou, min_iou)
    for c in sorted(curr_inst):
        if c not in mapping:
            mapping[c] = next_id
            next_id += 1
    return mapping, next_id


def _frame_segments(pred: PanopticMap, gt: PanopticMap):
    """Areas and overlaps of ``(class, instance)`` segments over non-void gt pixels."""
    keep = gt.class_id != VOID_CLASS
    pc, pi = pred.class_id[keep], pred.instance_id[keep]
    gc, gi = gt.class_id[keep], gt.instance_id[keep]
    pred_valid = pc != VOID_CLASS
    pred_keys = np.stack([pc, pi], 1)
    gt_keys = np.stack([gc, gi], 1)

    def count(keys):
        uniq, n = np.unique(keys, axis=0, return_counts=True)
        return Counter({(int(a), int(b)): int(c) for (a, b), c in zip(uniq, n)})

    pred_area = count(pred_keys[pred_valid]) if pred_valid.any() else Counter()
    gt_area = count(gt_keys) if gt_keys.size else Counter()
    inter = Counter()
    if pred_valid.any():
        both = np.concatenate([pred_keys[pred_valid], gt_keys[pred_valid]], 1)
        uniq, n = np.unique(both, axis=0, return_counts=True)
        for row, c in zip(uniq, n):
            inter[((int(row[0]), int(row[1])), (int(row[2]), int(row[3])))] = int(c)
    return pred_area, gt_area, inter


def _window_class_scores(pred_area, gt_area, inter):
    """Per-class ``sum IoU / (TP + FP/2 + FN/2)`` for one window of tubes."""
    iou_sum, tp, fp, fn = Counter(), Counter(), Counter(), Counter()
    matched_pred, matched_gt = set(), set()
    for (pk, gk), n in inter.items():
        if pk[0] != gk[0]:
            continue
        union = pred_area[pk] + gt_area[gk] - n
        score = n / union
        if score > 0.5:
            iou_sum[gk[0]] += score
            tp[gk[0]] += 1
            matched_pred.add(pk)
            matched_gt.add(gk)
    for pk in pred_area:
        if pk not in matched_pred:
            fp[pk[0]] += 1
    for gk in gt_area:
        if gk not in matched_gt:
            fn[gk[0]] += 1
    classes = set(tp) | set(fp) | set(fn)
    return {c: iou_sum[c] / (tp[c] + 0.5 * fp[c] + 0.5 * fn[c]) for c in classes}


def vpq(pred, gt, window_k: int):
    """Video panoptic quality over all windows of ``window_k + 1`` frames.

    Returns ``(vpq, vpq_thing, vpq_stuff)``.  Each window is scored as the
    mean over classes that appear in it; windows are then averaged.  A
    category with no segments anywhere scores 1.0.
    """
    if len(pred) != len(gt):
        raise LengthMismatch(f"prediction has {len(pred)} frames, ground truth {len(gt)}")
    if window_k < 0 or window_k >= len(gt):
        raise WindowTooLarge(f"window {window_k} needs more than {len(gt)} frames")
    things = set(gt[0].thing_classes) if gt else set()
    for p, g in zip(pred, gt):
        _check_shape(p.class_id, g.class_id, "panoptic maps")
    per_frame = [_frame_segments(p, g) for p, g in zip(pred, gt)]

    totals = {"all": [], "thing": [], "stuff": []}
    for start in range(len(gt) - window_k):
        pa, ga, it = Counter(), Counter(), Counter()
        for t in range(start, start + window_k + 1):
            pa.update(per_frame[t][0])
            ga.update(per_frame[t][1])
            it.update(per_frame[t][2])
        scores = _window_class_scores(pa, ga, it)
        for name, sel in (("all", lambda c: True), ("thing", lambda c: c in things),
                          ("stuff", lambda c: c not in things)):
            vals = [s for c, s in sorted(scores.items()) if sel(c)]
            if vals:
                totals[name].append(float(np.mean(vals)))
    out = tuple(float(np.mean(totals[n])) if totals[n] else 1.0 for n in ("all", "thing", "stuff"))
    return out
