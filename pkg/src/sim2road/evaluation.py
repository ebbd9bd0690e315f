"""3D detection evaluation: rotated-box IoU, greedy matching, precision/recall and mAP.

Difficulty levels are distance bins on the ground-truth bottom center,
measured in the x-y plane from the world origin (the sensor mast foot in
synthetic scenes).  Within a bin, ground truth outside the bin is ignored:
detections claiming it are neither true nor false positives, and unmatched
detections lying outside the bin are dropped as well.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._validation import check_finite_scalar
from .exceptions import ConfigError, InvalidArgumentError

DIFFICULTY_NAMES = ("easy", "mod", "hard")
VERTEX_TOL = 1e-9


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation protocol settings.

    ``recall_points=None`` switches to continuous (all-point) AP.
    """

    iou_threshold: float = 0.1
    recall_points: int = 40
    max_range: float = 120.0
    difficulty_bins: tuple = ((0.0, 40.0), (40.0, 80.0), (80.0, 120.0))

    def __post_init__(self):
        thr = check_finite_scalar(self.iou_threshold, "iou_threshold")
        if not 0.0 < thr <= 1.0:
            raise ConfigError(f"iou_threshold must lie in (0, 1], got {thr}")
        object.__setattr__(self, "iou_threshold", thr)
        if self.recall_points is not None and int(self.recall_points) < 2:
            raise ConfigError(f"recall_points must be >= 2, got {self.recall_points}")
        max_range = check_finite_scalar(self.max_range, "max_range")
        if max_range <= 0:
            raise ConfigError("max_range must be positive")
        object.__setattr__(self, "max_range", max_range)
        bins = tuple((float(lo), float(hi)) for lo, hi in self.difficulty_bins)
        if not bins:
            raise ConfigError("at least one difficulty bin is required")
        if bins[0][0] != 0.0 or bins[-1][1] != max_range:
            raise ConfigError(f"difficulty bins must span (0, {max_range}], got {bins}")
        for (lo, hi), nxt in zip(bins, bins[1:] + (None,)):
            if not lo < hi:
                raise ConfigError(f"empty difficulty bin ({lo}, {hi}]")
            if nxt is not None and nxt[0] != hi:
                raise ConfigError(f"difficulty bins must be contiguous, got {bins}")
        object.__setattr__(self, "difficulty_bins", bins)


@dataclass
class EvalReport:
    """Evaluation summary.

    ``precision`` and ``recall`` are ratios in [0, 1]; every ``map_*`` value
    is a percentage in [0, 100], or ``None`` when no class has ground truth
    in that bin.
    """

    precision: float
    recall: float
    map_easy: float = None
    map_mod: float = None
    map_hard: float = None
    map_overall: float = None
    map_by_bin: list = field(default_factory=list)
    per_class: dict = field(default_factory=dict)
    no_detections: bool = False
    num_gt: int = 0
    num_det: int = 0
    true_positives: int = 0
    false_positives: int = 0
    iou_threshold: float = 0.1

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def format_table(self, title="Method"):
        """Plain-text table with Precision, Recall and mAP per difficulty."""

        def pct(v):
            return "   n/a" if v is None else f"{v:6.2f}"

        header = f"{title:<16} {'Precision':>9} {'Recall':>7} | {'Easy':>6} {'Mod.':>6} {'Hard':>6} {'Overall':>7}"
        row = (
            f"{'result':<16} {self.precision:9.4f} {self.recall:7.4f} | "
            f"{pct(self.map_easy)} {pct(self.map_mod)} {pct(self.map_hard)} {pct(self.map_overall):>7}"
        )
        lines = [f"mAP_3D@{self.iou_threshold:g}", header, "-" * len(header), row]
        if self.per_class:
            lines.append("")
            for name, stats in sorted(self.per_class.items()):
                vals = stats["ap_by_bin"]
                cells = " ".join(pct(v) for v in (vals + [None] * 3)[:3])
                lines.append(f"{name:<16} {'':>9} {'':>7} | {cells} {pct(stats['ap_overall']):>7}")
        return "\n".join(lines) + "\n"


# -- rotated box IoU ---------------------------------------------------------


def bev_polygon(box):
    """Counter-clockwise footprint corners of an upright box, shape (4, 2)."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = box.length / 2.0, box.width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(box.location[:2])


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _line_intersection(p, q, a, b):
    """Intersection of segment p-q with the infinite line through a-b."""
    dp = _cross(a, b, p)
    dq = _cross(a, b, q)
    t = dp / (dp - dq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def clip_convex_polygon(subject, clip):
    """Sutherland-Hodgman clipping of ``subject`` against convex CCW ``clip``."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for k in range(n):
        if not output:
            break
        a, b = tuple(clip[k]), tuple(clip[(k + 1) % n])
        inputs, output = output, []
        prev = inputs[-1]
        prev_in = _cross(a, b, prev) >= -VERTEX_TOL
        for cur in inputs:
            cur_in = _cross(a, b, cur) >= -VERTEX_TOL
            if cur_in:
                if not prev_in:
                    output.append(_line_intersection(prev, cur, a, b))
                output.append(cur)
            elif prev_in:
                output.append(_line_intersection(prev, cur, a, b))
            prev, prev_in = cur, cur_in
        output = _dedupe(output)
    return output


def _dedupe(points):
    out = []
    for p in points:
        if not out or abs(p[0] - out[-1][0]) > VERTEX_TOL or abs(p[1] - out[-1][1]) > VERTEX_TOL:
            out.append(p)
    if len(out) > 1 and abs(out[0][0] - out[-1][0]) <= VERTEX_TOL and abs(out[0][1] - out[-1][1]) <= VERTEX_TOL:
        out.pop()
    return out


def polygon_area(points):
    if len(points) < 3:
        return 0.0
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:] + points[:1]):
        area += x0 * y1 - x1 * y0
    return abs(area) / 2.0


def iou_3d(a, b):
    """Volume IoU of two upright yaw-rotated boxes.

    Footprints are intersected in bird's-eye view by polygon clipping and
    multiplied by the vertical overlap; pitch and roll are ignored.
    """
    z_lo = max(a.location[2], b.location[2])
    z_hi = min(a.location[2] + a.height, b.location[2] + b.height)
    dz = z_hi - z_lo
    if dz <= 0:
        return 0.0
    ra = math.hypot(a.length, a.width) / 2.0
    rb = math.hypot(b.length, b.width) / 2.0
    if math.hypot(a.location[0] - b.location[0], a.location[1] - b.location[1]) >= ra + rb:
        return 0.0
    inter_area = polygon_area(clip_convex_polygon(bev_polygon(a), bev_polygon(b)))
    inter = inter_area * dz
    union = a.volume + b.volume - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


# -- AP ----------------------------------------------------------------------


def bev_distance(box):
    return math.hypot(box.location[0], box.location[1])


def _in_bin(dist, lo, hi):
    return (lo < dist <= hi) or (lo == 0.0 and dist == 0.0)


def average_precision(scores, is_tp, num_gt, recall_points=40):
    """AP from scored true/false-positive flags.

    Precision and recall are sampled only where the score changes, so
    detections with equal scores form a single operating point.  With an
    integer ``recall_points`` N the interpolated precision is averaged at
    recalls 1/N, 2/N, ..., 1; with ``None`` the area under the interpolated
    curve is returned.  Result is a ratio in [0, 1].
    """
    if num_gt == 0:
        raise InvalidArgumentError("AP is undefined without ground truth")
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    scores, is_tp = scores[order], is_tp[order]
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~is_tp)
    last_of_group = np.append(scores[1:] != scores[:-1], True)
    tp, fp = tp[last_of_group], fp[last_of_group]
    precision = tp / (tp + fp)
    recall = tp / num_gt
    # interpolated precision: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if recall_points is None:
        prev_recall = np.concatenate([[0.0], recall[:-1]])
        return float(np.sum((recall - prev_recall) * envelope))
    grid = np.arange(1, int(recall_points) + 1) / int(recall_points)
    idx = np.searchsorted(recall, grid - 1e-12, side="left")
    vals = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(vals.mean())


def _match_frames(dets, gts, lo, hi, thr, iou_cache):
    """Greedy per-class matching inside one distance bin.

    Returns ``(scores, is_tp, n_valid_gt)`` for the non-ignored detections.
    """
    entries = []
    for f, frame_dets in enumerate(dets):
        for i, d in enumerate(frame_dets):
            entries.append((-d.confidence, f, i))
    entries.sort()
    claimed = [np.zeros(len(g), dtype=bool) for g in gts]
    valid_gt = [np.array([_in_bin(bev_distance(g), lo, hi) for g in frame], dtype=bool) for frame in gts]
    scores, flags = [], []
    for neg_conf, f, i in entries:
        det = dets[f][i]
        best_j, best_key = -1, None
        for j in range(len(gts[f])):
            if claimed[f][j]:
                continue
            iou = iou_cache[f][i, j]
            if iou >= thr:
                key = (iou, bool(valid_gt[f][j]), -j)
                if best_key is None or key > best_key:
                    best_j, best_key = j, key
        if best_j >= 0:
            claimed[f][best_j] = True
            if valid_gt[f][best_j]:
                scores.append(-neg_conf)
                flags.append(True)
        elif _in_bin(bev_distance(det), lo, hi):
            scores.append(-neg_conf)
            flags.append(False)
    n_valid = int(sum(v.sum() for v in valid_gt))
    return scores, flags, n_valid


def evaluate(detections, ground_truth, cfg=None):
    """Score per-frame 3D detections against per-frame ground truth.

    Args:
        detections: list (one entry per frame) of lists of Box3D with
            confidences.
        ground_truth: list of lists of Box3D, same frame count.
        cfg: :class:`EvalConfig`.

    Returns:
        :class:`EvalReport`.
    """
    cfg = cfg or EvalConfig()
    if len(detections) != len(ground_truth):
        raise InvalidArgumentError(
            f"detections cover {len(detections)} frames but ground truth covers {len(ground_truth)}"
        )

    def in_range(box):
        return bev_distance(box) <= cfg.max_range

    dets = [[d for d in frame if in_range(d)] for frame in detections]
    gts = [[g for g in frame if in_range(g)] for frame in ground_truth]
    gt_classes = sorted({g.class_label for frame in gts for g in frame})
    all_classes = sorted(set(gt_classes) | {d.class_label for frame in dets for d in frame})
    bins = list(cfg.difficulty_bins) + [(0.0, cfg.max_range)]

    per_class = {}
    total_tp = total_fp = 0
    ap_table = {}
    for cls in all_classes:
        cdets = [[d for d in frame if d.class_label == cls] for frame in dets]
        cgts = [[g for g in frame if g.class_label == cls] for frame in gts]
        cache = [
            np.array([[iou_3d(d, g) for g in fg] for d in fd], dtype=np.float64).reshape(len(fd), len(fg))
            for fd, fg in zip(cdets, cgts)
        ]
        aps = []
        for b, (lo, hi) in enumerate(bins):
            scores, flags, n_gt = _match_frames(cdets, cgts, lo, hi, cfg.iou_threshold, cache)
            ap = None
            if n_gt > 0:
                ap = 100.0 * average_precision(scores, flags, n_gt, cfg.recall_points)
            aps.append(ap)
            if b == len(bins) - 1:
                tp = int(sum(flags))
                fp = len(flags) - tp
                total_tp += tp
                total_fp += fp
                overall_counts = (tp, fp, n_gt)
        ap_table[cls] = aps
        per_class[cls] = {
            "ap_by_bin": aps[:-1],
            "ap_overall": aps[-1],
            "num_gt": overall_counts[2],
            "num_det": sum(len(f) for f in cdets),
            "true_positives": overall_counts[0],
            "false_positives": overall_counts[1],
        }

    def mean_ap(b):
        vals = [ap_table[c][b] for c in gt_classes if ap_table[c][b] is not None]
        return float(np.mean(vals)) if vals else None

    map_by_bin = [mean_ap(b) for b in range(len(bins) - 1)]
    named = dict(zip(DIFFICULTY_NAMES, map_by_bin)) if len(map_by_bin) == 3 else {}
    num_gt = sum(len(f) for f in gts)
    num_det = sum(len(f) for f in dets)
    n_scored = total_tp + total_fp
    return EvalReport(
        precision=total_tp / n_scored if n_scored else 0.0,
        recall=total_tp / num_gt if num_gt else 0.0,
        map_easy=named.get("easy"),
        map_mod=named.get("mod"),
        map_hard=named.get("hard"),
        map_overall=mean_ap(len(bins) - 1),
        map_by_bin=map_by_bin,
        per_class=per_class,
        no_detections=num_det == 0,
        num_gt=num_gt,
        num_det=num_det,
        true_positives=total_tp,
        false_positives=total_fp,
        iou_threshold=cfg.iou_threshold,
    )
