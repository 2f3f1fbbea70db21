"""Loop-based reference implementations used to check the vectorised code paths.

Nothing here touches numpy reductions or KD-trees: counts come from
element-by-element loops and distances from all-pairs comparisons.
"""

import itertools
import math


def _points(mask):
    shape = mask.shape
    return [idx for idx in itertools.product(*(range(s) for s in shape)) if mask[idx]]


def counts(pred, gt):
    tp = fp = tn = fn = 0
    for idx in itertools.product(*(range(s) for s in pred.shape)):
        p, g = bool(pred[idx]), bool(gt[idx])
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def dsc(pred, gt):
    tp, fp, _, fn = counts(pred, gt)
    return 1.0 if fp + 2 * tp + fn == 0 else 2 * tp / (fp + 2 * tp + fn)


def sensitivity(pred, gt):
    tp, _, _, fn = counts(pred, gt)
    return 1.0 if tp + fn == 0 else tp / (tp + fn)


def specificity(pred, gt):
    _, fp, tn, _ = counts(pred, gt)
    return 1.0 if tn + fp == 0 else tn / (tn + fp)


def volume_similarity(pred, gt):
    m = sum(1 for _ in _points(gt))
    w = sum(1 for _ in _points(pred))
    return 0.0 if m + w == 0 else (2 * m - w) / (m + w)


def _dist(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def directed(src, dst):
    return [min(_dist(u, v) for v in dst) for u in src]


def hausdorff(pred, gt):
    u, v = _points(gt), _points(pred)
    return max(max(directed(u, v)), max(directed(v, u)))


def percentile(values, q):
    """Linear-interpolation percentile (same convention as numpy's default)."""
    xs = sorted(values)
    pos = (len(xs) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (xs[hi] - xs[lo]) * (pos - lo)


def hd95(pred, gt):
    u, v = _points(gt), _points(pred)
    return percentile(directed(u, v) + directed(v, u), 95.0)


def soft_dice_loss(p_fg, t_fg):
    """Two-class soft Dice loss from flat foreground probability and target lists."""
    eps = 1e-6
    p_bg = [1.0 - p for p in p_fg]
    t_bg = [1.0 - t for t in t_fg]
    total = 0.0
    for p, t in ((p_fg, t_fg), (p_bg, t_bg)):
        inter = sum(a * b for a, b in zip(p, t))
        total += (2 * inter + eps) / (sum(p) + sum(t) + eps)
    return 2 - total
