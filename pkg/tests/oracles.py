"""Brute-force reference implementations and published fixtures used by the tests."""
import numpy as np

SQ3 = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
SQ2 = [(0, 0), (0, 1), (1, 0), (1, 1)]

# rows = ground truth, columns = prediction (irregular, lobular, oval, round)
TABLE2 = np.array([
    [96, 30, 0, 0],
    [33, 83, 1, 0],
    [0, 1, 26, 4],
    [0, 1, 1, 16],
])


def naive_morph(mask, offsets, op):
    """Per-pixel erosion/dilation; pixels outside the image count as background."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            vals = []
            for dy, dx in offsets:
                yy, xx = y + dy, x + dx
                vals.append(mask[yy, xx] if 0 <= yy < h and 0 <= xx < w else 0)
            out[y, x] = max(vals) if op == "dilate" else min(vals)
    return out


def naive_cleanup(mask):
    m = naive_morph(naive_morph(mask, SQ3, "dilate"), SQ3, "erode")
    m = naive_morph(m, SQ2, "erode")
    return naive_morph(m, SQ3, "dilate")


def naive_dice_iou(gt, pred):
    tp = fp = fn = 0
    for a, b in zip(np.ravel(gt), np.ravel(pred)):
        tp += bool(a) and bool(b)
        fp += (not a) and bool(b)
        fn += bool(a) and not b
    if tp + fp + fn == 0:
        return 1.0, 1.0
    return 2 * tp / (2 * tp + fp + fn), tp / (tp + fp + fn)


def rank_auc(scores, positive):
    """Mann-Whitney statistic: P(score_pos > score_neg) + 0.5 P(tie)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(positive, dtype=bool)
    pos, neg = s[y], s[~y]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (pos.size * neg.size)
