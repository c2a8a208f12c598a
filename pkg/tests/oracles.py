"""Slow, obviously-correct reference implementations shared by the unit
tests and the acceptance suite."""
import numpy as np


def nearest_loop_oracle(values, flow):
    H, W = values.shape
    out = np.zeros_like(values)
    valid = np.zeros((H, W), bool)
    for y in range(H):
        for x in range(W):
            sx = int(np.floor(x - flow[y, x, 0] + 0.5))
            sy = int(np.floor(y - flow[y, x, 1] + 0.5))
            if 0 <= sx < W and 0 <= sy < H:
                out[y, x] = values[sy, sx]
                valid[y, x] = True
    return out, valid


def bilinear_loop_oracle(values, flow):
    H, W = values.shape
    out = np.zeros((H, W))
    valid = np.zeros((H, W), bool)
    for y in range(H):
        for x in range(W):
            qx, qy = x - flow[y, x, 0], y - flow[y, x, 1]
            if not (0 <= qx <= W - 1 and 0 <= qy <= H - 1):
                continue
            valid[y, x] = True
            x0, y0 = int(np.floor(qx)), int(np.floor(qy))
            ax, ay = qx - x0, qy - y0
            acc = 0.0
            for dy, dx, w in ((0, 0, (1 - ay) * (1 - ax)), (0, 1, (1 - ay) * ax), (1, 0, ay * (1 - ax)), (1, 1, ay * ax)):
                if w:
                    acc += w * values[y0 + dy, x0 + dx]
            out[y, x] = acc
    return out, valid


def flood_fill_oracle(mask, min_size=2):
    H, W = mask.shape
    seen = np.zeros_like(mask, bool)
    comps = []
    for y in range(H):
        for x in range(W):
            if mask[y, x] and not seen[y, x]:
                stack, pix = [(y, x)], []
                seen[y, x] = True
                while stack:
                    cy, cx = stack.pop()
                    pix.append((cy, cx))
                    for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                        if 0 <= ny < H and 0 <= nx < W and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
                if len(pix) >= min_size:
                    m = np.zeros_like(mask, bool)
                    m[tuple(np.array(pix).T)] = True
                    comps.append(m)
    return comps


def exhaustive_loss(centroids, bank):
    """Brute-force reference: loop over every bank entry per centroid."""
    total = 0.0
    by_class = {}
    for c in centroids:
        by_class.setdefault(c.cls, []).append(c)
    for c, group in by_class.items():
        entries = list(bank.entries(c))
        if not entries:
            continue
        bests = []
        for q in group:
            best = None
            for e in entries:
                d = float(np.abs(q.values - e).sum())
                if best is None or d < best:
                    best = d
            bests.append(best)
        total += sum(bests) / len(group)
    return total


def consistency_oracle(labels_prev, labels_t, flow, layers_prev, layers_t):
    """Per-pixel loop: (checked pixels, mismatches) under the backward flow
    rule, skipping out-of-bounds and occluded pixels."""
    H, W = labels_t.shape
    checked = mismatched = 0
    for y in range(H):
        for x in range(W):
            dx, dy = flow[y, x]
            sx, sy = int(round(x - dx)), int(round(y - dy))
            if not (0 <= sx < W and 0 <= sy < H):
                continue
            own = layers_t[y, x]
            src = layers_prev[sy, sx]
            if src != own and src > own:
                continue
            checked += 1
            mismatched += labels_prev[sy, sx] != labels_t[y, x]
    return checked, mismatched


def masked_mean_oracle(features, mask):
    D, H, W = features.shape
    n = 0
    acc = [0.0] * D
    for y in range(H):
        for x in range(W):
            if mask[y, x]:
                n += 1
                for d in range(D):
                    acc[d] += features[d, y, x]
    return [a / n for a in acc]


def confusion_oracle(truth, pred, n, ignore=255):
    cm = np.zeros((n, n), np.int64)
    for t, p in zip(np.ravel(truth), np.ravel(pred)):
        if t != ignore:
            cm[t, p] += 1
    return cm


def iou_oracle(cm):
    ious = []
    for c in range(len(cm)):
        tp = cm[c][c]
        denom = sum(cm[c]) + sum(row[c] for row in cm) - tp
        ious.append(tp / denom if denom else None)
    defined = [v for v in ious if v is not None]
    return ious, sum(defined) / len(defined)


def triple_and_oracle(pred, warped, valid, c):
    H, W = pred.shape
    out = np.zeros((H, W), bool)
    for y in range(H):
        for x in range(W):
            out[y, x] = pred[y, x] == c and warped[y, x] == c and valid[y, x]
    return out
