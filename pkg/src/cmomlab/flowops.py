"""Backward warping, temporal-consensus masks, instance splitting and the
flow-violation metric."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.ndimage as ndi
import scipy.sparse as sp

MIN_INSTANCE_SIZE = 2

_FOUR = ndi.generate_binary_structure(2, 1)


@dataclass
class WarpResult:
    warped: np.ndarray
    validity: np.ndarray  # bool, same spatial shape


class WarpOperator:
    """Backward-warp sampling for one flow field, stored as a sparse matrix.

    ``apply`` maps a ``(..., H, W)`` array to its warp; ``adjoint`` pushes a
    gradient on the warped output back onto the input. The flow is a
    constant of the operator and never differentiated.
    """

    def __init__(self, flow, sampling="bilinear"):
        flow = np.asarray(flow, np.float64)
        H, W = flow.shape[:2]
        self.shape = (H, W)
        yy, xx = np.mgrid[0:H, 0:W]
        qx = xx - flow[..., 0]
        qy = yy - flow[..., 1]
        n = H * W
        rows = np.arange(n)
        if sampling == "nearest":
            ix = np.floor(qx + 0.5).astype(np.int64)
            iy = np.floor(qy + 0.5).astype(np.int64)
            valid = (ix >= 0) & (ix < W) & (iy >= 0) & (iy < H)
            v = valid.ravel()
            cols = (iy * W + ix).ravel()[v]
            mat = sp.csr_matrix((np.ones(cols.size), (rows[v], cols)), shape=(n, n))
        elif sampling == "bilinear":
            valid = (qx >= 0) & (qx <= W - 1) & (qy >= 0) & (qy <= H - 1)
            x0 = np.floor(qx).astype(np.int64)
            y0 = np.floor(qy).astype(np.int64)
            ax = qx - x0
            ay = qy - y0
            r, c, w = [], [], []
            v = valid.ravel()
            for dy, dx, wt in ((0, 0, (1 - ay) * (1 - ax)), (0, 1, (1 - ay) * ax),
                               (1, 0, ay * (1 - ax)), (1, 1, ay * ax)):
                wt = wt.ravel()
                keep = v & (wt != 0)
                r.append(rows[keep])
                c.append(((y0 + dy) * W + (x0 + dx)).ravel()[keep])
                w.append(wt[keep])
            mat = sp.csr_matrix((np.concatenate(w), (np.concatenate(r), np.concatenate(c))), shape=(n, n))
        else:
            raise ValueError(f"unknown sampling {sampling!r}")
        self.matrix = mat
        self.matrix_t = mat.T.tocsr()
        self.validity = valid

    def apply(self, values):
        values = np.asarray(values)
        lead = values.shape[:-2]
        if values.shape[-2:] != self.shape:
            raise ValueError(f"map shape {values.shape[-2:]} does not match flow {self.shape}")
        flat = values.reshape(-1, self.shape[0] * self.shape[1]).astype(np.float64)
        out = (self.matrix @ flat.T).T
        return out.reshape(lead + self.shape)

    def adjoint(self, grad):
        grad = np.asarray(grad, np.float64)
        lead = grad.shape[:-2]
        flat = grad.reshape(-1, self.shape[0] * self.shape[1])
        return (self.matrix_t @ flat.T).T.reshape(lead + self.shape)


def resample_flow(flow, fheight, fwidth):
    """Nearest-neighbor resampling of a flow field to a coarser grid.

    Displacements are rescaled by the grid ratio along each axis.
    """
    flow = np.asarray(flow)
    H, W = flow.shape[:2]
    if (H, W) == (fheight, fwidth):
        return flow
    ys = np.minimum(((np.arange(fheight) + 0.5) * H / fheight).astype(int), H - 1)
    xs = np.minimum(((np.arange(fwidth) + 0.5) * W / fwidth).astype(int), W - 1)
    out = flow[np.ix_(ys, xs)].astype(np.float64)
    out[..., 0] *= fwidth / W
    out[..., 1] *= fheight / H
    return out


def warp_backward(values, flow, sampling="bilinear"):
    """Backward-warp ``values`` (``(H, W)`` or ``(C, H, W)``) by ``flow``.

    Out-of-bounds samples are zero-filled and flagged invalid. Label maps
    should use ``sampling="nearest"``; the result then keeps the input dtype.
    """
    values = np.asarray(values)
    flow = resample_flow(flow, *values.shape[-2:])
    op = WarpOperator(flow, sampling)
    warped = op.apply(values)
    if sampling == "nearest":
        warped = np.rint(warped).astype(values.dtype) if values.dtype.kind in "iub" else warped.astype(values.dtype)
    return WarpResult(warped=warped, validity=op.validity)


def warp_labels(labels, flow, fill=0):
    """Nearest backward warp of an integer label map (no float round trip)."""
    labels = np.asarray(labels)
    flow = resample_flow(flow, *labels.shape)
    H, W = labels.shape
    yy, xx = np.mgrid[0:H, 0:W]
    ix = np.floor(xx - flow[..., 0] + 0.5).astype(np.int64)
    iy = np.floor(yy - flow[..., 1] + 0.5).astype(np.int64)
    valid = (ix >= 0) & (ix < W) & (iy >= 0) & (iy < H)
    out = np.full_like(labels, fill)
    out[valid] = labels[iy[valid], ix[valid]]
    return WarpResult(warped=out, validity=valid)


def consensus_mask(pred_t, warped_prev, c):
    """Pixels predicted ``c`` now and ``c`` in the warped previous frame."""
    return (np.asarray(pred_t) == c) & (np.asarray(warped_prev.warped) == c) & warped_prev.validity


def consensus_masks(pred_t, warped_prev, classes):
    return {c: consensus_mask(pred_t, warped_prev, c) for c in classes}


def split_instances(mask, c=None, category="thing", min_size=MIN_INSTANCE_SIZE):
    """Split a binary class mask into instance masks.

    Thing classes are cut into 4-connected components (ordered by their first
    pixel in raster order, components under ``min_size`` pixels dropped);
    stuff classes come back whole. ``c`` is accepted for symmetry with the
    other per-class helpers and is not used.
    """
    mask = np.asarray(mask, bool)
    if not mask.any():
        return []
    if category == "stuff":
        return [mask.copy()]
    lab, n = ndi.label(mask, structure=_FOUR)
    if n == 0:
        return []
    flat = lab.ravel()
    sizes = np.bincount(flat, minlength=n + 1)
    nz = np.flatnonzero(flat)
    # first raster index of each component
    first = np.full(n + 1, flat.size)
    np.minimum.at(first, flat[nz], nz)
    order = [k for k in np.argsort(first[1:], kind="stable") + 1 if sizes[k] >= min_size]
    return [lab == k for k in order]


def flow_violation_rate(map_prev, map_t, flow):
    """Fraction of in-bounds pixels where the nearest-warped previous map
    disagrees with the current map. Returns 0 when no pixel is valid."""
    w = warp_labels(map_prev, flow)
    n = int(w.validity.sum())
    if n == 0:
        return 0.0
    return float(((w.warped != np.asarray(map_t)) & w.validity).sum()) / n
