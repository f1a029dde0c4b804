"""Vectorised numpy implementations of the pairwise constraint kernels.

This is the fallback backend; ``_ckernels.pyx`` implements the same
functions as explicit loops. Both take batched float64 arrays:
``boxes`` of shape ``(B, L, 4)`` and ``n_real`` of shape ``(B,)``, with real
elements stored first.
"""
from __future__ import annotations

import numpy as np

G_CLAMP = 1.0 - 1e-8

# rows L, XC, R, T, YC, B; columns cx, cy, w, h
_EDGE_JAC = np.array(
    [
        [1.0, 0.0, -0.5, 0.0],
        [1.0, 0.0, 0.0, 0.0],
        [1.0, 0.0, 0.5, 0.0],
        [0.0, 1.0, 0.0, -0.5],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.5],
    ]
)


def _edges(boxes):
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([cx - w / 2, cx, cx + w / 2, cy - h / 2, cy, cy + h / 2], axis=-1)


def _pair_mask(n_real, L):
    idx = np.arange(L)
    real = idx[None, :] < n_real[:, None]
    pair = real[:, :, None] & real[:, None, :]
    pair &= ~np.eye(L, dtype=bool)[None]
    return real, pair


def local_alignment(boxes, n_real):
    boxes = np.ascontiguousarray(boxes, dtype=np.float64)
    n_real = np.asarray(n_real, dtype=np.int64)
    B, L, _ = boxes.shape
    e = _edges(boxes)  # B, L, 6
    real, pair = _pair_mask(n_real, L)
    diff = e[:, :, None, :] - e[:, None, :, :]  # B, i, j, 6
    absd = np.where(pair[..., None], np.abs(diff), np.inf)
    jstar = np.argmin(absd, axis=2)  # B, i, 6
    delta = np.take_along_axis(absd, jstar[:, :, None, :], axis=2)[:, :, 0, :]
    kstar = np.argmin(delta, axis=2)  # B, i
    dmin = np.take_along_axis(delta, kstar[..., None], axis=2)[..., 0]
    active = real & np.isfinite(dmin)
    dmin = np.where(active, dmin, 0.0)
    clamped = np.minimum(dmin, G_CLAMP)
    loss = np.where(active, -np.log1p(-clamped), 0.0).sum(axis=1)

    dg = np.where(active & (dmin < G_CLAMP), 1.0 / (1.0 - clamped), 0.0)  # B, i
    j = np.take_along_axis(jstar, kstar[..., None], axis=2)[..., 0]
    bi, ii = np.nonzero(active)
    k = kstar[bi, ii]
    jj = j[bi, ii]
    s = np.sign(diff[bi, ii, jj, k]) * dg[bi, ii]
    ge = np.zeros_like(e)
    np.add.at(ge, (bi, ii, k), s)
    np.add.at(ge, (bi, jj, k), -s)
    return loss, ge @ _EDGE_JAC


def exact_alignment_mask(boxes, n_real):
    """``(B, 6, L, L)`` mask of coordinate pairs that coincide exactly."""
    boxes = np.asarray(boxes, dtype=np.float64)
    e = _edges(boxes)
    _, pair = _pair_mask(np.asarray(n_real, dtype=np.int64), boxes.shape[1])
    eq = e[:, :, None, :] == e[:, None, :, :]
    return np.moveaxis(eq & pair[..., None], -1, 1).astype(np.float64)


def threshold_alignment_mask(boxes, n_real, delta, scale_x=1.0, scale_y=1.0):
    """Mask of pairs whose scaled coordinate gap is strictly below ``delta``."""
    boxes = np.asarray(boxes, dtype=np.float64)
    e = _edges(boxes) * np.array([scale_x] * 3 + [scale_y] * 3)
    _, pair = _pair_mask(np.asarray(n_real, dtype=np.int64), boxes.shape[1])
    close = np.abs(e[:, :, None, :] - e[:, None, :, :]) < delta
    return np.moveaxis(close & pair[..., None], -1, 1).astype(np.float64)


def global_alignment(boxes, mask):
    boxes = np.ascontiguousarray(boxes, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    e = np.moveaxis(_edges(boxes), -1, 1)  # B, 6, L
    diff = e[:, :, :, None] - e[:, :, None, :]  # B, 6, i, j
    msum = mask.sum(axis=(2, 3))  # B, 6
    inv = np.where(msum > 0, 1.0 / np.where(msum > 0, msum, 1.0), 0.0)
    s = (np.abs(diff) * mask).sum(axis=(2, 3)) * inv
    s = s.sum(axis=1) / 6.0
    clamped = np.clip(s, 0.0, G_CLAMP)
    loss = -np.log1p(-clamped)
    dls = np.where(s < G_CLAMP, 1.0 / (1.0 - clamped), 0.0)
    sg = np.sign(diff) * mask
    ge = sg.sum(axis=3) - np.swapaxes(sg, 2, 3).sum(axis=3)  # d/dE_i of sum M|E_a - E_b|
    ge = ge * (inv * dls[:, None] / 6.0)[..., None]
    return loss, np.moveaxis(ge, 1, -1) @ _EDGE_JAC


def overlap(boxes, n_real):
    boxes = np.ascontiguousarray(boxes, dtype=np.float64)
    n_real = np.asarray(n_real, dtype=np.int64)
    B, L, _ = boxes.shape
    _, pair = _pair_mask(n_real, L)
    cx, cy, w, h = (boxes[..., k] for k in range(4))
    l, r, t, b = cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2
    wp, hp = np.maximum(w, 0.0), np.maximum(h, 0.0)
    area = wp * hp

    def P(a):
        return a[:, :, None], a[:, None, :]

    (li, lj), (ri, rj), (ti, tj), (bi_, bj) = P(l), P(r), P(t), P(b)
    r_sel = ri <= rj
    l_sel = li >= lj
    b_sel = bi_ <= bj
    t_sel = ti >= tj
    iw = np.where(r_sel, ri, rj) - np.where(l_sel, li, lj)
    ih = np.where(b_sel, bi_, bj) - np.where(t_sel, ti, tj)
    hit = (iw > 0) & (ih > 0) & pair
    inter = np.where(hit, iw * ih, 0.0)
    ai, aj = P(area)
    union = ai + aj - inter
    live = hit & (union > 0)
    safe_u = np.where(live, union, 1.0)
    O = np.where(live, inter / safe_u, 0.0)
    dx = cx[:, :, None] - cx[:, None, :]
    dy = cy[:, :, None] - cy[:, None, :]
    dist = np.sqrt(dx * dx + dy * dy)
    D = np.exp(-dist)
    term = np.where(live, O + D, 0.0)
    npairs = n_real * (n_real - 1)
    norm = np.where(npairs > 0, 1.0 / np.maximum(npairs, 1), 0.0)
    loss = term.sum(axis=(1, 2)) * norm

    c = norm[:, None, None]
    dO_dI = np.where(live, (1.0 / safe_u + inter / safe_u**2), 0.0) * c
    dO_da = np.where(live, -inter / safe_u**2, 0.0) * c
    d_iw = dO_dI * np.where(hit, ih, 0.0)
    d_ih = dO_dI * np.where(hit, iw, 0.0)

    g = np.zeros_like(boxes)
    # intersection edges: d iw/d r_sel = +1, d iw/d l_sel = -1
    g_r = np.where(r_sel, d_iw, 0.0).sum(2) + np.where(~r_sel, d_iw, 0.0).sum(1)
    g_l = -(np.where(l_sel, d_iw, 0.0).sum(2) + np.where(~l_sel, d_iw, 0.0).sum(1))
    g_b = np.where(b_sel, d_ih, 0.0).sum(2) + np.where(~b_sel, d_ih, 0.0).sum(1)
    g_t = -(np.where(t_sel, d_ih, 0.0).sum(2) + np.where(~t_sel, d_ih, 0.0).sum(1))
    g[..., 0] += g_r + g_l
    g[..., 2] += (g_r - g_l) / 2
    g[..., 1] += g_b + g_t
    g[..., 3] += (g_b - g_t) / 2
    # areas: each ordered pair touches area_i and area_j
    da = dO_da.sum(2) + dO_da.sum(1)
    pos = (w > 0) & (h > 0)
    g[..., 2] += np.where(pos, da * hp, 0.0)
    g[..., 3] += np.where(pos, da * wp, 0.0)
    # center distance term
    inv_d = np.where(live & (dist > 0), -D / np.where(dist > 0, dist, 1.0), 0.0) * c
    gx = inv_d * dx
    gy = inv_d * dy
    g[..., 0] += gx.sum(2) - gx.sum(1)
    g[..., 1] += gy.sum(2) - gy.sum(1)
    return loss, g


def iou_matrix(a, b):
    """Plain IoU between every box of ``a (n, 4)`` and ``b (m, 4)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    al, ar = a[:, 0] - a[:, 2] / 2, a[:, 0] + a[:, 2] / 2
    at, ab = a[:, 1] - a[:, 3] / 2, a[:, 1] + a[:, 3] / 2
    bl, br = b[:, 0] - b[:, 2] / 2, b[:, 0] + b[:, 2] / 2
    bt, bb = b[:, 1] - b[:, 3] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.minimum(ar[:, None], br[None]) - np.maximum(al[:, None], bl[None])
    ih = np.minimum(ab[:, None], bb[None]) - np.maximum(at[:, None], bt[None])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area_a = np.maximum(a[:, 2], 0) * np.maximum(a[:, 3], 0)
    area_b = np.maximum(b[:, 2], 0) * np.maximum(b[:, 3], 0)
    union = area_a[:, None] + area_b[None] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
