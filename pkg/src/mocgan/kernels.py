"""Phrase layout compositing kernels.

Two interchangeable backends over plain numpy arrays:

* ``numba`` - per-pixel ``@njit`` loops (default when numba imports);
* ``numpy`` - per-phrase vectorized window updates.

Set ``MOCGAN_DISABLE_NUMBA=1`` to force the numpy path.  Both produce
identical results; ``benchmarks/bench_layout.py`` compares their speed.

Rasterization: pixel (r, c) belongs to box (x0, y0, x1, y1) iff its center
((c + 0.5) / W, (r + 0.5) / H) lies in [x0, x1) x [y0, y1).
"""
from __future__ import annotations

import logging
import os

import numpy as np

log = logging.getLogger(__name__)

MERGE_MODES = ("max", "sum_then_max")

try:
    if os.environ.get("MOCGAN_DISABLE_NUMBA", "") not in ("", "0"):
        raise ImportError("numba disabled by MOCGAN_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


def pixel_range(lo: float, hi: float, n: int) -> tuple[int, int]:
    """Half-open index range of cells whose centers fall in [lo, hi)."""
    centers = (np.arange(n) + 0.5) / n
    return int(np.searchsorted(centers, lo, "left")), int(np.searchsorted(centers, hi, "left"))


def box_ranges(boxes: np.ndarray, H: int, W: int) -> np.ndarray:
    """(n, 4) normalized boxes -> (n, 4) int ranges (c0, r0, c1, r1)."""
    xc = (np.arange(W) + 0.5) / W
    yc = (np.arange(H) + 0.5) / H
    b = np.asarray(boxes, dtype=np.float64)
    return np.stack([
        np.searchsorted(xc, b[:, 0], "left"),
        np.searchsorted(yc, b[:, 1], "left"),
        np.searchsorted(xc, b[:, 2], "left"),
        np.searchsorted(yc, b[:, 3], "left"),
    ], axis=1).astype(np.int64)


def _compose_numpy(v_o, v_r, ranges, pairs, H, W, merge_max):
    D = v_o.shape[1]
    out = np.zeros((H, W, D), dtype=np.float32)
    covered = np.zeros((H, W), dtype=bool)
    for p in range(pairs.shape[0]):
        i, k = pairs[p]
        ri, rk = ranges[i], ranges[k]
        ux0, uy0 = min(ri[0], rk[0]), min(ri[1], rk[1])
        ux1, uy1 = max(ri[2], rk[2]), max(ri[3], rk[3])
        if ux1 <= ux0 or uy1 <= uy0:
            continue
        m = np.empty((uy1 - uy0, ux1 - ux0, D), dtype=np.float32)
        m[:] = v_r[p]
        in_i = np.zeros(m.shape[:2], dtype=bool)
        in_i[ri[1] - uy0:ri[3] - uy0, ri[0] - ux0:ri[2] - ux0] = True
        in_k = np.zeros(m.shape[:2], dtype=bool)
        in_k[rk[1] - uy0:rk[3] - uy0, rk[0] - ux0:rk[2] - ux0] = True
        m[in_i] = v_o[i]
        m[in_k & ~in_i] = v_o[k]
        m[in_k & in_i] = np.maximum(v_o[i], v_o[k])
        win = out[uy0:uy1, ux0:ux1]
        if merge_max:
            cov = covered[uy0:uy1, ux0:ux1, None]
            win[...] = np.where(cov, np.maximum(win, m), m)
        else:
            win += m
        covered[uy0:uy1, ux0:ux1] = True
    return out


def _compose_loops(v_o, v_r, ranges, pairs, H, W, merge_max):
    D = v_o.shape[1]
    out = np.zeros((H, W, D), dtype=np.float32)
    covered = np.zeros((H, W), dtype=np.bool_)
    for p in range(pairs.shape[0]):
        i = pairs[p, 0]
        k = pairs[p, 1]
        ix0, iy0, ix1, iy1 = ranges[i, 0], ranges[i, 1], ranges[i, 2], ranges[i, 3]
        kx0, ky0, kx1, ky1 = ranges[k, 0], ranges[k, 1], ranges[k, 2], ranges[k, 3]
        ux0, uy0 = min(ix0, kx0), min(iy0, ky0)
        ux1, uy1 = max(ix1, kx1), max(iy1, ky1)
        for y in range(uy0, uy1):
            for x in range(ux0, ux1):
                in_i = ix0 <= x < ix1 and iy0 <= y < iy1
                in_k = kx0 <= x < kx1 and ky0 <= y < ky1
                first = not covered[y, x]
                for d in range(D):
                    if in_i and in_k:
                        val = max(v_o[i, d], v_o[k, d])
                    elif in_i:
                        val = v_o[i, d]
                    elif in_k:
                        val = v_o[k, d]
                    else:
                        val = v_r[p, d]
                    if not merge_max:
                        out[y, x, d] += val
                    elif first or val > out[y, x, d]:
                        out[y, x, d] = val
                covered[y, x] = True
    return out


if HAVE_NUMBA:
    _compose_numba = njit(cache=True, nogil=True)(_compose_loops)


def compose_layout(v_o, v_r, boxes, pairs, H, W, merge="max", backend=None) -> np.ndarray:
    """Phrase layout map for one image.

    v_o (n, D) object vectors; v_r (T_p, D) relation vectors; boxes (n, 4)
    normalized; pairs (T_p, 2) local (subject, object) positions.  Each phrase
    paints its subject box, its object box (element-wise max where they
    overlap) and its relation vector in the rest of their union box.  With
    ``merge="max"`` phrases combine by element-wise max over the phrases that
    cover a pixel; ``"sum_then_max"`` sums them instead.  Uncovered pixels are
    0.  Returns (D, H, W) float32.
    """
    if merge not in MERGE_MODES:
        raise ValueError(f"layout merge must be one of {MERGE_MODES}")
    backend = backend or BACKEND
    v_o = np.ascontiguousarray(v_o, dtype=np.float32)
    v_r = np.ascontiguousarray(v_r, dtype=np.float32)
    pairs = np.ascontiguousarray(pairs, dtype=np.int64).reshape(-1, 2)
    ranges = box_ranges(np.asarray(boxes).reshape(-1, 4), H, W)
    empty = (ranges[:, 2] <= ranges[:, 0]) | (ranges[:, 3] <= ranges[:, 1])
    if empty.any():
        log.debug("layout %dx%d: %d box(es) smaller than one cell contribute nothing", H, W, int(empty.sum()))
    merge_max = merge == "max"
    if backend == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is unavailable or disabled")
        out = _compose_numba(v_o, v_r, ranges, pairs, H, W, merge_max)
    elif backend == "numpy":
        out = _compose_numpy(v_o, v_r, ranges, pairs, H, W, merge_max)
    elif backend == "python":
        out = _compose_loops(v_o, v_r, ranges, pairs, H, W, merge_max)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return np.ascontiguousarray(out.transpose(2, 0, 1))
