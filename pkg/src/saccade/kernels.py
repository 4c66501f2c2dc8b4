"""Hot numeric kernels: windowed area-average resampling of image patches.

Two interchangeable backends:

  * a numba ``@njit`` path (default when numba imports cleanly), and
  * a pure-numpy path built from overlap-weight matrices.

Set ``SACCADE_NUMBA=0`` in the environment to force the numpy path.
Both backends implement exact area averaging: the value of an output cell
is the mean of the input intensity over the rectangular region it covers,
with regions outside the image reading as 0 (black). This makes the
resampler exactly conservative, which the test suite exploits.

Coordinates are continuous pixel units: a window is the half-open box
[top, top+win) x [left, left+win) over an image whose pixel (r, c)
occupies [r, r+1) x [c, c+1).
"""

from __future__ import annotations

import os

import numpy as np

_want_numba = os.environ.get("SACCADE_NUMBA", "1") != "0"
NUMBA_ENABLED = False

if _want_numba:
    try:
        from numba import njit

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover
        _want_numba = False


def _overlap_weights(start: float, win: float, p: int, n: int) -> np.ndarray:
    """(p, n) matrix of overlap lengths between output spans and pixels.

    Row i holds, for each integer pixel [k, k+1) of an n-long axis, the
    length of its intersection with output span
    [start + i*win/p, start + (i+1)*win/p), divided by win/p so rows would
    sum to 1 for an in-bounds window.
    """
    step = win / p
    lo = start + step * np.arange(p)[:, None]
    hi = lo + step
    k = np.arange(n)[None, :]
    ov = np.minimum(hi, k + 1.0) - np.maximum(lo, k.astype(float))
    return np.maximum(ov, 0.0) / step


def _resample_window_np(image: np.ndarray, top: float, left: float,
                        win: float, p: int) -> np.ndarray:
    h, w = image.shape
    wy = _overlap_weights(top, win, p, h)
    wx = _overlap_weights(left, win, p, w)
    return wy @ image @ wx.T


def _extract_batch_np(images, img_idx, top, left, win, p, out):
    for r in range(out.shape[0]):
        out[r] = _resample_window_np(images[img_idx[r]], top[r], left[r], win[r], p)


if NUMBA_ENABLED:

    @njit(cache=True)
    def _resample_window_jit(image, top, left, win, p):  # pragma: no cover - exercised via wrapper
        h, w = image.shape
        out = np.zeros((p, p))
        step = win / p
        for i in range(p):
            ylo = top + i * step
            yhi = ylo + step
            k0 = max(int(np.floor(ylo)), 0)
            k1 = min(int(np.ceil(yhi)), h)
            for j in range(p):
                xlo = left + j * step
                xhi = xlo + step
                l0 = max(int(np.floor(xlo)), 0)
                l1 = min(int(np.ceil(xhi)), w)
                acc = 0.0
                for k in range(k0, k1):
                    wy = min(yhi, k + 1.0) - max(ylo, float(k))
                    if wy <= 0.0:
                        continue
                    for l in range(l0, l1):
                        wx = min(xhi, l + 1.0) - max(xlo, float(l))
                        if wx > 0.0:
                            acc += wy * wx * image[k, l]
                out[i, j] = acc / (step * step)
        return out

    @njit(cache=True)
    def _extract_batch_jit(images, img_idx, top, left, win, p, out):  # pragma: no cover
        for r in range(out.shape[0]):
            out[r] = _resample_window_jit(images[img_idx[r]], top[r], left[r], win[r], p)


def resample_window(image: np.ndarray, top: float, left: float,
                    win: float, p: int) -> np.ndarray:
    """Area-average the window [top, top+win)^2 of ``image`` onto a p x p grid."""
    image = np.ascontiguousarray(image, dtype=np.float64)
    if NUMBA_ENABLED:
        return _resample_window_jit(image, float(top), float(left), float(win), p)
    return _resample_window_np(image, float(top), float(left), float(win), p)


def extract_batch(images: np.ndarray, img_idx: np.ndarray, top: np.ndarray,
                  left: np.ndarray, win: np.ndarray, p: int) -> np.ndarray:
    """Batched resample_window over R rollouts; images indexed per rollout."""
    images = np.ascontiguousarray(images, dtype=np.float64)
    img_idx = np.ascontiguousarray(img_idx, dtype=np.int64)
    top = np.ascontiguousarray(top, dtype=np.float64)
    left = np.ascontiguousarray(left, dtype=np.float64)
    win = np.ascontiguousarray(win, dtype=np.float64)
    out = np.empty((len(img_idx), p, p))
    if NUMBA_ENABLED:
        _extract_batch_jit(images, img_idx, top, left, win, p, out)
    else:
        _extract_batch_np(images, img_idx, top, left, win, p, out)
    return out
