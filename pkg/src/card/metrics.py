"""PSNR and SSIM on [0,1]-normalized images.

PSNR uses the flattened-tensor convention: one MSE over all channels and
pixels (recorded in report headers). SSIM follows the standard definition
with an 11x11 Gaussian window, sigma = 1.5, K1 = 0.01, K2 = 0.03, and
dynamic range 1, computed per channel on valid window positions and then
averaged.
"""

import numpy as np

from .tensorio import PlanarImage

PSNR_CAP_DB = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _planes(img):
    if isinstance(img, PlanarImage):
        return img.data
    arr = np.asarray(img, dtype=np.float64)
    return arr[None, :, :] if arr.ndim == 2 else arr


def psnr(reference, test):
    """Peak signal-to-noise ratio in dB, capped at 99 for (near-)identical
    images; both inputs are clamped to [0,1] first."""
    ref = np.clip(_planes(reference), 0.0, 1.0)
    tst = np.clip(_planes(test), 0.0, 1.0)
    if ref.shape != tst.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {tst.shape}")
    mse = float(np.mean((ref - tst) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * np.log10(mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def _local_windows(plane, size):
    # (h-size+1, w-size+1, size, size) view of all valid windows
    return np.lib.stride_tricks.sliding_window_view(plane, (size, size))


def _ssim_plane(x, y, win, c1, c2):
    wx = _local_windows(x, win.shape[0])
    wy = _local_windows(y, win.shape[0])
    mu_x = np.einsum("ijkl,kl->ij", wx, win)
    mu_y = np.einsum("ijkl,kl->ij", wy, win)
    xx = np.einsum("ijkl,kl->ij", wx * wx, win)
    yy = np.einsum("ijkl,kl->ij", wy * wy, win)
    xy = np.einsum("ijkl,kl->ij", wx * wy, win)
    var_x = xx - mu_x**2
    var_y = yy - mu_y**2
    cov = xy - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def ssim(reference, test):
    """Mean structural similarity over valid 11x11 windows, channel-averaged."""
    ref = _planes(reference)
    tst = _planes(test)
    if ref.shape != tst.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {tst.shape}")
    if min(ref.shape[1], ref.shape[2]) < SSIM_WINDOW:
        raise ValueError(
            f"image sides must be at least {SSIM_WINDOW}, got {ref.shape[1:]}")
    win = gaussian_window()
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    vals = [_ssim_plane(ref[c], tst[c], win, c1, c2) for c in range(ref.shape[0])]
    return float(np.mean(vals))
