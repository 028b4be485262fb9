"""Hot numeric kernels: numba-jitted versions with pure-numpy fallbacks.

The numpy path is selected when the environment variable CARD_DISABLE_NUMBA
is set to 1/true/yes, or automatically when numba is not importable.
``benchmarks/bench_kernels.py`` times both paths side by side.

The spectral transition kernel is written so that the numba and numpy paths
evaluate the exact same floating-point expressions and are bit-identical
(no fastmath); tests assert this.
"""

import math
import os

import numpy as np

NUMBA_DISABLED = os.environ.get("CARD_DISABLE_NUMBA", "").strip().lower() in (
    "1",
    "true",
    "yes",
)

try:
    from numba import njit, prange

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised via CARD_DISABLE_NUMBA
    NUMBA_AVAILABLE = False

USING_NUMBA = NUMBA_AVAILABLE and not NUMBA_DISABLED


# ---------------------------------------------------------------------------
# Spectral transition: three per-coordinate regimes.
#   unobserved:            N(xi_hat + beta*(xi_next - xi_hat), (eta*sigma_t)^2)
#   0 <= sigma_t < delta:  N(xi_hat + (alpha/delta)*(ups - xi_hat), (eta*sigma_t)^2)
#   sigma_t >= delta:      N((1-eta_b)*xi_hat + eta_b*ups, sigma_t^2 - (eta_b*delta)^2)
# with alpha = sqrt(1-eta^2)*sigma_t and beta = alpha/sigma_next.
# ---------------------------------------------------------------------------


def transition_numpy(xi_next, xi_hat, ups, observed, delta, sigma_t, sigma_next,
                     eta, eta_b, noise, out):
    alpha = math.sqrt(1.0 - eta * eta) * sigma_t
    beta = alpha / sigma_next
    std_ab = eta * sigma_t

    mean_a = xi_hat + beta * (xi_next - xi_hat)
    safe_delta = np.where(delta > 0.0, delta, 1.0)
    with np.errstate(over="ignore", invalid="ignore"):
        # evaluated on all coordinates, selected only where it applies
        mean_b = xi_hat + (alpha / safe_delta) * (ups - xi_hat)
    mean_c = (1.0 - eta_b) * xi_hat + eta_b * ups
    ebd = eta_b * delta
    var_c = sigma_t * sigma_t - ebd * ebd
    std_c = np.sqrt(np.maximum(var_c, 0.0))

    meas_dom = observed & (sigma_t >= delta)
    diff_dom = observed & ~meas_dom
    mean = np.where(meas_dom, mean_c, np.where(diff_dom, mean_b, mean_a))
    std = np.where(meas_dom, std_c, std_ab)
    np.multiply(std, noise, out=out)
    out += mean
    return out


if NUMBA_AVAILABLE:

    @njit(cache=True)
    def transition_numba(xi_next, xi_hat, ups, observed, delta, sigma_t,
                         sigma_next, eta, eta_b, noise, out):
        alpha = math.sqrt(1.0 - eta * eta) * sigma_t
        beta = alpha / sigma_next
        std_ab = eta * sigma_t
        for i in range(xi_next.size):
            h = xi_hat[i]
            if observed[i]:
                d = delta[i]
                if sigma_t >= d:
                    mean = (1.0 - eta_b) * h + eta_b * ups[i]
                    ebd = eta_b * d
                    var_c = sigma_t * sigma_t - ebd * ebd
                    if var_c < 0.0:
                        var_c = 0.0
                    std = math.sqrt(var_c)
                else:
                    mean = h + (alpha / d) * (ups[i] - h)
                    std = std_ab
            else:
                mean = h + beta * (xi_next[i] - h)
                std = std_ab
            out[i] = std * noise[i] + mean
        return out


def transition(xi_next, xi_hat, ups, observed, delta, sigma_t, sigma_next,
               eta, eta_b, noise, out=None):
    """Apply one spectral transition; all array args are flat float64."""
    if out is None:
        out = np.empty_like(xi_next)
    if USING_NUMBA:
        return transition_numba(xi_next, xi_hat, ups, observed, delta,
                                float(sigma_t), float(sigma_next), float(eta),
                                float(eta_b), noise, out)
    return transition_numpy(xi_next, xi_hat, ups, observed, delta,
                            float(sigma_t), float(sigma_next), float(eta),
                            float(eta_b), noise, out)


# ---------------------------------------------------------------------------
# Tilewise matmul: out[c, idx[t, :]] = mat @ src[c, idx[t, :]] for every tile,
# untouched entries keep the values already in out (margin handling).
# ---------------------------------------------------------------------------


def tilewise_matmul_numpy(mat, src, tile_idx, out):
    if tile_idx.shape[0]:
        gathered = src[:, tile_idx]            # (C, T, k)
        out[:, tile_idx] = gathered @ mat.T
    return out


if NUMBA_AVAILABLE:

    @njit(parallel=True, cache=True)
    def tilewise_matmul_numba(mat, src, tile_idx, out):
        n_chan = src.shape[0]
        n_tiles = tile_idx.shape[0]
        k = mat.shape[0]
        for t in prange(n_tiles):
            for c in range(n_chan):
                for i in range(k):
                    acc = 0.0
                    for j in range(k):
                        acc += mat[i, j] * src[c, tile_idx[t, j]]
                    out[c, tile_idx[t, i]] = acc
        return out


def tilewise_matmul(mat, src, tile_idx, out):
    """Multiply every tile of ``src`` by ``mat``, scattering into ``out``."""
    if USING_NUMBA:
        return tilewise_matmul_numba(mat, src, tile_idx, out)
    return tilewise_matmul_numpy(mat, src, tile_idx, out)


# ---------------------------------------------------------------------------
# PNG scanline unfiltering (filters 0..4, serial along each row).
# rows: (h, 1 + stride) uint8 raw scanlines, first byte = filter type.
# Returns (h, stride) uint8 of reconstructed bytes.
# ---------------------------------------------------------------------------


def unfilter_scanlines_numpy(rows, bpp):
    h, w1 = rows.shape
    stride = w1 - 1
    out = np.zeros((h, stride), dtype=np.uint8)
    for r in range(h):
        ftype = int(rows[r, 0])
        cur = rows[r, 1:]
        prev = out[r - 1] if r > 0 else np.zeros(stride, dtype=np.uint8)
        if ftype == 0:
            out[r] = cur
        elif ftype == 2:
            out[r] = cur + prev  # uint8 wraps mod 256 as PNG requires
        elif ftype == 1:
            line = out[r]
            line[:bpp] = cur[:bpp]
            for x in range(bpp, stride):
                line[x] = (int(cur[x]) + int(line[x - bpp])) & 0xFF
        elif ftype == 3:
            line = out[r]
            for x in range(stride):
                left = int(line[x - bpp]) if x >= bpp else 0
                line[x] = (int(cur[x]) + ((left + int(prev[x])) >> 1)) & 0xFF
        elif ftype == 4:
            line = out[r]
            for x in range(stride):
                a = int(line[x - bpp]) if x >= bpp else 0
                b = int(prev[x])
                c = int(out[r - 1, x - bpp]) if (x >= bpp and r > 0) else 0
                p = a + b - c
                pa = abs(p - a)
                pb = abs(p - b)
                pc = abs(p - c)
                if pa <= pb and pa <= pc:
                    pred = a
                elif pb <= pc:
                    pred = b
                else:
                    pred = c
                line[x] = (int(cur[x]) + pred) & 0xFF
        else:
            raise ValueError(f"invalid PNG filter type {ftype}")
    return out


if NUMBA_AVAILABLE:

    @njit(cache=True)
    def _unfilter_numba(rows, bpp, out):
        h = rows.shape[0]
        stride = rows.shape[1] - 1
        for r in range(h):
            ftype = rows[r, 0]
            for x in range(stride):
                cur = int(rows[r, 1 + x])
                a = int(out[r, x - bpp]) if x >= bpp else 0
                b = int(out[r - 1, x]) if r > 0 else 0
                c = int(out[r - 1, x - bpp]) if (x >= bpp and r > 0) else 0
                if ftype == 0:
                    val = cur
                elif ftype == 1:
                    val = cur + a
                elif ftype == 2:
                    val = cur + b
                elif ftype == 3:
                    val = cur + ((a + b) >> 1)
                else:
                    p = a + b - c
                    pa = abs(p - a)
                    pb = abs(p - b)
                    pc = abs(p - c)
                    if pa <= pb and pa <= pc:
                        pred = a
                    elif pb <= pc:
                        pred = b
                    else:
                        pred = c
                    val = cur + pred
                out[r, x] = val & 0xFF
        return out


def unfilter_scanlines(rows, bpp):
    """Undo PNG per-row filtering on raw scanline bytes."""
    if USING_NUMBA:
        if np.any(rows[:, 0] > 4):
            bad = int(rows[rows[:, 0] > 4][0, 0])
            raise ValueError(f"invalid PNG filter type {bad}")
        out = np.zeros((rows.shape[0], rows.shape[1] - 1), dtype=np.uint8)
        return _unfilter_numba(rows, bpp, out)
    return unfilter_scanlines_numpy(rows, bpp)
