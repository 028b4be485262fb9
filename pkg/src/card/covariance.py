"""Patch-level noise covariances: construction, estimation, whitening,
perturbation, and correlated-noise sampling.

Covariances are always stored symmetric, positive definite, and normalized
to unit mean diagonal; the task noise magnitude lives entirely in sigma_y.
Patches are vectorized row-major within the tile.
"""

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import tensorio
from .tensorio import PlanarImage

LUMA_WEIGHTS = (0.2126, 0.7152, 0.0722)

# stream tag for margin pixels in the per-tile counter-based RNG keying
_MARGIN_STREAM = 1 << 47


class CovarianceError(Exception):
    pass


class NotPositiveDefiniteError(CovarianceError):
    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


@dataclass
class CovarianceModel:
    """Unit-mean-diagonal SPD covariance over vectorized patches."""

    patch_h: int
    patch_w: int
    matrix: np.ndarray
    provenance: dict
    normalization_scale: float

    @property
    def d(self):
        return self.patch_h * self.patch_w


@dataclass
class WhiteningTransform:
    """Cholesky factor L (L L^T = Sigma) and whitener W = L^-1."""

    cholesky_L: np.ndarray
    W: np.ndarray
    d: int


@dataclass
class PatchGrid:
    """Non-overlapping tiling of an image by patch_h x patch_w tiles.

    Tiles cover the largest top-left region divisible by the patch size;
    the remaining margin rows/columns are recorded as uncovered.
    """

    height: int
    width: int
    patch_h: int
    patch_w: int
    tile_indices: np.ndarray = field(repr=False)   # (n_tiles, d) flat pixel ids
    margin_indices: np.ndarray = field(repr=False)  # (n_margin,) flat pixel ids

    @property
    def n_tiles(self):
        return self.tile_indices.shape[0]

    @property
    def origins(self):
        rows = self.height // self.patch_h
        cols = self.width // self.patch_w
        return [(r * self.patch_h, c * self.patch_w)
                for r in range(rows) for c in range(cols)]


def make_patch_grid(height, width, patch_h, patch_w):
    if patch_h < 1 or patch_w < 1:
        raise ValueError("patch dimensions must be positive")
    rows = height // patch_h
    cols = width // patch_w
    pix = np.arange(height * width, dtype=np.int64).reshape(height, width)
    tiles = []
    for r in range(rows):
        for c in range(cols):
            block = pix[r * patch_h:(r + 1) * patch_h, c * patch_w:(c + 1) * patch_w]
            tiles.append(block.reshape(-1))
    d = patch_h * patch_w
    tile_indices = (np.array(tiles, dtype=np.int64)
                    if tiles else np.zeros((0, d), dtype=np.int64))
    covered = np.zeros(height * width, dtype=bool)
    if tiles:
        covered[tile_indices.reshape(-1)] = True
    margin = np.nonzero(~covered)[0]
    return PatchGrid(height, width, patch_h, patch_w, tile_indices, margin)


def _symmetrize(mat):
    return (mat + mat.T) / 2.0


def _normalize_unit_diagonal(mat):
    scale = float(np.mean(np.diag(mat)))
    if scale <= 0.0:
        raise CovarianceError("covariance has non-positive mean diagonal")
    return mat / scale, scale


def _check_spd(mat, context):
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        min_eig = float(np.linalg.eigvalsh(mat)[0])
        raise NotPositiveDefiniteError(
            f"{context}: matrix is not positive definite "
            f"(smallest eigenvalue estimate {min_eig:.3e})",
            min_eigenvalue=min_eig,
        ) from None


def build_synthetic_covariance(sigma, alpha, band_offsets, epsilon, patch_h, patch_w):
    """Banded synthetic covariance sigma^2 (I + alpha B) + epsilon I, normalized."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if alpha < 0 or epsilon < 0:
        raise ValueError("alpha and epsilon must be non-negative")
    d = patch_h * patch_w
    band_offsets = [int(o) for o in band_offsets]
    for off in band_offsets:
        if not 1 <= off <= d - 1:
            raise ValueError(f"band offset {off} out of range for d={d}")
    band = np.zeros((d, d))
    for off in band_offsets:
        idx = np.arange(d - off)
        band[idx, idx + off] = 1.0
        band[idx + off, idx] = 1.0
    raw = sigma**2 * (np.eye(d) + alpha * band) + epsilon * np.eye(d)
    mat, scale = _normalize_unit_diagonal(_symmetrize(raw))
    _check_spd(mat, "build_synthetic_covariance")
    provenance = {
        "kind": "synthetic",
        "sigma": float(sigma),
        "alpha": float(alpha),
        "band_offsets": band_offsets,
        "epsilon": float(epsilon),
    }
    return CovarianceModel(patch_h, patch_w, mat, provenance, scale)


def offsets_for_2d_neighbors(patch_w, neighborhood):
    """Map 2-d pixel adjacency to offsets in the row-major patch vector."""
    if patch_w < 2:
        raise ValueError("patch_w must be at least 2")
    table = {
        "horizontal": [1],
        "vertical": [patch_w],
        "plus": [1, patch_w],
    }
    if neighborhood not in table:
        raise ValueError(f"unknown neighborhood {neighborhood!r}")
    return table[neighborhood]


def luminance(img):
    """Linear luminance of an RGB image."""
    if img.channels != 3:
        raise ValueError(f"luminance needs 3 channels, got {img.channels}")
    wr, wg, wb = LUMA_WEIGHTS
    lum = wr * img.data[0] + wg * img.data[1] + wb * img.data[2]
    return PlanarImage(lum[None, :, :])


def _extract_patches(plane, patch_h, patch_w):
    h, w = plane.shape
    rows = h // patch_h
    cols = w // patch_w
    if rows == 0 or cols == 0:
        return np.zeros((0, patch_h * patch_w))
    trimmed = plane[: rows * patch_h, : cols * patch_w]
    blocks = trimmed.reshape(rows, patch_h, cols, patch_w).transpose(0, 2, 1, 3)
    return blocks.reshape(rows * cols, patch_h * patch_w)


def estimate_covariance(dark_frames, patch_h, patch_w):
    """Sample covariance of vectorized dark-frame patches.

    Frames are reduced to luminance, tiled into non-overlapping patches,
    and the per-pixel mean is subtracted from each row of the stacked
    patch matrix before estimating the covariance.
    """
    if not dark_frames:
        raise ValueError("estimate_covariance needs at least one frame")
    shape = (dark_frames[0].height, dark_frames[0].width)
    d = patch_h * patch_w

    def patch_batches():
        for frame in dark_frames:
            if (frame.height, frame.width) != shape:
                raise ValueError("all dark frames must share the same size")
            plane = (luminance(frame).data[0] if frame.channels == 3
                     else frame.data[0])
            yield _extract_patches(plane, patch_h, patch_w)

    # two passes keep memory at one frame's patches even for millions of N
    n = 0
    total = np.zeros(d)
    for batch in patch_batches():
        n += batch.shape[0]
        total += batch.sum(axis=0)
    if n < 2:
        raise ValueError(f"need at least 2 patches, got {n}")
    mean = total / n
    acc = np.zeros((d, d))
    for batch in patch_batches():
        centered = batch - mean
        acc += centered.T @ centered
    cov = _symmetrize(acc / (n - 1))
    cov += (1e-8 * np.trace(cov) / d) * np.eye(d)
    try:
        mat, scale = _normalize_unit_diagonal(cov)
        _check_spd(mat, "estimate_covariance")
    except CovarianceError as exc:
        raise NotPositiveDefiniteError(
            f"estimate_covariance: degenerate input, covariance is rank "
            f"deficient even after regularization ({exc})"
        ) from exc
    provenance = {"kind": "estimated", "num_patches": int(n), "source_id": ""}
    return CovarianceModel(patch_h, patch_w, mat, provenance, scale)


def cholesky_whitener(cov):
    """Cholesky factorization L L^T = Sigma and whitener W = L^-1."""
    try:
        chol = np.linalg.cholesky(cov.matrix)
    except np.linalg.LinAlgError:
        min_eig = float(np.linalg.eigvalsh(cov.matrix)[0])
        raise NotPositiveDefiniteError(
            f"cholesky_whitener: covariance is not positive definite "
            f"(smallest eigenvalue estimate {min_eig:.3e})",
            min_eigenvalue=min_eig,
        ) from None
    w = scipy.linalg.solve_triangular(chol, np.eye(cov.d), lower=True)
    return WhiteningTransform(chol, w, cov.d)


def _tile_rng(seed, channel, stream):
    key = np.array([np.uint64(seed) & np.uint64(0xFFFFFFFFFFFFFFFF),
                    (np.uint64(channel) << np.uint64(48)) | np.uint64(stream)],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_correlated_noise(cov, sigma_y, grid, channels, seed):
    """Correlated Gaussian noise image: per tile n = sigma_y * L z.

    Each (channel, tile) pair draws from its own counter-based stream, so
    the result is independent of tile evaluation order. Margin pixels get
    i.i.d. sigma_y * N(0,1).
    """
    if sigma_y < 0:
        raise ValueError("sigma_y must be non-negative")
    if (grid.patch_h, grid.patch_w) != (cov.patch_h, cov.patch_w):
        raise ValueError(
            f"grid patch {grid.patch_h}x{grid.patch_w} does not match "
            f"covariance patch {cov.patch_h}x{cov.patch_w}"
        )
    out = np.zeros((channels, grid.height * grid.width))
    if sigma_y == 0:
        return PlanarImage(out.reshape(channels, grid.height, grid.width))
    chol = np.linalg.cholesky(cov.matrix)
    for c in range(channels):
        for t in range(grid.n_tiles):
            z = _tile_rng(seed, c, t).standard_normal(cov.d)
            out[c, grid.tile_indices[t]] = sigma_y * (chol @ z)
        if grid.margin_indices.size:
            z = _tile_rng(seed, c, _MARGIN_STREAM).standard_normal(
                grid.margin_indices.size)
            out[c, grid.margin_indices] = sigma_y * z
    return PlanarImage(out.reshape(channels, grid.height, grid.width))


def perturb_covariance(cov, level, seed):
    """Add scaled random symmetric noise, then project back to the SPD cone."""
    if level < 0:
        raise ValueError("perturbation level must be non-negative")
    if level == 0:
        provenance = {"kind": "perturbed",
                      "base_id": cov.provenance.get("kind", "unknown"),
                      "base": cov.provenance, "level": 0.0, "seed": int(seed)}
        return CovarianceModel(cov.patch_h, cov.patch_w, cov.matrix.copy(),
                               provenance, cov.normalization_scale)
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((cov.d, cov.d))
    sym = _symmetrize(raw)
    sym *= level * np.linalg.norm(cov.matrix, "fro") / np.linalg.norm(sym, "fro")
    perturbed = cov.matrix + sym
    # SPD projection: clip eigenvalues at a small positive floor
    floor = 1e-6 * float(np.mean(np.diag(perturbed)))
    eigvals, eigvecs = np.linalg.eigh(perturbed)
    eigvals = np.maximum(eigvals, floor)
    projected = _symmetrize((eigvecs * eigvals) @ eigvecs.T)
    mat, scale = _normalize_unit_diagonal(projected)
    provenance = {"kind": "perturbed",
                  "base_id": cov.provenance.get("kind", "unknown"),
                  "base": cov.provenance, "level": float(level),
                  "seed": int(seed)}
    return CovarianceModel(cov.patch_h, cov.patch_w, mat, provenance,
                           cov.normalization_scale * scale)


# ---------------------------------------------------------------------------
# Covariance file format: raw tensor [d, d] plus a JSON sidecar manifest.
# ---------------------------------------------------------------------------


def sidecar_path(path):
    return str(path) + ".json"


def save_covariance(cov, path):
    tensorio.write_raw_tensor(cov.matrix, [cov.d, cov.d], path)
    manifest = {
        "patch_h": cov.patch_h,
        "patch_w": cov.patch_w,
        "provenance": cov.provenance,
        "normalization_scale": cov.normalization_scale,
    }
    with open(sidecar_path(path), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_covariance(path):
    data, dims = tensorio.read_raw_tensor(path)
    if len(dims) != 2 or dims[0] != dims[1]:
        raise CovarianceError(f"covariance tensor must be square, got dims {dims}")
    with open(sidecar_path(path)) as fh:
        manifest = json.load(fh)
    patch_h = int(manifest["patch_h"])
    patch_w = int(manifest["patch_w"])
    if patch_h * patch_w != dims[0]:
        raise CovarianceError(
            f"sidecar patch {patch_h}x{patch_w} does not match tensor dim {dims[0]}"
        )
    mat = _symmetrize(data)
    _check_spd(mat, "load_covariance")
    return CovarianceModel(patch_h, patch_w, mat, manifest["provenance"],
                           float(manifest["normalization_scale"]))
