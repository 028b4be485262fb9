"""Linear degradation operators through their singular systems.

Every operator exposes square orthonormal basis actions (U on the
measurement side, V on the image side) together with a full-length vector
of singular values sorted non-increasing (zeros fill the null space), so
that per-coordinate spectral conditioning decouples. Three backends:

* structured-separable: identity, separable blurs, block averaging; the
  2-d singular system is the Kronecker product of 1-d factor SVDs.
* structured-block-diagonal: patchwise whitener composed with identity.
* dense: explicitly assembled matrices (whitened blur/SR), desk scale only.

Operators act per channel; array arguments carry the flat per-channel
vector in the last axis and broadcast over leading axes.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels

DEFAULT_SV_THRESHOLD = 0.03
DENSE_DIM_CAP = 4096

TASK_NAMES = ("denoise", "deblur-uniform", "deblur-gauss", "deblur-aniso",
              "sr2", "sr4")


class CapacityError(Exception):
    """Dense whitened-operator path requested above the desk-scale cap."""


@dataclass
class DegradationSpec:
    kind: str               # identity | blur | block_average
    variant: str = ""       # uniform9 | gaussian5 | anisotropic9 for blur
    scale: int = 1          # block_average downsampling factor
    sv_threshold: float = DEFAULT_SV_THRESHOLD

    @property
    def task_name(self):
        if self.kind == "identity":
            return "denoise"
        if self.kind == "blur":
            return {"uniform9": "deblur-uniform", "gaussian5": "deblur-gauss",
                    "anisotropic9": "deblur-aniso"}[self.variant]
        return f"sr{self.scale}"


def parse_task(name, sv_threshold=DEFAULT_SV_THRESHOLD):
    table = {
        "denoise": DegradationSpec("identity", sv_threshold=sv_threshold),
        "deblur-uniform": DegradationSpec("blur", "uniform9",
                                          sv_threshold=sv_threshold),
        "deblur-gauss": DegradationSpec("blur", "gaussian5",
                                        sv_threshold=sv_threshold),
        "deblur-aniso": DegradationSpec("blur", "anisotropic9",
                                        sv_threshold=sv_threshold),
        "sr2": DegradationSpec("block_average", scale=2,
                               sv_threshold=sv_threshold),
        "sr4": DegradationSpec("block_average", scale=4,
                               sv_threshold=sv_threshold),
    }
    if name not in table:
        raise ValueError(f"unknown task {name!r}; expected one of {TASK_NAMES}")
    return table[name]


@dataclass
class SpectralMeasurement:
    """Pseudo-inverted measurement in spectral order; values are zero (and
    meaningless) on unobserved coordinates."""

    values: np.ndarray
    observed: np.ndarray


# ---------------------------------------------------------------------------
# Blur kernels and 1-d convolution matrices
# ---------------------------------------------------------------------------


def gaussian_taps(radius, sigma):
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (offsets / sigma) ** 2)
    return taps / taps.sum()


def blur_taps(variant):
    """Per-axis normalized 1-d kernels (horizontal, vertical)."""
    if variant == "uniform9":
        box = np.full(9, 1.0 / 9.0)
        return box, box
    if variant == "gaussian5":
        g = gaussian_taps(2, 10.0)
        return g, g
    if variant == "anisotropic9":
        return gaussian_taps(4, 20.0), gaussian_taps(4, 1.0)
    raise ValueError(f"unknown blur variant {variant!r}")


def conv_matrix(n, taps):
    """Same-size 1-d convolution matrix with reflective boundary."""
    radius = (len(taps) - 1) // 2
    if n <= radius:
        raise ValueError(f"axis length {n} too small for kernel radius {radius}")
    mat = np.zeros((n, n))
    for i in range(n):
        for k, tap in enumerate(taps):
            j = i + k - radius
            if j < 0:
                j = -j
            elif j >= n:
                j = 2 * n - 2 - j
            mat[i, j] += tap
    return mat


def averaging_matrix(n, scale):
    if n % scale:
        raise ValueError(f"axis length {n} not divisible by scale {scale}")
    mat = np.zeros((n // scale, n))
    for i in range(n // scale):
        mat[i, i * scale:(i + 1) * scale] = 1.0 / scale
    return mat


# ---------------------------------------------------------------------------
# Operator backends
# ---------------------------------------------------------------------------


class SvdOperator:
    """Common spectral logic on top of square orthonormal basis actions."""

    backend = ""

    def __init__(self, in_shape, out_shape, kind, channels=1):
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)
        self.kind = kind
        self.channels = channels
        self.d = in_shape[0] * in_shape[1]
        self.m = out_shape[0] * out_shape[1]
        # subclasses fill these in:
        self.spectral_s = None        # (d,) non-increasing
        self.meas_of_spectral = None  # (d,) measurement slot per coord, -1 none

    @property
    def singular_values(self):
        return self.spectral_s[: min(self.m, self.d)]

    # subclasses: to_spectral / from_spectral / apply_Ut / apply_U

    def apply(self, x):
        xi = self.to_spectral(np.asarray(x, dtype=np.float64))
        vals = self.spectral_s * xi
        meas = np.zeros(xi.shape[:-1] + (self.m,))
        pos = self.spectral_s > 0
        meas[..., self.meas_of_spectral[pos]] = vals[..., pos]
        return self.apply_U(meas)

    def apply_pinv(self, y):
        meas = self.apply_Ut(np.asarray(y, dtype=np.float64))
        xi = np.zeros(meas.shape[:-1] + (self.d,))
        pos = self.spectral_s > 0
        xi[..., pos] = meas[..., self.meas_of_spectral[pos]] / self.spectral_s[pos]
        return self.from_spectral(xi)

    def measurement_to_spectral(self, y):
        meas = self.apply_Ut(np.asarray(y, dtype=np.float64))
        observed = self.spectral_s > 0
        values = np.zeros(meas.shape[:-1] + (self.d,))
        values[..., observed] = (meas[..., self.meas_of_spectral[observed]]
                                 / self.spectral_s[observed])
        return SpectralMeasurement(values, observed)


class SeparableSvdOperator(SvdOperator):
    """Kronecker product of two 1-d factor SVDs (vertical x horizontal)."""

    backend = "structured-separable"

    def __init__(self, v_factors, h_factors, in_shape, out_shape, kind,
                 sv_threshold, channels=1):
        super().__init__(in_shape, out_shape, kind, channels)
        self.U_v, s_v, self.Vt_v = v_factors
        self.U_h, s_h, self.Vt_h = h_factors
        nv, nh = in_shape
        mv, mh = out_shape
        sv = np.zeros(nv)
        sv[: s_v.size] = s_v
        sh = np.zeros(nh)
        sh[: s_h.size] = s_h
        pairs = np.outer(sv, sh).reshape(-1)
        # stable sort: ties broken by original (row-major) pair index
        self.perm = np.argsort(-pairs, kind="stable")
        s_sorted = pairs[self.perm]
        s_sorted[s_sorted < sv_threshold] = 0.0
        self.spectral_s = s_sorted
        ii, jj = np.divmod(self.perm, nh)
        self.meas_of_spectral = np.where((ii < mv) & (jj < mh), ii * mh + jj, -1)

    def to_spectral(self, x):
        x = np.asarray(x, dtype=np.float64)
        planes = x.reshape(x.shape[:-1] + self.in_shape)
        t = self.Vt_v @ planes @ self.Vt_h.T
        return t.reshape(x.shape[:-1] + (self.d,))[..., self.perm]

    def from_spectral(self, xi):
        xi = np.asarray(xi, dtype=np.float64)
        nat = np.empty_like(xi)
        nat[..., self.perm] = xi
        planes = nat.reshape(xi.shape[:-1] + self.in_shape)
        out = self.Vt_v.T @ planes @ self.Vt_h
        return out.reshape(xi.shape[:-1] + (self.d,))

    def apply_Ut(self, y):
        y = np.asarray(y, dtype=np.float64)
        planes = y.reshape(y.shape[:-1] + self.out_shape)
        t = self.U_v.T @ planes @ self.U_h
        return t.reshape(y.shape[:-1] + (self.m,))

    def apply_U(self, meas):
        meas = np.asarray(meas, dtype=np.float64)
        planes = meas.reshape(meas.shape[:-1] + self.out_shape)
        t = self.U_v @ planes @ self.U_h.T
        return t.reshape(meas.shape[:-1] + (self.m,))


class BlockDiagSvdOperator(SvdOperator):
    """Shared per-tile SVD applied on every covered tile, identity on the
    margin; used for the patchwise-whitened identity operator."""

    backend = "structured-block-diagonal"

    def __init__(self, tile_matrix, grid, kind, channels=1):
        shape = (grid.height, grid.width)
        super().__init__(shape, shape, kind, channels)
        self.grid = grid
        self.Uw, sw, self.Vtw = np.linalg.svd(tile_matrix)
        s_nat = np.ones(self.d)
        if grid.n_tiles:
            s_nat[grid.tile_indices] = sw
        self.perm = np.argsort(-s_nat, kind="stable")
        self.spectral_s = s_nat[self.perm]
        self.meas_of_spectral = self.perm.copy()

    def _tilewise(self, mat, x):
        x = np.asarray(x, dtype=np.float64)
        flat = np.ascontiguousarray(x.reshape(-1, self.d))
        out = flat.copy()  # margin coordinates pass through
        if self.grid.n_tiles:
            _kernels.tilewise_matmul(np.ascontiguousarray(mat), flat,
                                     self.grid.tile_indices, out)
        return out.reshape(x.shape)

    def to_spectral(self, x):
        return self._tilewise(self.Vtw, x)[..., self.perm]

    def from_spectral(self, xi):
        xi = np.asarray(xi, dtype=np.float64)
        nat = np.empty_like(xi)
        nat[..., self.perm] = xi
        return self._tilewise(self.Vtw.T, nat)

    def apply_Ut(self, y):
        return self._tilewise(self.Uw.T, y)

    def apply_U(self, meas):
        return self._tilewise(self.Uw, meas)


class DenseSvdOperator(SvdOperator):
    """Explicit U, S, Vt storage for assembled (whitened) matrices."""

    backend = "dense"

    def __init__(self, U, s, Vt, in_shape, out_shape, kind, channels=1):
        super().__init__(in_shape, out_shape, kind, channels)
        self.U = U
        self.Vt = Vt
        padded = np.zeros(self.d)
        padded[: s.size] = s
        self.spectral_s = padded
        k = min(self.m, self.d)
        self.meas_of_spectral = np.where(np.arange(self.d) < k,
                                         np.arange(self.d), -1)

    def to_spectral(self, x):
        return np.asarray(x, dtype=np.float64) @ self.Vt.T

    def from_spectral(self, xi):
        return np.asarray(xi, dtype=np.float64) @ self.Vt

    def apply_Ut(self, y):
        return np.asarray(y, dtype=np.float64) @ self.U

    def apply_U(self, meas):
        return np.asarray(meas, dtype=np.float64) @ self.U.T


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def _identity_factors(n):
    eye = np.eye(n)
    return eye, np.ones(n), eye


def build_operator(spec, height, width, channels=1):
    """Build the singular system of a degradation at the given image size."""
    if spec.kind == "identity":
        op = SeparableSvdOperator(
            _identity_factors(height), _identity_factors(width),
            (height, width), (height, width), "identity",
            spec.sv_threshold, channels)
    elif spec.kind == "blur":
        taps_x, taps_y = blur_taps(spec.variant)
        cv = conv_matrix(height, taps_y)
        ch = conv_matrix(width, taps_x)
        op = SeparableSvdOperator(
            np.linalg.svd(cv), np.linalg.svd(ch),
            (height, width), (height, width), "blur",
            spec.sv_threshold, channels)
    elif spec.kind == "block_average":
        if height % spec.scale or width % spec.scale:
            raise ValueError(
                f"image {height}x{width} not divisible by scale {spec.scale}")
        av = averaging_matrix(height, spec.scale)
        ah = averaging_matrix(width, spec.scale)
        op = SeparableSvdOperator(
            np.linalg.svd(av, full_matrices=True),
            np.linalg.svd(ah, full_matrices=True),
            (height, width), (height // spec.scale, width // spec.scale),
            "block_average", spec.sv_threshold, channels)
    else:
        raise ValueError(f"unknown degradation kind {spec.kind!r}")
    op.spec = spec
    return op


class PatchWhitener:
    """Block-diagonal tile whitener: W on covered tiles, identity on margin."""

    def __init__(self, wt, grid):
        if (grid.patch_h * grid.patch_w) != wt.d:
            raise ValueError(
                f"whitener dimension {wt.d} does not match grid patch "
                f"{grid.patch_h}x{grid.patch_w}")
        self.wt = wt
        self.grid = grid
        self.n = grid.height * grid.width

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        flat = np.ascontiguousarray(x.reshape(-1, self.n))
        out = flat.copy()
        if self.grid.n_tiles:
            _kernels.tilewise_matmul(np.ascontiguousarray(self.wt.W), flat,
                                     self.grid.tile_indices, out)
        return out.reshape(x.shape)

    def as_matrix(self):
        mat = np.eye(self.n)
        for t in range(self.grid.n_tiles):
            ix = self.grid.tile_indices[t]
            mat[np.ix_(ix, ix)] = self.wt.W
        return mat


def whiten_operator(op, wt, grid):
    """Singular system of the patchwise-whitened operator W_full . H."""
    if op.m != grid.height * grid.width:
        raise ValueError(
            f"operator output dimension {op.m} does not match grid "
            f"{grid.height}x{grid.width}")
    whitener = PatchWhitener(wt, grid)
    if op.kind == "identity":
        return BlockDiagSvdOperator(wt.W, grid, "whitened-identity",
                                    op.channels)
    if op.d > DENSE_DIM_CAP:
        raise CapacityError(
            f"dense whitened-operator path supports per-channel dimension up "
            f"to {DENSE_DIM_CAP}; got {op.d}. Reduce the image size.")
    h_matrix = op.apply(np.eye(op.d)).T          # (m, d)
    wh = whitener.as_matrix() @ h_matrix
    u, s, vt = np.linalg.svd(wh, full_matrices=True)
    if s.size and s[0] > 0:
        s[s < 1e-10 * s[0]] = 0.0  # snap fp noise in the truncated null space
    out = DenseSvdOperator(u, s, vt, op.in_shape, op.out_shape,
                           f"whitened-{op.kind}", op.channels)
    out.spec = getattr(op, "spec", None)
    return out


# ---------------------------------------------------------------------------
# Module-level operation aliases
# ---------------------------------------------------------------------------


def to_spectral(op, x):
    return op.to_spectral(x)


def from_spectral(op, xi):
    return op.from_spectral(xi)


def measurement_to_spectral(op, y):
    return op.measurement_to_spectral(y)


def apply(op, x):
    return op.apply(x)


def apply_pinv(op, y):
    return op.apply_pinv(y)
