"""Diffusion schedule, denoiser interface, and the spectral posterior sampler.

The sampler runs per-coordinate Gaussian updates in the singular basis of
the (optionally whitened) degradation operator. Three transition regimes
apply, keyed by the effective per-coordinate measurement noise
delta_i = sigma_y / s_i: unobserved coordinates follow the unconditional
chain, diffusion-dominated coordinates (sigma_t < delta_i) pull toward the
measurement with gain alpha_t / delta_i, and measurement-dominated
coordinates (sigma_t >= delta_i) blend with weight eta_b.

Whitened mode and plain mode share this code; plain mode simply skips the
tile whitener (the i.i.d.-noise baseline).
"""

import io
import json
import math
import os
import select
import shlex
import subprocess
import time
from dataclasses import dataclass

import numpy as np

from . import _kernels, tensorio
from .tensorio import PlanarImage


class DenoiserProtocolError(Exception):
    """External denoiser peer violated the exchange protocol."""


@dataclass
class DiffusionSchedule:
    """Noise ladder 0 = sigma_0 < ... < sigma_T plus retained step indices."""

    sigmas: np.ndarray
    selected: np.ndarray

    def __post_init__(self):
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        self.selected = np.asarray(self.selected, dtype=np.int64)
        if self.sigmas[0] != 0.0:
            raise ValueError("schedule must start at sigma_0 = 0")
        if np.any(np.diff(self.sigmas) <= 0):
            raise ValueError("sigmas must be strictly increasing")
        t_max = len(self.sigmas) - 1
        if (np.any(np.diff(self.selected) <= 0)
                or self.selected[0] < 1
                or self.selected[-1] != t_max):
            raise ValueError("selected indices must be strictly increasing, "
                             "within [1..T], and end at T")

    @property
    def T(self):
        return len(self.sigmas) - 1

    @property
    def K(self):
        return len(self.selected)


def make_schedule(T, sigma_max, profile="linear-sigma"):
    """Linear-in-sigma ladder sigma_t = sigma_max * t / T."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if sigma_max <= 0:
        raise ValueError("sigma_max must be positive")
    if profile != "linear-sigma":
        raise ValueError(f"unknown schedule profile {profile!r}")
    sigmas = sigma_max * np.arange(T + 1, dtype=np.float64) / T
    return DiffusionSchedule(sigmas, np.arange(1, T + 1))


def subsample_schedule(sched, K):
    """Keep K uniformly spaced indices: round(T*(j+1)/K), deduped upward."""
    T = sched.T
    if not 1 <= K <= T:
        raise ValueError(f"K must be in [1, {T}], got {K}")
    sel = [int(math.floor(T * (j + 1) / K + 0.5)) for j in range(K)]
    for j in range(1, K):
        if sel[j] <= sel[j - 1]:
            sel[j] = sel[j - 1] + 1
    return DiffusionSchedule(sched.sigmas, np.array(sel))


def default_schedule(nfe, T=1000, sigma_max=1.0):
    return subsample_schedule(make_schedule(T, sigma_max), nfe)


@dataclass
class SamplerConfig:
    sigma_y: float
    eta: float = 0.80
    eta_b: float = 1.0
    nfe: int = 20
    seed: int = 0
    mode: str = "whitened"

    def __post_init__(self):
        if not 0 < self.eta <= 1:
            raise ValueError("eta must be in (0, 1]")
        if not 0 <= self.eta_b <= 1:
            raise ValueError("eta_b must be in [0, 1]")
        if self.sigma_y < 0:
            raise ValueError("sigma_y must be non-negative")
        if self.mode not in ("whitened", "plain"):
            raise ValueError(f"unknown mode {self.mode!r}")


# ---------------------------------------------------------------------------
# Denoisers
# ---------------------------------------------------------------------------


class DenoiserInterface:
    """predict(x_t, sigma_t) -> estimate of the clean image, same shape."""

    def predict(self, x, sigma_t):
        raise NotImplementedError


@dataclass
class GaussianPriorDenoiser(DenoiserInterface):
    """Exact MMSE denoiser under x0 ~ N(mean, std^2 I)."""

    prior_mean: float = 0.5
    prior_std: float = 0.3

    def __post_init__(self):
        if self.prior_std <= 0:
            raise ValueError("prior_std must be positive")

    def predict(self, x, sigma_t):
        t2 = self.prior_std**2
        s2 = float(sigma_t) ** 2
        return (t2 * np.asarray(x, dtype=np.float64) + s2 * self.prior_mean) / (t2 + s2)


class ExternalDenoiser(DenoiserInterface):
    """Out-of-process denoiser speaking newline-JSON headers plus raw
    tensors over the child's stdin/stdout."""

    def __init__(self, command, timeout=60.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self._proc = None

    def _ensure_started(self):
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE)

    def _read_exactly(self, n, deadline):
        fd = self._proc.stdout.fileno()
        buf = bytearray()
        while len(buf) < n:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise DenoiserProtocolError(
                    f"external denoiser timed out after {self.timeout}s")
            ready, _, _ = select.select([fd], [], [], remaining)
            if not ready:
                continue
            chunk = os.read(fd, n - len(buf))
            if not chunk:
                raise DenoiserProtocolError(
                    "external denoiser closed its output stream")
            buf.extend(chunk)
        return bytes(buf)

    def predict(self, x, sigma_t):
        x = np.asarray(x, dtype=np.float64)
        dims = list(x.shape)
        self._ensure_started()
        header = json.dumps({"sigma_t": float(sigma_t), "dims": dims}) + "\n"
        try:
            self._proc.stdin.write(header.encode())
            self._proc.stdin.write(tensorio.raw_tensor_bytes(x, dims))
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise DenoiserProtocolError(
                f"external denoiser pipe failed: {exc}") from exc

        deadline = time.monotonic() + self.timeout
        head = self._read_exactly(17, deadline)
        if head[:8] != tensorio.RAW_TENSOR_MAGIC:
            raise DenoiserProtocolError(
                f"external denoiser sent malformed response (magic {head[:8]!r})")
        ndim = int.from_bytes(head[13:17], "little")
        dim_bytes = self._read_exactly(4 * ndim, deadline)
        resp_dims = np.frombuffer(dim_bytes, dtype="<u4")
        payload = self._read_exactly(4 * int(np.prod(resp_dims)), deadline)
        try:
            data, got = tensorio.read_raw_tensor_stream(
                io.BytesIO(head + dim_bytes + payload))
        except tensorio.RawTensorFormatError as exc:
            raise DenoiserProtocolError(
                f"external denoiser sent malformed response: {exc}") from exc
        if list(got) != dims:
            raise DenoiserProtocolError(
                f"external denoiser dims mismatch: sent {dims}, got {list(got)}")
        return data

    def close(self):
        if self._proc is not None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def parse_denoiser(text):
    """Parse CLI denoiser specs: gaussian:tau=0.3,mu=0.5 or external:<cmd>."""
    kind, _, rest = text.partition(":")
    if kind == "gaussian":
        params = {}
        if rest:
            for item in rest.split(","):
                key, _, val = item.partition("=")
                params[key.strip()] = float(val)
        return GaussianPriorDenoiser(prior_mean=params.get("mu", 0.5),
                                     prior_std=params.get("tau", 0.3))
    if kind == "external":
        if not rest:
            raise ValueError("external denoiser needs a command")
        return ExternalDenoiser(rest)
    raise ValueError(f"unknown denoiser spec {text!r}")


# ---------------------------------------------------------------------------
# Spectral state and transitions
# ---------------------------------------------------------------------------


def prepare_measurement(op, meas, sigma_y, sigma_T):
    """Per-coordinate measurement data with the demotion rule applied.

    Observed coordinates whose effective noise delta_i = sigma_y / s_i
    exceeds sigma_T are demoted to unobserved so the initial variance stays
    non-negative.
    """
    s = op.spectral_s
    observed = meas.observed.copy()
    delta = np.zeros(op.d)
    pos = s > 0
    delta[pos] = sigma_y / s[pos]
    observed &= ~(delta > sigma_T)
    delta = np.where(observed, delta, 0.0)
    ups = np.where(observed, meas.values, 0.0)
    return ups, observed, delta


def init_state(ups, observed, delta, sigma_T, rng):
    """Draw xi_T: N(ups, sigma_T^2 - delta^2) observed, N(0, sigma_T^2) not."""
    var = np.where(observed, sigma_T**2 - delta**2, sigma_T**2)
    std = np.sqrt(np.maximum(var, 0.0))
    return ups + std * rng.standard_normal(np.shape(ups))


def init_xT(op, meas, sigma_T, config, rng):
    """Initialize the spectral chain from a spectral measurement."""
    ups, observed, delta = prepare_measurement(op, meas, config.sigma_y, sigma_T)
    xi = init_state(ups, observed, delta, sigma_T, rng)
    return xi, ups, observed, delta


def transition_moments(xi_next, xi_hat, ups, observed, delta, sigma_t,
                       sigma_next, eta, eta_b):
    """Closed-form mean and variance of one spectral transition."""
    if not sigma_t < sigma_next:
        raise ValueError("transitions require sigma_t < sigma_next")
    xi_next, xi_hat, ups, observed, delta = np.broadcast_arrays(
        xi_next, xi_hat, ups, observed, delta)
    alpha = math.sqrt(1.0 - eta * eta) * sigma_t
    beta = alpha / sigma_next
    mean_a = xi_hat + beta * (xi_next - xi_hat)
    safe_delta = np.where(delta > 0.0, delta, 1.0)
    with np.errstate(over="ignore", invalid="ignore"):
        # evaluated on all coordinates, selected only where it applies
        mean_b = xi_hat + (alpha / safe_delta) * (ups - xi_hat)
    mean_c = (1.0 - eta_b) * xi_hat + eta_b * ups
    var_ab = (eta * sigma_t) ** 2
    var_c = np.maximum(sigma_t**2 - (eta_b * delta) ** 2, 0.0)
    meas_dom = observed & (sigma_t >= delta)
    diff_dom = observed & ~meas_dom
    mean = np.where(meas_dom, mean_c, np.where(diff_dom, mean_b, mean_a))
    var = np.where(meas_dom, var_c, var_ab)
    return mean, var


def _transition_draw(xi_next, xi_hat, ups, observed, delta, sigma_t,
                     sigma_next, eta, eta_b, rng):
    arrs = np.broadcast_arrays(np.asarray(xi_next, dtype=np.float64),
                               np.asarray(xi_hat, dtype=np.float64),
                               np.asarray(ups, dtype=np.float64),
                               np.asarray(observed, dtype=bool),
                               np.asarray(delta, dtype=np.float64))
    xi_next, xi_hat, ups, observed, delta = (np.ascontiguousarray(a) for a in arrs)
    noise = rng.standard_normal(xi_next.shape)
    out = np.empty_like(xi_next)
    _kernels.transition(xi_next.ravel(), xi_hat.ravel(), ups.ravel(),
                        observed.ravel(), delta.ravel(), sigma_t, sigma_next,
                        eta, eta_b, noise.ravel(), out.ravel())
    return out


def p_transition(xi_next, xi_hat, ups, observed, delta, sigma_t, sigma_next,
                 config, rng):
    """Sampling transition using the denoiser estimate xi_hat."""
    if not sigma_t < sigma_next:
        raise ValueError("transitions require sigma_t < sigma_next")
    return _transition_draw(xi_next, xi_hat, ups, observed, delta, sigma_t,
                            sigma_next, config.eta, config.eta_b, rng)


def q_transition(xi_next, xi_0, ups, observed, delta, sigma_t, sigma_next,
                 config, rng):
    """Reference transition with the true clean coordinates (testing only)."""
    return p_transition(xi_next, xi_0, ups, observed, delta, sigma_t,
                        sigma_next, config, rng)


# ---------------------------------------------------------------------------
# Full sampler
# ---------------------------------------------------------------------------


def trajectory_rng(seed, image_id=0):
    """One counter-based stream per (seed, image id) pair."""
    key = np.array([np.uint64(seed) & np.uint64(0xFFFFFFFFFFFFFFFF),
                    np.uint64(image_id)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def run_sampler(op, y, denoiser, config, schedule=None, whitener=None,
                image_id=0):
    """Restore an image from the measurement ``y``.

    ``op`` must already be the whitened operator in whitened mode; the
    measurement is whitened here via ``whitener``. Plain mode passes
    ``whitener=None`` and the plain operator. Deterministic given
    (config.seed, image_id).
    """
    if y.height * y.width != op.m:
        raise ValueError(
            f"measurement {y.height}x{y.width} does not match operator "
            f"output dimension {op.m}")
    schedule = schedule if schedule is not None else default_schedule(config.nfe)
    channels = y.channels
    yv = np.ascontiguousarray(y.data.reshape(channels, op.m))
    if whitener is not None:
        yv = whitener.apply(yv)
    meas = op.measurement_to_spectral(yv)

    sel = schedule.selected
    sigmas = schedule.sigmas
    sigma_T = float(sigmas[sel[-1]])
    rng = trajectory_rng(config.seed, image_id)

    ups, observed, delta = prepare_measurement(op, meas, config.sigma_y, sigma_T)
    obs_b = np.ascontiguousarray(np.broadcast_to(observed, (channels, op.d)))
    delta_b = np.ascontiguousarray(np.broadcast_to(delta, (channels, op.d)))
    xi = init_state(ups, observed, delta, sigma_T, rng)
    xi = np.ascontiguousarray(xi)

    height, width = op.in_shape
    out = np.empty_like(xi)

    def denoise_to_spectral(xi_cur, sigma):
        x = op.from_spectral(xi_cur).reshape(channels, height, width)
        x_hat = np.asarray(denoiser.predict(x, sigma), dtype=np.float64)
        if x_hat.shape != x.shape:
            raise DenoiserProtocolError(
                f"denoiser returned shape {x_hat.shape}, expected {x.shape}")
        return np.ascontiguousarray(op.to_spectral(x_hat.reshape(channels, op.d)))

    for j in range(len(sel) - 1, 0, -1):
        sigma_next = float(sigmas[sel[j]])
        sigma_t = float(sigmas[sel[j - 1]])
        xi_hat = denoise_to_spectral(xi, sigma_next)
        noise = rng.standard_normal(xi.shape)
        _kernels.transition(xi.ravel(), xi_hat.ravel(), ups.ravel(),
                            obs_b.ravel(), delta_b.ravel(), sigma_t,
                            sigma_next, config.eta, config.eta_b,
                            noise.ravel(), out.ravel())
        xi, out = out, xi

    # last retained sigma -> sigma_0 = 0: zero-variance step whose mean is
    # the final denoiser estimate (or the measurement where delta_i = 0)
    sigma_next = float(sigmas[sel[0]])
    xi_hat = denoise_to_spectral(xi, sigma_next)
    zeros = np.zeros_like(xi)
    _kernels.transition(xi.ravel(), xi_hat.ravel(), ups.ravel(), obs_b.ravel(),
                        delta_b.ravel(), 0.0, sigma_next, config.eta,
                        config.eta_b, zeros.ravel(), out.ravel())

    restored = np.clip(op.from_spectral(out), 0.0, 1.0)
    return PlanarImage(restored.reshape(channels, height, width))
