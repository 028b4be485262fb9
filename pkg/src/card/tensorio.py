"""Image and tensor representation plus bit-exact file I/O.

Images are carried as channel-major float64 planes in [0,1] (intermediate
diffusion states may leave that range). PNG is the only image container:
8- or 16-bit, grayscale or RGB, non-interlaced. The raw tensor format is a
little-endian float32 container used for covariance files and as the wire
format of the external-denoiser protocol.
"""

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import _kernels

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"

RAW_TENSOR_MAGIC = b"CARDTNSR"
RAW_TENSOR_VERSION = 1
RAW_TENSOR_DTYPE_F32 = 1


class ImageFormatError(Exception):
    """Raised for unreadable, unsupported, or corrupt image files."""


class RawTensorFormatError(Exception):
    """Raised for malformed raw tensor files or streams."""


@dataclass
class PlanarImage:
    """Multi-channel raster, data shaped (channels, height, width) float64."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"PlanarImage needs 3-d data, got {self.data.ndim}-d")
        if self.data.shape[0] not in (1, 3):
            raise ValueError(f"channel count must be 1 or 3, got {self.data.shape[0]}")

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    def copy(self):
        return PlanarImage(self.data.copy())

    @classmethod
    def zeros(cls, channels, height, width):
        return cls(np.zeros((channels, height, width)))


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------

_COLOR_TYPE_CHANNELS = {0: 1, 2: 3}


def _read_chunks(raw):
    if raw[:8] != PNG_SIGNATURE:
        raise ImageFormatError("not a PNG file (bad signature)")
    pos = 8
    while pos + 8 <= len(raw):
        (length,) = struct.unpack(">I", raw[pos:pos + 4])
        ctype = raw[pos + 4:pos + 8]
        data = raw[pos + 8:pos + 8 + length]
        if len(data) != length or pos + 12 + length > len(raw):
            raise ImageFormatError("truncated PNG chunk")
        (crc,) = struct.unpack(">I", raw[pos + 8 + length:pos + 12 + length])
        if crc != zlib.crc32(ctype + data):
            raise ImageFormatError(f"corrupt PNG: CRC mismatch in {ctype!r}")
        yield ctype, data
        pos += 12 + length
        if ctype == b"IEND":
            return
    raise ImageFormatError("truncated PNG: missing IEND")


def load_image(path, bit_depth_policy="auto"):
    """Load an 8- or 16-bit gray/RGB PNG, scaled to [0,1]."""
    if bit_depth_policy != "auto":
        raise ValueError(f"unknown bit_depth_policy {bit_depth_policy!r}")
    with open(path, "rb") as fh:
        raw = fh.read()

    header = None
    idat = []
    for ctype, data in _read_chunks(raw):
        if ctype == b"IHDR":
            header = struct.unpack(">IIBBBBB", data)
        elif ctype == b"IDAT":
            idat.append(data)
    if header is None:
        raise ImageFormatError("PNG missing IHDR")
    width, height, bit_depth, color_type, comp, filt, interlace = header
    if color_type == 3:
        raise ImageFormatError("palette PNG images are not supported")
    if color_type not in _COLOR_TYPE_CHANNELS:
        raise ImageFormatError(f"unsupported PNG color type {color_type}")
    if bit_depth not in (8, 16):
        raise ImageFormatError(f"unsupported PNG bit depth {bit_depth}")
    if comp != 0 or filt != 0:
        raise ImageFormatError("unsupported PNG compression/filter method")
    if interlace != 0:
        raise ImageFormatError("interlaced PNG is not supported")
    if not idat:
        raise ImageFormatError("PNG missing IDAT")

    channels = _COLOR_TYPE_CHANNELS[color_type]
    sample_bytes = bit_depth // 8
    stride = width * channels * sample_bytes
    try:
        decompressed = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise ImageFormatError(f"corrupt PNG stream: {exc}") from exc
    if len(decompressed) != height * (stride + 1):
        raise ImageFormatError("corrupt PNG: wrong scanline byte count")

    rows = np.frombuffer(decompressed, dtype=np.uint8).reshape(height, stride + 1)
    try:
        recon = _kernels.unfilter_scanlines(rows, channels * sample_bytes)
    except ValueError as exc:
        raise ImageFormatError(str(exc)) from exc

    if bit_depth == 8:
        samples = recon.reshape(height, width, channels).astype(np.float64)
        scale = 255.0
    else:
        samples = (
            recon.reshape(height, width * channels, 2)
            .view(">u2")
            .reshape(height, width, channels)
            .astype(np.float64)
        )
        scale = 65535.0
    return PlanarImage(np.ascontiguousarray(samples.transpose(2, 0, 1)) / scale)


def _chunk(ctype, data):
    return (
        struct.pack(">I", len(data))
        + ctype
        + data
        + struct.pack(">I", zlib.crc32(ctype + data))
    )


def save_image(img, path, bit_depth=8):
    """Write a PNG, clamping to [0,1] and rounding half away from zero."""
    if bit_depth not in (8, 16):
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    data = np.clip(img.data, 0.0, 1.0)
    max_val = (1 << bit_depth) - 1
    quant = np.floor(data * max_val + 0.5)
    hwc = quant.transpose(1, 2, 0)
    if bit_depth == 8:
        payload = hwc.astype(np.uint8)
    else:
        payload = hwc.astype(np.uint16).astype(">u2")
    rows = payload.reshape(img.height, -1).view(np.uint8)
    scanlines = np.zeros((img.height, rows.shape[1] + 1), dtype=np.uint8)
    scanlines[:, 1:] = rows

    color_type = 0 if img.channels == 1 else 2
    ihdr = struct.pack(">IIBBBBB", img.width, img.height, bit_depth, color_type, 0, 0, 0)
    blob = (
        PNG_SIGNATURE
        + _chunk(b"IHDR", ihdr)
        + _chunk(b"IDAT", zlib.compress(scanlines.tobytes(), 6))
        + _chunk(b"IEND", b"")
    )
    with open(path, "wb") as fh:
        fh.write(blob)


# ---------------------------------------------------------------------------
# Raw tensor format
# ---------------------------------------------------------------------------


def raw_tensor_bytes(data, dims):
    """Serialize row-major float data to the raw tensor wire format."""
    dims = [int(d) for d in dims]
    if not dims:
        raise ValueError("dims must be nonempty")
    flat = np.ascontiguousarray(data, dtype=np.float64).reshape(-1)
    if flat.size != int(np.prod(dims)):
        raise ValueError(
            f"data length {flat.size} does not match product of dims {dims}"
        )
    header = (
        RAW_TENSOR_MAGIC
        + struct.pack("<I", RAW_TENSOR_VERSION)
        + struct.pack("B", RAW_TENSOR_DTYPE_F32)
        + struct.pack("<I", len(dims))
        + struct.pack(f"<{len(dims)}I", *dims)
    )
    return header + flat.astype("<f4").tobytes()


def write_raw_tensor(data, dims, path):
    with open(path, "wb") as fh:
        fh.write(raw_tensor_bytes(data, dims))


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if buf is None or len(buf) != n:
        raise RawTensorFormatError(f"truncated raw tensor: short read in {what}")
    return buf


def read_raw_tensor_stream(fh):
    """Parse one raw tensor from a binary stream; returns (array, dims)."""
    magic = _read_exact(fh, 8, "magic")
    if magic != RAW_TENSOR_MAGIC:
        raise RawTensorFormatError(f"magic mismatch: got {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
    if version != RAW_TENSOR_VERSION:
        raise RawTensorFormatError(f"unsupported raw tensor version {version}")
    (dtype_code,) = struct.unpack("B", _read_exact(fh, 1, "dtype"))
    if dtype_code != RAW_TENSOR_DTYPE_F32:
        raise RawTensorFormatError(f"unsupported dtype code {dtype_code}")
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "ndim"))
    if ndim == 0:
        raise RawTensorFormatError("raw tensor with zero dimensions")
    dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "dims"))
    count = int(np.prod(dims))
    payload = _read_exact(fh, 4 * count, "payload")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)
    return data, tuple(int(d) for d in dims)


def read_raw_tensor(path):
    with open(path, "rb") as fh:
        data, dims = read_raw_tensor_stream(fh)
        if fh.read(1):
            raise RawTensorFormatError("trailing bytes after raw tensor payload")
    return data, dims
