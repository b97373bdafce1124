"""File formats: stimulus CSV, percept images/raw floats, the tensor
container used for network weights, loss-log CSV, and IDX digit files.

Tensor container layout (little-endian):
    magic "TENS" | uint32 version | uint32 meta_len | meta JSON (utf-8)
    | uint32 n_entries | per entry: uint16 name_len, name (utf-8),
      uint16 dtype code (0=f32, 1=f64, 2=i64, 3=u8), uint16 ndim,
      uint32 dims... | payloads in entry order.

Raw percept container layout (little-endian):
    magic "PCPT" | uint32 version | uint32 H | uint32 W
    | H*W float32 row-major payload.
"""

import csv
import json
import struct

import numpy as np
from PIL import Image

from .errors import DataFormatError

_TENS_MAGIC = b"TENS"
_TENS_VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "|u1"}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1,
                np.dtype(np.int64): 2, np.dtype(np.uint8): 3}

_PCPT_MAGIC = b"PCPT"
_PCPT_VERSION = 1

STIMULUS_HEADER = ["electrode", "freq_hz", "amp_xth", "pdur_ms"]
LOSS_HEADER = ["epoch", "split", "mae", "smooth", "feature", "joint"]
GAP_HEADER = ["target_id", "gap_mae", "joint_true", "joint_surrogate"]


def save_tensors(path, arrays, meta=None):
    """Write named arrays (dict name -> ndarray) plus JSON metadata."""
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_TENS_MAGIC)
        fh.write(struct.pack("<II", _TENS_VERSION, len(meta_raw)))
        fh.write(meta_raw)
        fh.write(struct.pack("<I", len(arrays)))
        payloads = []
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if arr.dtype not in _DTYPE_CODES:
                arr = arr.astype(np.float32)
            code = _DTYPE_CODES[arr.dtype]
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<HH", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            payloads.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
        for blob in payloads:
            fh.write(blob)


def load_tensors(path):
    """Read a tensor container; returns (dict name -> ndarray, meta dict)."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DataFormatError(f"cannot read tensor container {path}: {exc}") from exc
    if data[:4] != _TENS_MAGIC:
        raise DataFormatError(f"{path}: bad tensor-container magic {data[:4]!r}")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != _TENS_VERSION:
        raise DataFormatError(f"{path}: unsupported container version {version}")
    off = 12
    try:
        meta = json.loads(data[off : off + meta_len].decode("utf-8"))
        off += meta_len
        (n_entries,) = struct.unpack_from("<I", data, off)
        off += 4
        table = []
        for _ in range(n_entries):
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + name_len].decode("utf-8")
            off += name_len
            code, ndim = struct.unpack_from("<HH", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            table.append((name, code, shape))
        arrays = {}
        for name, code, shape in table:
            dt = np.dtype(_DTYPES[code])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            arr = np.frombuffer(data, dtype=dt, count=count, offset=off)
            off += count * dt.itemsize
            arrays[name] = arr.reshape(shape).copy()
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        raise DataFormatError(f"{path}: corrupt tensor container: {exc}") from exc
    return arrays, meta


def write_stimulus_csv(path, stimulus):
    """Stimulus CSV: header electrode,freq_hz,amp_xth,pdur_ms, one row per
    electrode in row-major electrode order."""
    stimulus = np.asarray(stimulus, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(STIMULUS_HEADER)
        for e, (freq, amp, pdur) in enumerate(stimulus):
            writer.writerow([e, f"{freq:.10g}", f"{amp:.10g}", f"{pdur:.10g}"])


def read_stimulus_csv(path, n_electrodes=None):
    try:
        with open(path, "r", newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataFormatError(f"cannot read stimulus CSV {path}: {exc}") from exc
    if not rows or rows[0] != STIMULUS_HEADER:
        raise DataFormatError(f"{path}: line 1: expected header {','.join(STIMULUS_HEADER)}")
    values = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise DataFormatError(f"{path}: line {lineno}: expected 4 columns, got {len(row)}")
        try:
            idx = int(row[0])
            triple = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise DataFormatError(f"{path}: line {lineno}: {exc}") from exc
        if idx != len(values):
            raise DataFormatError(f"{path}: line {lineno}: electrode index {idx} out of order")
        values.append(triple)
    arr = np.asarray(values, dtype=np.float64).reshape(-1, 3)
    if n_electrodes is not None and arr.shape[0] != n_electrodes:
        raise DataFormatError(
            f"{path}: has {arr.shape[0]} electrode rows, expected {n_electrodes}"
        )
    return arr


def write_percept_raw(path, percept):
    percept = np.asarray(percept, dtype=np.float64)
    h, w = percept.shape
    with open(path, "wb") as fh:
        fh.write(_PCPT_MAGIC)
        fh.write(struct.pack("<III", _PCPT_VERSION, h, w))
        fh.write(np.ascontiguousarray(percept, dtype="<f4").tobytes())


def read_percept_raw(path):
    with open(path, "rb") as fh:
        head = fh.read(16)
        if head[:4] != _PCPT_MAGIC:
            raise DataFormatError(f"{path}: bad percept magic {head[:4]!r}")
        version, h, w = struct.unpack("<III", head[4:])
        if version != _PCPT_VERSION:
            raise DataFormatError(f"{path}: unsupported percept version {version}")
        raw = fh.read(h * w * 4)
    if len(raw) != h * w * 4:
        raise DataFormatError(f"{path}: truncated percept payload")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(h, w)


def write_percept_png(path, percept, clip_ceiling=2.0):
    """8-bit grayscale export: clip to [0, ceiling], map linearly to 0..255."""
    percept = np.asarray(percept, dtype=np.float64)
    scaled = np.clip(percept, 0.0, clip_ceiling) / clip_ceiling * 255.0
    Image.fromarray(np.round(scaled).astype(np.uint8), mode="L").save(path)


def read_image(path):
    """Load an image file as float64 grayscale in [0, 1] (luma for RGB)."""
    try:
        img = Image.open(path)
        img.load()
    except OSError as exc:
        raise DataFormatError(f"cannot read image {path}: {exc}") from exc
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., 0] * 0.299 + arr[..., 1] * 0.587 + arr[..., 2] * 0.114
    return arr / 255.0


def write_loss_csv(path, rows):
    """Loss log: epoch,split,mae,smooth,feature,joint."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_HEADER)
        for row in rows:
            writer.writerow(row)


def format_loss_row(epoch, split, mae, smooth, feature, joint):
    return [epoch, split, f"{mae:.9g}", f"{smooth:.9g}", f"{feature:.9g}", f"{joint:.9g}"]


def loss_rows_text(rows):
    return "\n".join(",".join(str(v) for v in row) for row in rows)


def write_idx_images(path, images):
    """MNIST-style idx3-ubyte: magic 0x00000803, dims big-endian, uint8."""
    images = np.asarray(images)
    n, h, w = images.shape
    data = np.clip(np.round(images * 255.0), 0, 255).astype(">u1")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, h, w))
        fh.write(data.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=">u1")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, labels.shape[0]))
        fh.write(labels.tobytes())


def read_idx_images(path):
    """Read idx3-ubyte images; returns float64 array in [0, 1]."""
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16:
            raise DataFormatError(f"{path}: truncated idx header")
        magic, n, h, w = struct.unpack(">IIII", head)
        if magic != 0x00000803:
            raise DataFormatError(f"{path}: bad idx image magic {magic:#x}")
        raw = fh.read(n * h * w)
    if len(raw) != n * h * w:
        raise DataFormatError(f"{path}: truncated idx payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w).astype(np.float64) / 255.0


def read_idx_labels(path):
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise DataFormatError(f"{path}: truncated idx header")
        magic, n = struct.unpack(">II", head)
        if magic != 0x00000801:
            raise DataFormatError(f"{path}: bad idx label magic {magic:#x}")
        raw = fh.read(n)
    if len(raw) != n:
        raise DataFormatError(f"{path}: truncated idx payload")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
