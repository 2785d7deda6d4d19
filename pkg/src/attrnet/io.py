"""Binary model/tensor formats, text threshold/config files and PGM/PPM images.

All binary formats are little-endian.  Layouts::

    LTEN  magic "LTEN", u8 version (1), u8 rank, rank x u32 dims, f32 payload
    LNET  magic "LNET", u8 version (1), u16 layer count, u8 input rank,
          rank x u32 input dims, u16 feature layer, u16 response layer
          (0xFFFF = none), then per layer a u8 tag and its record (below)
    LSVM  magic "LSVM", u32 dim, u32 attribute count,
          f32 weights (attribute-major), f32 biases

LNET layer records (u32 fields, then f32 blobs in C order)::

    1 conv        k, stride, in, out; weight (out, in, k, k); bias (out)
    2 local conv  k, stride, in, out, cells, span; per bank: weight, bias
    3 relu        (empty)
    4 max pool    window, stride
    5 fc          in, out; weight (out, in); bias (out)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .layers import FullyConnected, GlobalConv, LocalConv, MaxPool, Network, ReLU
from .predict import SvmModel
from .tensor import DTYPE

TENSOR_MAGIC = b"LTEN"
NET_MAGIC = b"LNET"
SVM_MAGIC = b"LSVM"
FORMAT_VERSION = 1
NO_LAYER = 0xFFFF

TAG_CONV, TAG_LOCAL, TAG_RELU, TAG_POOL, TAG_FC = 1, 2, 3, 4, 5


class FormatError(ValueError):
    """A file that does not parse; ``offset`` is the byte where parsing stopped."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MagicError(FormatError):
    pass


class TruncationError(FormatError):
    pass


class VersionError(FormatError):
    pass


class UnsupportedFormatError(FormatError):
    pass


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncationError(f"file ends inside {what}: need {n} bytes, have {len(self.data) - self.pos}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))

    def u8(self, what):
        return self.unpack("B", what)[0]

    def u16(self, what):
        return self.unpack("H", what)[0]

    def u32s(self, n, what):
        return self.unpack(f"{n}I", what)

    def floats(self, shape, what) -> np.ndarray:
        count = int(np.prod(shape))
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").astype(DTYPE).reshape(shape)

    def magic(self, expected: bytes):
        got = self.data[:len(expected)]
        if len(got) < len(expected) and expected.startswith(got):
            raise TruncationError("file ends inside magic", len(got))
        if got != expected:
            raise MagicError(f"expected magic {expected!r}, found {got!r}", 0)
        self.pos = len(expected)

    def version(self):
        at = self.pos
        v = self.u8("version byte")
        if v != FORMAT_VERSION:
            raise VersionError(f"unsupported version {v} (this build reads {FORMAT_VERSION})", at)

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes", self.pos)


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


# -- LTEN --------------------------------------------------------------------------


def tensor_to_bytes(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    if not 1 <= t.ndim <= 255:
        raise ValueError(f"cannot store rank {t.ndim}")
    return TENSOR_MAGIC + struct.pack("<BB", FORMAT_VERSION, t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape) + _f32(t)


def tensor_from_bytes(data: bytes) -> np.ndarray:
    r = _Reader(data)
    r.magic(TENSOR_MAGIC)
    r.version()
    rank = r.u8("rank")
    if rank == 0:
        raise FormatError("rank 0 tensor", r.pos - 1)
    shape = r.u32s(rank, "dims")
    out = r.floats(shape, "payload")
    r.done()
    return out


def save_tensor(path, t: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


# -- LNET --------------------------------------------------------------------------


def network_to_bytes(net: Network) -> bytes:
    rank = len(net.input_shape)
    out = [
        NET_MAGIC,
        struct.pack("<BHB", FORMAT_VERSION, len(net.layers), rank),
        struct.pack(f"<{rank}I", *net.input_shape),
        struct.pack("<HH", net.feature_layer, NO_LAYER if net.response_layer is None else net.response_layer),
    ]
    for layer in net.layers:
        if isinstance(layer, GlobalConv):
            out += [struct.pack("<B4I", TAG_CONV, layer.k, layer.stride, layer.in_channels, layer.out_channels)]
            out += [_f32(layer.weight), _f32(layer.bias)]
        elif isinstance(layer, LocalConv):
            out += [
                struct.pack(
                    "<B6I", TAG_LOCAL, layer.k, layer.stride, layer.in_channels, layer.out_channels, layer.cells, layer.span
                )
            ]
            for b in range(layer.banks):
                out += [_f32(layer.weight[b]), _f32(layer.bias[b])]
        elif isinstance(layer, ReLU):
            out.append(struct.pack("<B", TAG_RELU))
        elif isinstance(layer, MaxPool):
            out.append(struct.pack("<B2I", TAG_POOL, layer.window, layer.stride))
        elif isinstance(layer, FullyConnected):
            out += [struct.pack("<B2I", TAG_FC, layer.in_features, layer.out_features)]
            out += [_f32(layer.weight), _f32(layer.bias)]
        else:
            raise TypeError(f"cannot serialise {type(layer).__name__}")
    return b"".join(out)


def network_from_bytes(data: bytes) -> Network:
    r = _Reader(data)
    r.magic(NET_MAGIC)
    r.version()
    count = r.u16("layer count")
    rank = r.u8("input rank")
    input_shape = r.u32s(rank, "input dims")
    feature_layer = r.u16("feature layer")
    response_layer = r.u16("response layer")
    layers = []
    for i in range(count):
        at = r.pos
        tag = r.u8(f"layer {i} tag")
        if tag == TAG_CONV:
            k, stride, c_in, c_out = r.u32s(4, f"layer {i} header")
            w = r.floats((c_out, c_in, k, k), f"layer {i} weights")
            b = r.floats((c_out,), f"layer {i} biases")
            layers.append(GlobalConv(w, b, stride))
        elif tag == TAG_LOCAL:
            k, stride, c_in, c_out, cells, span = r.u32s(6, f"layer {i} header")
            banks = max(cells - span + 1, 0) ** 2
            ws, bs = [], []
            for bank in range(banks):
                ws.append(r.floats((c_out, c_in, k, k), f"layer {i} bank {bank} weights"))
                bs.append(r.floats((c_out,), f"layer {i} bank {bank} biases"))
            shape_w = (banks, c_out, c_in, k, k)
            w = np.stack(ws) if ws else np.zeros(shape_w, DTYPE)
            b = np.stack(bs) if bs else np.zeros((banks, c_out), DTYPE)
            layers.append(LocalConv(w, b, cells, span, stride))
        elif tag == TAG_RELU:
            layers.append(ReLU())
        elif tag == TAG_POOL:
            window, stride = r.u32s(2, f"layer {i} header")
            layers.append(MaxPool(window, stride))
        elif tag == TAG_FC:
            n_in, n_out = r.u32s(2, f"layer {i} header")
            w = r.floats((n_out, n_in), f"layer {i} weights")
            b = r.floats((n_out,), f"layer {i} biases")
            layers.append(FullyConnected(w, b))
        else:
            raise FormatError(f"unknown layer tag {tag}", at)
    r.done()
    return Network(layers, input_shape, feature_layer, None if response_layer == NO_LAYER else response_layer)


def save_network(path, net: Network) -> None:
    Path(path).write_bytes(network_to_bytes(net))


def load_network(path) -> Network:
    return network_from_bytes(Path(path).read_bytes())


# -- LSVM --------------------------------------------------------------------------


def svm_to_bytes(model: SvmModel) -> bytes:
    return SVM_MAGIC + struct.pack("<2I", model.dim, model.attributes) + _f32(model.weights) + _f32(model.biases)


def svm_from_bytes(data: bytes) -> SvmModel:
    r = _Reader(data)
    r.magic(SVM_MAGIC)
    dim, attrs = r.u32s(2, "header")
    w = r.floats((attrs, dim), "weights")
    b = r.floats((attrs,), "biases")
    r.done()
    return SvmModel(w, b, None)


def save_svm(path, model: SvmModel) -> None:
    Path(path).write_bytes(svm_to_bytes(model))


def load_svm(path) -> SvmModel:
    return svm_from_bytes(Path(path).read_bytes())


# -- threshold and config text files -------------------------------------------------


def save_threshold(path, value: float) -> None:
    Path(path).write_text(repr(float(value)) + "\n")


def load_threshold(path) -> float:
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) != 1:
        raise FormatError(f"threshold file must hold one value, found {len(lines)} lines", 0)
    try:
        value = float(lines[0])
    except ValueError:
        raise FormatError(f"not a decimal number: {lines[0]!r}", text.index(lines[0])) from None
    if not np.isfinite(value):
        raise FormatError("threshold must be finite", 0)
    return value


@dataclass
class PipelineConfig:
    """Everything the end-to-end ``pipeline`` command needs.

    Paths are resolved against the config file's directory when loaded.
    """

    net_o: str
    net_s: str
    anet: str
    svm: str
    threshold: str
    scales: tuple = (0.7,)
    stride: int = 1
    max_windows: int = 500
    scales_s: tuple = (0.6,)
    extension: float = 1.2
    cells: int = 2
    cell_size: int = 8
    patch_stride: int = 2
    seed: int = 0

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        self.scales_s = tuple(float(s) for s in self.scales_s)
        for s in self.scales + self.scales_s:
            if not 0 < s <= 1:
                raise ValueError(f"window scale {s} outside (0, 1]")
        if self.stride < 1 or self.max_windows < 1:
            raise ValueError("stride and max_windows must be positive")
        if self.extension < 1:
            raise ValueError("extension factor must be >= 1")
        if self.cells < 1 or self.cell_size < 1 or self.patch_stride < 1:
            raise ValueError("patch grid parameters must be positive")


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_to_text(cfg: PipelineConfig) -> str:
    return "".join(f"{f.name}={_format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


def config_from_text(text: str, base: Path | None = None) -> PipelineConfig:
    known = {f.name: f for f in fields(PipelineConfig)}
    defaults = PipelineConfig("", "", "", "", "")
    values = {}
    offset = 0
    for line in text.splitlines(keepends=True):
        body = line.split("#", 1)[0].strip()
        if body:
            if "=" not in body:
                raise FormatError(f"expected key=value, got {body!r}", offset)
            key, raw = (s.strip() for s in body.split("=", 1))
            if key not in known:
                raise FormatError(f"unknown config key {key!r}", offset)
            kind = type(getattr(defaults, key))
            try:
                if kind is tuple:
                    values[key] = tuple(float(x) for x in raw.split(",") if x.strip())
                elif kind is int:
                    values[key] = int(raw)
                elif kind is float:
                    values[key] = float(raw)
                else:
                    values[key] = raw
            except ValueError:
                raise FormatError(f"bad value for {key}: {raw!r}", offset) from None
        offset += len(line.encode())
    missing = [k for k in ("net_o", "net_s", "anet", "svm", "threshold") if k not in values]
    if missing:
        raise FormatError(f"missing config keys: {', '.join(missing)}", offset)
    if base is not None:
        for k in ("net_o", "net_s", "anet", "svm", "threshold"):
            p = Path(values[k])
            values[k] = str(p if p.is_absolute() else base / p)
    return PipelineConfig(**values)


def save_config(path, cfg: PipelineConfig) -> None:
    Path(path).write_text(config_to_text(cfg))


def load_config(path) -> PipelineConfig:
    path = Path(path)
    return config_from_text(path.read_text(), path.parent)


# -- images ------------------------------------------------------------------------


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise TruncationError("image header ends early", pos)
        tokens.append(data[start:pos])
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after image header", pos)
    return tokens, pos + 1


def image_from_bytes(data: bytes) -> np.ndarray:
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        if magic in (b"P1", b"P2", b"P3", b"P4"):
            raise UnsupportedFormatError(f"{magic.decode()} images are not supported (binary P5/P6 only)", 0)
        raise MagicError(f"not a PGM/PPM file: {magic!r}", 0)
    tokens, pos = _header_tokens(data, 4)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"malformed image header {tokens!r}", 2) from None
    if w < 1 or h < 1:
        raise FormatError(f"bad image size {w}x{h}", 2)
    if maxval != 255:
        raise UnsupportedFormatError(f"maxval {maxval} unsupported (only 255)", 2)
    c = 1 if magic == b"P5" else 3
    need = w * h * c
    if len(data) - pos < need:
        raise TruncationError(f"pixel data needs {need} bytes, have {len(data) - pos}", len(data))
    if len(data) - pos > need:
        raise FormatError(f"{len(data) - pos - need} trailing bytes after pixels", pos + need)
    px = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(h, w, c)
    return (px.transpose(2, 0, 1).astype(DTYPE) / DTYPE(255)).astype(DTYPE)


def read_image(path) -> np.ndarray:
    return image_from_bytes(Path(path).read_bytes())


def image_to_bytes(t: np.ndarray) -> bytes:
    """Quantise a 1- or 3-channel [0, 1] map to 8-bit binary PGM/PPM."""
    if t.ndim != 3 or t.shape[0] not in (1, 3):
        raise ValueError(f"expected 1 or 3 channels, got shape {t.shape}")
    c, h, w = t.shape
    px = np.clip(np.floor(np.asarray(t, dtype=np.float64) * 255 + 0.5), 0, 255).astype(np.uint8)
    head = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode()
    return head + px.transpose(1, 2, 0).tobytes()


def write_image(path, t: np.ndarray) -> None:
    Path(path).write_bytes(image_to_bytes(t))
