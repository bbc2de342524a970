"""Prefix-decodable ``.tmlp`` container.

Layout (all little-endian)::

    header   magic "TMLP" | version u16 | arch u8 | input_dim u16 | output_dim u16
             | hidden_width u16 | num_layers u16 | omega0 f32 | value dtype u8
             | crc32 u32 (over the preceding 20 bytes)
    chunk i  layer_index u16 | payload_length u32 | payload | crc32 u32 (over payload)

The payload of chunk ``i`` is ``W_i, b_i`` followed by that layer's tail arrays,
each row-major binary32. Any prefix holding ``j`` complete chunks decodes to
the model truncated after layer ``j``.
"""

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, IntegrityError, UnderflowError
from .model import Architecture, ModelConfig, ModelParams, layer_size, truncate

MAGIC = b"TMLP"
FORMAT_VERSION = 1
DTYPE_F32 = 1
VALUE_BYTES = 4
EXTENSION = ".tmlp"

ARCH_IDS = {
    Architecture.TMLP: 0,
    Architecture.TMLP_NO_RESIDUAL: 1,
    Architecture.TMLP_NO_MULTIPLICATIVE: 2,
    Architecture.PLAIN_MLP: 3,
    Architecture.RESIDUAL_MLP: 4,
}
ARCH_BY_ID = {v: k for k, v in ARCH_IDS.items()}

_HEADER = struct.Struct("<4sHBHHHHfB")
_CRC = struct.Struct("<I")
_CHUNK_HEAD = struct.Struct("<HI")
HEADER_SIZE = _HEADER.size + _CRC.size
CHUNK_OVERHEAD = _CHUNK_HEAD.size + _CRC.size
_U16_MAX = 0xFFFF


def _crc(data):
    return zlib.crc32(data) & 0xFFFFFFFF


@dataclass(frozen=True)
class ContainerHeader:
    architecture: Architecture
    input_dim: int
    output_dim: int
    hidden_width: int
    num_layers: int
    omega0: float
    version: int = FORMAT_VERSION
    value_dtype: int = DTYPE_F32

    @classmethod
    def for_config(cls, config):
        return cls(
            architecture=config.architecture,
            input_dim=config.input_dim,
            output_dim=config.output_dim,
            hidden_width=config.hidden_width,
            num_layers=config.num_hidden_layers,
            omega0=float(np.float32(config.omega0)),
        )

    def model_config(self, num_layers=None):
        return ModelConfig(
            input_dim=self.input_dim,
            output_dim=self.output_dim,
            hidden_width=self.hidden_width,
            num_hidden_layers=num_layers or self.num_layers,
            omega0=self.omega0,
            architecture=self.architecture,
        )

    def pack(self):
        dims = (self.input_dim, self.output_dim, self.hidden_width, self.num_layers)
        if any(not 0 < d <= _U16_MAX for d in dims):
            raise FormatError(f"dimensions {dims} do not fit the u16 header fields")
        body = _HEADER.pack(
            MAGIC,
            self.version,
            ARCH_IDS[self.architecture],
            *dims,
            self.omega0,
            self.value_dtype,
        )
        return body + _CRC.pack(_crc(body))

    @classmethod
    def unpack(cls, data):
        if len(data) < HEADER_SIZE:
            raise FormatError(f"truncated header: {len(data)} of {HEADER_SIZE} bytes")
        body = bytes(data[: _HEADER.size])
        magic, version, arch_id, in_dim, out_dim, width, layers, omega0, dtype_id = _HEADER.unpack(body)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version}")
        (crc,) = _CRC.unpack_from(data, _HEADER.size)
        if crc != _crc(body):
            raise FormatError("header CRC mismatch")
        if arch_id not in ARCH_BY_ID:
            raise FormatError(f"unknown architecture id {arch_id}")
        if dtype_id != DTYPE_F32:
            raise FormatError(f"unsupported value dtype id {dtype_id}")
        if min(in_dim, out_dim, width, layers) == 0:
            raise FormatError("header dimensions must be positive")
        return cls(ARCH_BY_ID[arch_id], in_dim, out_dim, width, layers, float(omega0), version, dtype_id)


def payload_size(header, i):
    """Payload bytes of layer ``i`` (1-based)."""
    return VALUE_BYTES * layer_size(header.model_config(), i)


def chunk_size(header, i):
    return CHUNK_OVERHEAD + payload_size(header, i)


def bytes_for_layers(header, j):
    """Bytes a receiver needs before it can decode the first ``j`` layers."""
    return HEADER_SIZE + sum(chunk_size(header, i) for i in range(1, j + 1))


def encode(params):
    """Serialise a model; parameters are cast to binary32."""
    header = ContainerHeader.for_config(params.config)
    out = bytearray(header.pack())
    for i, arrays in enumerate(params.layers, start=1):
        payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
        out += _CHUNK_HEAD.pack(i, len(payload))
        out += payload
        out += _CRC.pack(_crc(payload))
    return bytes(out)


def chunk_iter(data):
    """Yield ``(layer_index, start, end)`` byte ranges of each complete chunk.

    Payloads are not decoded or checked. Stops at the first incomplete chunk.
    """
    header = ContainerHeader.unpack(data)
    pos = HEADER_SIZE
    while pos + _CHUNK_HEAD.size <= len(data):
        index, length = _CHUNK_HEAD.unpack_from(data, pos)
        end = pos + _CHUNK_HEAD.size + length + _CRC.size
        if end > len(data) or index > header.num_layers:
            return
        yield index, pos, end
        pos = end


def _decode_layer(header, i, payload):
    cfg = header.model_config()
    values = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    arrays, pos = [], 0
    for shape in cfg.layer_shapes(i):
        n = int(np.prod(shape))
        arrays.append(values[pos : pos + n].reshape(shape).copy())
        pos += n
    return arrays


def decode_prefix(data, max_layers=None):
    """Decode as many leading layers as the bytes allow; returns ``(params, j)``.

    Raises :class:`IntegrityError` for the first damaged chunk within reach and
    :class:`UnderflowError` if no complete chunk is present.
    """
    data = memoryview(bytes(data))
    header = ContainerHeader.unpack(data)
    limit = header.num_layers if max_layers is None else min(int(max_layers), header.num_layers)
    if limit < 1:
        raise ValueError("max_layers must be >= 1")
    layers = []
    pos = HEADER_SIZE
    for i in range(1, limit + 1):
        if pos + _CHUNK_HEAD.size > len(data):
            break
        index, length = _CHUNK_HEAD.unpack_from(data, pos)
        expected = payload_size(header, i)
        if index != i:
            raise IntegrityError(f"chunk {i}: layer index field reads {index}", layer_index=i)
        if length != expected:
            raise IntegrityError(f"chunk {i}: payload length {length}, expected {expected}", layer_index=i)
        start = pos + _CHUNK_HEAD.size
        end = start + length + _CRC.size
        if end > len(data):
            break
        payload = data[start : start + length]
        (crc,) = _CRC.unpack_from(data, start + length)
        if crc != _crc(payload):
            raise IntegrityError(f"chunk {i}: CRC mismatch", layer_index=i)
        layers.append(_decode_layer(header, i, payload))
        pos = end
    j = len(layers)
    if j == 0:
        raise UnderflowError("no complete layer chunk in the byte stream")
    if header.architecture.single_head and j != header.num_layers:
        raise UnderflowError(
            f"{header.architecture.value} has its only head at layer {header.num_layers}; got {j} layers"
        )
    return ModelParams(header.model_config(num_layers=j), layers), j


def truncate_bytes(data, j):
    """Byte prefix holding the header and the first ``j`` chunks."""
    header = ContainerHeader.unpack(data)
    if not 1 <= j <= header.num_layers:
        raise ValueError(f"truncation depth {j} outside 1..{header.num_layers}")
    return bytes(data[: bytes_for_layers(header, j)])


def write_container(path, params):
    data = encode(params)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def read_container(path, max_layers=None):
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_prefix(data, max_layers)


def reference_truncation(params, j):
    """What :func:`decode_prefix` must reproduce: binary32 cast, then truncation."""
    return truncate(params.astype(np.float32), j)
