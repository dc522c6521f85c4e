"""
Checksummed binary container shared by model checkpoints ("RESA"),
baseline parameters ("BASL") and fitted climatologies ("GTCL").

Layout (little-endian): 4-byte magic, uint32 header length, UTF-8 JSON
header listing the blocks in order, uint64 count of reals, the reals as
float64, then the CRC-32 of everything between the magic and the CRC.
"""

import json
import logging
import struct
import zlib
from collections import OrderedDict
from typing import Any, Dict, Tuple

import numpy as np

from exceptions import ConfigurationError, FormatError

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"RESA"
BASELINE_MAGIC = b"BASL"
CLIMATOLOGY_MAGIC = b"GTCL"


def encode_container(magic: bytes, header: Dict[str, Any], blocks: "OrderedDict[str, np.ndarray]") -> bytes:
    header = dict(header)
    header["blocks"] = [[name, list(np.shape(arr))] for name, arr in blocks.items()]
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    reals = (np.concatenate([np.asarray(a, dtype="<f8").reshape(-1) for a in blocks.values()])
             if blocks else np.zeros(0, dtype="<f8"))
    payload = b"".join([
        struct.pack("<I", len(header_bytes)),
        header_bytes,
        struct.pack("<Q", reals.size),
        reals.astype("<f8").tobytes(),
    ])
    return magic + payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def decode_container(buf: bytes, magic: bytes) -> Tuple[Dict[str, Any], "OrderedDict[str, np.ndarray]"]:
    if len(buf) < 4 or buf[:4] != magic:
        raise FormatError(f"Bad magic, expected {magic!r}", 0)
    pos = 4
    if len(buf) < pos + 4:
        raise FormatError("Truncated header length", pos)
    (header_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + header_len:
        raise FormatError("Truncated header", pos)
    try:
        header = json.loads(buf[pos:pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"Unreadable header: {e}", pos)
    pos += header_len
    if len(buf) < pos + 8:
        raise FormatError("Truncated real count", pos)
    (count,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    expected_end = pos + 8 * count + 4
    if len(buf) < expected_end:
        raise FormatError("Truncated parameter payload", pos)
    if len(buf) > expected_end:
        raise FormatError("Trailing bytes after checksum", expected_end)
    reals = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
    crc_pos = pos + 8 * count
    (crc,) = struct.unpack_from("<I", buf, crc_pos)
    if crc != zlib.crc32(buf[4:crc_pos]) & 0xFFFFFFFF:
        raise FormatError("CRC-32 mismatch", crc_pos)

    blocks: "OrderedDict[str, np.ndarray]" = OrderedDict()
    offset = 0
    for name, shape in header.pop("blocks", []):
        n = int(np.prod(shape)) if shape else 1
        if offset + n > count:
            raise FormatError(f"Block {name} runs past the payload", pos + 8 * offset)
        blocks[name] = reals[offset:offset + n].reshape(shape).copy()
        offset += n
    if offset != count:
        raise FormatError("Header blocks do not cover the payload", pos + 8 * offset)
    return header, blocks


def write_container(path, magic: bytes, header: Dict[str, Any], blocks) -> None:
    data = encode_container(magic, header, OrderedDict(blocks))
    with open(path, "wb") as f:
        f.write(data)
    logger.debug("wrote %s container %s (%d bytes)", magic.decode(), path, len(data))


def read_container(path, magic: bytes):
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise ConfigurationError(f"Cannot read {magic.decode()} file: {e}", {"path": str(path)})
    return decode_container(buf, magic)
