import unittest
import sys
import os
import struct
import tempfile
from collections import OrderedDict

import numpy as np

# Add parent directory to path to import modules directly
current_dir = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(current_dir)
sys.path.insert(0, parent_dir)

from checkpoint import (BASELINE_MAGIC, MODEL_MAGIC, decode_container, encode_container, read_container,
                        write_container)
from exceptions import ConfigurationError, FormatError


class TestContainer(unittest.TestCase):
    """Test the checksummed binary container"""

    def setUp(self):
        self.blocks = OrderedDict([("w", np.arange(6.0).reshape(2, 3)), ("b", np.array([0.5])),
                                   ("gamma", np.float64(0.25))])
        self.buf = encode_container(MODEL_MAGIC, {"kind": "unit", "epochs": 3}, self.blocks)

    def test_roundtrip(self):
        header, blocks = decode_container(self.buf, MODEL_MAGIC)
        self.assertEqual(header, {"kind": "unit", "epochs": 3})
        self.assertEqual(list(blocks), ["w", "b", "gamma"])
        np.testing.assert_array_equal(blocks["w"], self.blocks["w"])
        self.assertEqual(blocks["gamma"].shape, ())
        self.assertEqual(float(blocks["gamma"]), 0.25)

    def test_layout(self):
        """Test magic, header length and trailing CRC positions"""
        self.assertEqual(self.buf[:4], b"RESA")
        (header_len,) = struct.unpack_from("<I", self.buf, 4)
        (count,) = struct.unpack_from("<Q", self.buf, 8 + header_len)
        self.assertEqual(count, 8)
        self.assertEqual(len(self.buf), 8 + header_len + 8 + 8 * count + 4)

    def test_empty_container(self):
        header, blocks = decode_container(encode_container(BASELINE_MAGIC, {}, OrderedDict()), BASELINE_MAGIC)
        self.assertEqual(header, {})
        self.assertEqual(len(blocks), 0)

    def test_bad_magic(self):
        with self.assertRaises(FormatError) as ctx:
            decode_container(self.buf, BASELINE_MAGIC)
        self.assertEqual(ctx.exception.offset, 0)
        self.assertEqual(ctx.exception.exit_code, 3)

    def test_crc_mismatch(self):
        corrupted = bytearray(self.buf)
        corrupted[-5] ^= 0xFF
        with self.assertRaises(FormatError) as ctx:
            decode_container(bytes(corrupted), MODEL_MAGIC)
        self.assertEqual(ctx.exception.offset, len(self.buf) - 4)

    def test_trailing_bytes(self):
        with self.assertRaises(FormatError) as ctx:
            decode_container(self.buf + b"\x00", MODEL_MAGIC)
        self.assertEqual(ctx.exception.offset, len(self.buf))

    def test_truncated(self):
        for cut in (2, 6, 20, len(self.buf) - 1):
            with self.assertRaises(FormatError):
                decode_container(self.buf[:cut], MODEL_MAGIC)

    def test_file_roundtrip(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "params.basl")
            write_container(path, BASELINE_MAGIC, {"kind": "linear"}, self.blocks)
            header, blocks = read_container(path, BASELINE_MAGIC)
        self.assertEqual(header["kind"], "linear")
        np.testing.assert_array_equal(blocks["b"], [0.5])

    def test_missing_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigurationError) as ctx:
                read_container(os.path.join(tmp, "none.resa"), MODEL_MAGIC)
        self.assertEqual(ctx.exception.exit_code, 2)


if __name__ == "__main__":
    unittest.main()
