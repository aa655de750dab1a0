# Writes golden.ntc with struct/zlib only, independent of the Rust encoder.
import struct, zlib

tensors = [
    ("encoder.w", [2, 3], [0.0, 0.5, -1.0, 1.5, 2.0, -2.5]),
    ("train.epoch", [2], [7.0, 0.0]),
    ("s", [], [-1.25]),
]
body = b"NTC1" + struct.pack("<II", 1, len(tensors))
for name, shape, data in tensors:
    n = name.encode()
    body += struct.pack("<I", len(n)) + n + struct.pack("<I", len(shape))
    body += struct.pack(f"<{len(shape)}I", *shape) + struct.pack(f"<{len(data)}f", *data)
open("golden.ntc", "wb").write(body + struct.pack("<I", zlib.crc32(body)))
