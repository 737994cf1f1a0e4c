"""Writes the golden WNQT/WNQQ files byte by byte with the struct module.

Run from this directory: python3 generate.py
"""

import struct


def wnqt(kind, dims, data):
    out = b"WNQT" + struct.pack("<BBB", 1, kind, len(dims))
    out += b"".join(struct.pack("<Q", d) for d in dims)
    out += b"".join(struct.pack("<f", v) for v in data)
    return out


def plane(signs):
    out = bytearray((len(signs) + 7) // 8)
    for i, s in enumerate(signs):
        if s > 0:
            out[i // 8] |= 1 << (i % 8)
    return bytes(out)


def wnqq(kind, k, m, filters):
    out = b"WNQQ" + struct.pack("<BBBQQ", 1, kind, k, len(filters), m)
    for mav, alpha, planes in filters:
        out += struct.pack("<f", mav)
        out += b"".join(struct.pack("<f", a) for a in alpha)
        out += b"".join(plane(p) for p in planes)
    return out


FC_DATA = [0.5, -1.25, 2.0, 0.0, 0.125, -3.0]
CONV_DATA = [1.0, -0.5, 0.25, -0.125, 4.0, 0.0, -2.0, 0.75]

P = [
    [1, -1, 1, 1, -1, -1, 1, -1, 1, 1],
    [-1, -1, 1, -1, 1, -1, 1, 1, -1, 1],
    [-1, 1, -1, -1, -1, 1, 1, -1, 1, -1],
    [1, 1, 1, -1, -1, 1, -1, 1, 1, -1],
]

with open("fc_2x3.wnqt", "wb") as f:
    f.write(wnqt(0, [2, 3], FC_DATA))
with open("conv_2x1x2x2.wnqt", "wb") as f:
    f.write(wnqt(1, [2, 1, 2, 2], CONV_DATA))
with open("fc_k2_n2_m10.wnqq", "wb") as f:
    f.write(wnqq(0, 2, 10, [(2.0, [0.5, 0.25], P[0:2]), (0.5, [0.75, -0.125], P[2:4])]))
