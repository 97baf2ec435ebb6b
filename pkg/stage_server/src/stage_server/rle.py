"""Column-major run-length mask codec for the wire format.

Masks travel as ``{"size": [h, w], "counts": <string>}`` where the string
packs delta-coded run lengths in little-endian 5-bit chunks with a
continuation bit, offset into printable ASCII by 48.  The run list
alternates background/foreground starting with background, and must sum to
``h * w``.
"""

from __future__ import annotations

import numpy as np


class MaskCodecError(ValueError):
    """Bad compressed string, or runs that do not cover the mask area."""

    def __init__(self, message: str, code: str = "malformed-mask"):
        super().__init__(message)
        self.code = code


def counts_from_string(s: str) -> list[int]:
    counts: list[int] = []
    p = 0
    while p < len(s):
        x = 0
        k = 0
        more = True
        while more:
            if p >= len(s):
                raise MaskCodecError("truncated compressed string")
            c = ord(s[p]) - 48
            if not 0 <= c < 64:
                raise MaskCodecError(f"invalid character at position {p}")
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def counts_to_string(counts) -> str:
    out = []
    for i, c in enumerate(counts):
        x = int(c)
        if i > 2:
            x -= int(counts[i - 2])
        more = True
        while more:
            chunk = x & 0x1F
            x >>= 5
            more = (x != -1) if (chunk & 0x10) else (x != 0)
            if more:
                chunk |= 0x20
            out.append(chr(chunk + 48))
    return "".join(out)


def decode_mask(obj) -> np.ndarray:
    """Wire mask object -> (h, w) boolean array.

    Raises MaskCodecError with code ``rle-run-sum-mismatch`` when the runs
    do not sum to the declared area.
    """
    try:
        h, w = (int(v) for v in obj["size"])
        s = obj["counts"]
    except (KeyError, TypeError, ValueError) as e:
        raise MaskCodecError(f"malformed mask object: {e}") from e
    if h <= 0 or w <= 0 or not isinstance(s, str):
        raise MaskCodecError(f"malformed mask object: size {h}x{w}")
    counts = counts_from_string(s)
    if any(c < 0 for c in counts):
        raise MaskCodecError("negative run length")
    if sum(counts) != h * w:
        raise MaskCodecError(
            f"runs sum to {sum(counts)}, mask area is {h * w}",
            code="rle-run-sum-mismatch")
    vals = np.zeros(len(counts), dtype=bool)
    vals[1::2] = True
    flat = np.repeat(vals, np.asarray(counts, dtype=np.int64))
    return flat.reshape((h, w), order="F")


def encode_mask(mask: np.ndarray) -> dict:
    """(h, w) boolean array -> wire mask object."""
    mask = np.asarray(mask, dtype=bool)
    flat = mask.flatten(order="F")
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": [int(mask.shape[0]), int(mask.shape[1])],
            "counts": counts_to_string(counts)}
