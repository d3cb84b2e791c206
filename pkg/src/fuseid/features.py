"""FUSEFEA1: extracted feature matrices with their labels and provenance.

Layout: b"FUSEFEA1", u32 header length, JSON header
{condition, count, dim, masked, num_classes, split}, int64 labels, float64 rows.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"FUSEFEA1"


class FeatureFormatError(ValueError):
    pass


@dataclass
class FeatureSet:
    features: np.ndarray
    labels: np.ndarray
    split: str
    condition: str
    masked: bool
    num_classes: int

    def encode(self) -> bytes:
        X = np.ascontiguousarray(self.features, dtype="<f8")
        y = np.ascontiguousarray(self.labels, dtype="<i8")
        if X.ndim != 2 or len(X) != len(y):
            raise ValueError("features must be a matrix with one label per row")
        header = json.dumps({
            "condition": self.condition, "count": int(len(y)), "dim": int(X.shape[1]),
            "masked": bool(self.masked), "num_classes": int(self.num_classes), "split": self.split,
        }, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return b"".join([FEATURE_MAGIC, struct.pack("<I", len(header)), header,
                         y.tobytes(), X.tobytes()])

    @classmethod
    def decode(cls, buf: bytes) -> "FeatureSet":
        if buf[:8] != FEATURE_MAGIC or len(buf) < 12:
            raise FeatureFormatError("not a FUSEFEA1 file")
        (hlen,) = struct.unpack_from("<I", buf, 8)
        try:
            h = json.loads(buf[12:12 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FeatureFormatError(f"bad feature header: {exc}") from None
        n, d = h["count"], h["dim"]
        pos = 12 + hlen
        if len(buf) != pos + 8 * n + 8 * n * d:
            raise FeatureFormatError("feature file size does not match its header")
        y = np.frombuffer(buf, "<i8", n, pos).astype(np.int64)
        X = np.frombuffer(buf, "<f8", n * d, pos + 8 * n).astype(np.float64).reshape(n, d)
        return cls(X, y, h["split"], h["condition"], h["masked"], h["num_classes"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.encode())

    @classmethod
    def load(cls, path) -> "FeatureSet":
        return cls.decode(Path(path).read_bytes())
