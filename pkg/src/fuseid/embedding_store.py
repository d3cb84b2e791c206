"""Embedding records, the FUSEID1 container format, pairing and synthetic data.

FUSEID1 layout (all integers little-endian)::

    b"FUSEID1\\0"
    u32 header length, UTF-8 JSON {"face_dim", "record_count", "voice_dim"}
    record_count x (u16 len + speaker_id, u16 len + clip_id,
                    u8 split, u8 modality, float32[dim] vector)

A modality with no records has ``null`` as its dimension.
"""
from __future__ import annotations

import enum
import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .netcore import l2_normalize

MAGIC = b"FUSEID1\0"


class EmbeddingFormatError(ValueError):
    """Malformed or truncated FUSEID1 file."""


class DimensionMismatchError(ValueError):
    pass


class ValidationError(ValueError):
    pass


class DuplicateRecordError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    def __init__(self, message: str, skipped: int = 0):
        super().__init__(message)
        self.skipped = skipped


class Split(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"


class Modality(str, enum.Enum):
    VOICE = "voice"
    FACE = "face"


_SPLIT_CODES = {Split.TRAIN: 0, Split.TEST: 1}
_MODALITY_CODES = {Modality.VOICE: 0, Modality.FACE: 1}


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    """One modality vector for one (speaker, clip). Vectors are float32."""

    speaker_id: str
    clip_id: str
    split: Split
    modality: Modality
    vector: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "split", Split(self.split))
        object.__setattr__(self, "modality", Modality(self.modality))
        vec = np.ascontiguousarray(self.vector, dtype="<f4").reshape(-1)
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)

    @property
    def key(self) -> tuple:
        return (self.speaker_id, self.clip_id, self.modality.value, self.split.value)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return self.key == other.key and np.array_equal(self.vector, other.vector)

    def __hash__(self):
        return hash(self.key)


@dataclass(frozen=True)
class PairedSample:
    speaker_index: int
    voice: np.ndarray
    face: np.ndarray
    speaker_id: str = ""
    clip_id: str = ""


@dataclass
class DatasetManifest:
    num_speakers: int
    voice_dim: int | None
    face_dim: int | None
    counts: dict = field(default_factory=dict)  # split -> modality -> count
    label_map: dict = field(default_factory=dict)  # speaker_id -> index

    def check(self, require_train_coverage: bool = True, records=None) -> None:
        """Enforce the dataset-level invariants needed before training."""
        if self.num_speakers < 2:
            raise ValidationError(f"need at least 2 speakers, found {self.num_speakers}")
        if require_train_coverage and records is not None:
            seen = {r.speaker_id for r in records if r.split is Split.TRAIN}
            missing = sorted(set(self.label_map) - seen)
            if missing:
                raise ValidationError(f"speakers without train records: {missing[:5]}")

    def summary(self) -> dict:
        return {
            "num_speakers": self.num_speakers,
            "voice_dim": self.voice_dim,
            "face_dim": self.face_dim,
            "counts": self.counts,
        }


def build_label_map(speaker_ids: Iterable[str]) -> dict:
    return {sid: i for i, sid in enumerate(sorted(set(speaker_ids)))}


def _modality_dims(records: Sequence[EmbeddingRecord]) -> dict:
    dims: dict = {Modality.VOICE: None, Modality.FACE: None}
    for r in records:
        d = dims[r.modality]
        if d is None:
            dims[r.modality] = r.vector.size
        elif d != r.vector.size:
            raise DimensionMismatchError(
                f"{r.modality.value} record ({r.speaker_id}, {r.clip_id}) has dim "
                f"{r.vector.size}, expected {d}"
            )
    return dims


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise ValueError(f"identifier too long ({len(b)} bytes)")
    return struct.pack("<H", len(b)) + b


def encode_embeddings(records: Sequence[EmbeddingRecord]) -> bytes:
    dims = _modality_dims(records)
    header = json.dumps(
        {"voice_dim": dims[Modality.VOICE], "face_dim": dims[Modality.FACE],
         "record_count": len(records)},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(header)), header]
    for r in records:
        parts.append(_pack_str(r.speaker_id))
        parts.append(_pack_str(r.clip_id))
        parts.append(struct.pack("<BB", _SPLIT_CODES[r.split], _MODALITY_CODES[r.modality]))
        parts.append(r.vector.tobytes())
    return b"".join(parts)


def write_embeddings(records: Sequence[EmbeddingRecord], path) -> None:
    data = encode_embeddings(records)
    Path(path).write_bytes(data)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise EmbeddingFormatError(f"truncated file at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def decode_embeddings(buf: bytes) -> tuple[DatasetManifest, list[EmbeddingRecord]]:
    rd = _Reader(buf)
    if rd.take(len(MAGIC)) != MAGIC:
        raise EmbeddingFormatError("not a FUSEID1 file (bad magic)")
    (hlen,) = rd.unpack("<I")
    try:
        header = json.loads(rd.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise EmbeddingFormatError(f"bad header: {exc}") from None
    dims = {Modality.VOICE: header.get("voice_dim"), Modality.FACE: header.get("face_dim")}
    split_of = {v: k for k, v in _SPLIT_CODES.items()}
    modality_of = {v: k for k, v in _MODALITY_CODES.items()}

    records = []
    seen = set()
    for _ in range(int(header["record_count"])):
        speaker_id = rd.string()
        clip_id = rd.string()
        split_code, mod_code = rd.unpack("<BB")
        if split_code not in split_of or mod_code not in modality_of:
            raise EmbeddingFormatError(f"bad split/modality code at ({speaker_id}, {clip_id})")
        modality = modality_of[mod_code]
        dim = dims[modality]
        if dim is None:
            raise EmbeddingFormatError(f"{modality.value} record but header has no dimension")
        vec = np.frombuffer(rd.take(4 * dim), dtype="<f4")
        if not np.all(np.isfinite(vec)):
            raise ValidationError(
                f"non-finite component in record (speaker_id={speaker_id!r}, clip_id={clip_id!r})"
            )
        rec = EmbeddingRecord(speaker_id, clip_id, split_of[split_code], modality, vec)
        if rec.key in seen:
            raise DuplicateRecordError(f"duplicate record {rec.key}")
        seen.add(rec.key)
        records.append(rec)
    if rd.pos != len(buf):
        raise EmbeddingFormatError(f"{len(buf) - rd.pos} trailing bytes after last record")

    return make_manifest(records, dims[Modality.VOICE], dims[Modality.FACE]), records


def read_embeddings(path) -> tuple[DatasetManifest, list[EmbeddingRecord]]:
    return decode_embeddings(Path(path).read_bytes())


def make_manifest(records: Sequence[EmbeddingRecord], voice_dim=None, face_dim=None) -> DatasetManifest:
    if voice_dim is None and face_dim is None:
        dims = _modality_dims(records)
        voice_dim, face_dim = dims[Modality.VOICE], dims[Modality.FACE]
    tally = Counter((r.split.value, r.modality.value) for r in records)
    counts = {s.value: {m.value: tally[(s.value, m.value)] for m in Modality} for s in Split}
    label_map = build_label_map(r.speaker_id for r in records)
    return DatasetManifest(len(label_map), voice_dim, face_dim, counts, label_map)


def pair_samples(records: Sequence[EmbeddingRecord], split, label_map: dict | None = None):
    """Join voice and face records of the same clip.

    Returns ``(pairs, skipped)``; ``skipped`` counts clips in ``split`` that lack
    one of the two modalities. Pairs come out sorted by (speaker_id, clip_id).
    """
    split = Split(split)
    if label_map is None:
        label_map = build_label_map(r.speaker_id for r in records)
    by_clip: dict = {}
    for r in records:
        if r.split is split:
            by_clip.setdefault((r.speaker_id, r.clip_id), {})[r.modality] = r.vector
    pairs = []
    skipped = 0
    for (sid, cid) in sorted(by_clip):
        mods = by_clip[(sid, cid)]
        if Modality.VOICE in mods and Modality.FACE in mods:
            pairs.append(PairedSample(label_map[sid], mods[Modality.VOICE], mods[Modality.FACE],
                                      sid, cid))
        else:
            skipped += 1
    if not pairs:
        raise EmptyDatasetError(f"no clip in split {split.value!r} has both modalities "
                                f"({skipped} skipped)", skipped)
    return pairs, skipped


def stack_pairs(pairs: Sequence[PairedSample]):
    """Pairs -> (voice matrix, face matrix, label vector)."""
    voice = np.stack([p.voice for p in pairs]).astype(np.float64)
    face = np.stack([p.face for p in pairs]).astype(np.float64)
    labels = np.array([p.speaker_index for p in pairs], dtype=np.int64)
    return voice, face, labels


@dataclass(frozen=True)
class SynthConfig:
    num_identities: int = 50
    latent_dim: int = 16
    voice_dim: int = 64
    face_dim: int = 64
    clips_per_identity_train: int = 20
    clips_per_identity_test: int = 8
    voice_noise_sigma: float = 0.8
    face_noise_sigma: float = 0.2
    seed: int = 7

    def validate(self) -> None:
        counts = dict(num_identities=self.num_identities, latent_dim=self.latent_dim,
                      voice_dim=self.voice_dim, face_dim=self.face_dim,
                      clips_per_identity_train=self.clips_per_identity_train,
                      clips_per_identity_test=self.clips_per_identity_test)
        for name, v in counts.items():
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v}")
        if self.voice_noise_sigma < 0 or self.face_noise_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        if self.latent_dim > min(self.voice_dim, self.face_dim):
            raise ValueError("latent_dim must not exceed voice_dim or face_dim")


def generate_synthetic(cfg: SynthConfig) -> list[EmbeddingRecord]:
    """Shared-latent data: both modalities are noisy linear views of one
    per-identity latent vector, through mixing matrices shared by all identities."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    scale = 1.0 / np.sqrt(cfg.latent_dim)
    w_voice = rng.standard_normal((cfg.voice_dim, cfg.latent_dim)) * scale
    w_face = rng.standard_normal((cfg.face_dim, cfg.latent_dim)) * scale
    width = len(str(cfg.num_identities - 1))

    records = []
    for k in range(cfg.num_identities):
        z = rng.standard_normal(cfg.latent_dim)
        speaker_id = f"id{k:0{width}d}"
        clip_no = 0
        for split, n in ((Split.TRAIN, cfg.clips_per_identity_train),
                         (Split.TEST, cfg.clips_per_identity_test)):
            for _ in range(n):
                clip_id = f"clip{clip_no:04d}"
                clip_no += 1
                voice = l2_normalize(w_voice @ z + cfg.voice_noise_sigma * rng.standard_normal(cfg.voice_dim))
                face = l2_normalize(w_face @ z + cfg.face_noise_sigma * rng.standard_normal(cfg.face_dim))
                records.append(EmbeddingRecord(speaker_id, clip_id, split, Modality.VOICE, voice))
                records.append(EmbeddingRecord(speaker_id, clip_id, split, Modality.FACE, face))
    return records
