"""Embedding sets, their on-disk formats, and the identity-balanced batch sampler.

Two file formats are supported:

* ``EMB1`` -- little-endian binary container::

      b"EMB1" | u32 version=1 | u64 n | u32 d | u32 d_in | u8 dtype | u8 flags
      features (n*d values, row-major)
      raw_inputs (n*d_in values, row-major; only when d_in > 0)
      u64 meta_len | UTF-8 JSON [{"id": int, "modality": str, "sample_id": int}, ...]
      [u64 ext_len | UTF-8 JSON {"source_tag": str}]      (optional trailer)

  ``dtype`` is 0 for float32 and 1 for float64. Payloads are upcast to float64 on load.

* ``CSV`` -- header ``id,modality,sample_id,f0..f{d-1}[,x0..x{d_in-1}]``.
"""

from __future__ import annotations

import csv
import enum
import io
import itertools
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from svdkd.errors import ArgumentError, DataError, FormatError, IoError, SamplingError

logger = logging.getLogger(__name__)

MAGIC = b"EMB1"
VERSION = 1
_HEADER = struct.Struct("<4sIQIIBB")
_U64 = struct.Struct("<Q")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class Modality(enum.IntEnum):
    """Input modality. Integer order RGB < IR < SKETCH < TEXT fixes pair enumeration."""

    RGB = 0
    IR = 1
    SKETCH = 2
    TEXT = 3

    def __str__(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: "str | int | Modality") -> "Modality":
        if isinstance(value, Modality):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise ArgumentError(f"unknown modality {value!r}; expected one of rgb, ir, sketch, text") from None


def modality_pairs(present: Sequence[Modality] | None = None) -> list[tuple[Modality, Modality]]:
    """Unordered modality pairs (m, n) with m < n, in lexicographic Modality order.

    With ``present=None`` all six pairs are returned.
    """
    mods = sorted(set(Modality) if present is None else {Modality.parse(m) for m in present})
    return list(itertools.combinations(mods, 2))


@dataclass(frozen=True)
class SampleMeta:
    identity_id: int
    modality: Modality
    sample_id: int

    def to_json(self) -> dict:
        return {"id": self.identity_id, "modality": str(self.modality), "sample_id": self.sample_id}


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """Immutable n x d feature matrix with per-row metadata.

    ``raw_inputs`` (n x d_in) holds the student-side inputs paired with each row.
    """

    features: np.ndarray
    meta: tuple[SampleMeta, ...]
    raw_inputs: np.ndarray | None = None
    source_tag: str = "synthetic"
    identity_ids: np.ndarray = field(init=False, repr=False)
    modalities: np.ndarray = field(init=False, repr=False)
    sample_ids: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        feats = np.array(self.features, dtype=np.float64, copy=True)
        if feats.ndim == 1 and feats.size == 0:
            feats = feats.reshape(0, 0)
        if feats.ndim != 2:
            raise DataError(f"features must be a 2-D matrix, got shape {feats.shape}")
        meta = tuple(self.meta)
        if len(meta) != feats.shape[0]:
            raise DataError(f"metadata has {len(meta)} entries but features have {feats.shape[0]} rows")
        if not np.all(np.isfinite(feats)):
            raise DataError("features contain non-finite values")
        raw = None
        if self.raw_inputs is not None:
            raw = np.array(self.raw_inputs, dtype=np.float64, copy=True)
            if raw.ndim != 2 or raw.shape[0] != feats.shape[0]:
                raise DataError(f"raw_inputs shape {raw.shape} does not match {feats.shape[0]} rows")
            if not np.all(np.isfinite(raw)):
                raise DataError("raw_inputs contain non-finite values")
            raw.setflags(write=False)
        ids = np.array([m.identity_id for m in meta], dtype=np.int64)
        mods = np.array([int(m.modality) for m in meta], dtype=np.int64)
        sids = np.array([m.sample_id for m in meta], dtype=np.int64)
        if ids.size and (ids.min() < 0 or sids.min() < 0):
            raise DataError("identity_id and sample_id must be non-negative")
        if np.unique(sids).size != sids.size:
            raise DataError("sample_id values must be unique within a set")
        feats.setflags(write=False)
        for arr in (ids, mods, sids):
            arr.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "meta", meta)
        object.__setattr__(self, "raw_inputs", raw)
        object.__setattr__(self, "identity_ids", ids)
        object.__setattr__(self, "modalities", mods)
        object.__setattr__(self, "sample_ids", sids)

    @classmethod
    def from_arrays(
        cls,
        features: np.ndarray,
        identity_ids: Sequence[int],
        modalities: Sequence,
        sample_ids: Sequence[int] | None = None,
        raw_inputs: np.ndarray | None = None,
        source_tag: str = "synthetic",
    ) -> "EmbeddingSet":
        n = len(identity_ids)
        if sample_ids is None:
            sample_ids = range(n)
        if len(modalities) != n or len(sample_ids) != n:
            raise DataError("identity_ids, modalities and sample_ids must have equal length")
        meta = tuple(
            SampleMeta(int(i), Modality.parse(m), int(s)) for i, m, s in zip(identity_ids, modalities, sample_ids)
        )
        feats = np.asarray(features, dtype=np.float64)
        if feats.size == 0 and n == 0 and feats.ndim < 2:
            feats = feats.reshape(0, 0)
        return cls(feats, meta, raw_inputs, source_tag)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def d_in(self) -> int:
        return 0 if self.raw_inputs is None else self.raw_inputs.shape[1]

    @property
    def n_identities(self) -> int:
        return int(np.unique(self.identity_ids).size)

    def has_contiguous_ids(self) -> bool:
        uniq = np.unique(self.identity_ids)
        return bool(uniq.size == 0 or (uniq[0] == 0 and uniq[-1] == uniq.size - 1))

    def require_contiguous_ids(self) -> None:
        if not self.has_contiguous_ids():
            raise DataError("identity ids must form the contiguous range [0, C)")

    def subset(self, rows: Sequence[int] | np.ndarray, source_tag: str | None = None) -> "EmbeddingSet":
        rows = np.asarray(rows, dtype=np.int64)
        raw = None if self.raw_inputs is None else self.raw_inputs[rows]
        return EmbeddingSet(
            self.features[rows],
            tuple(self.meta[i] for i in rows),
            raw,
            self.source_tag if source_tag is None else source_tag,
        )

    def with_features(self, features: np.ndarray, source_tag: str | None = None) -> "EmbeddingSet":
        """Same rows and metadata, new feature matrix (e.g. student outputs)."""
        return EmbeddingSet(
            features, self.meta, self.raw_inputs, self.source_tag if source_tag is None else source_tag
        )

    def relabeled(self) -> "EmbeddingSet":
        """Copy with identity ids remapped onto [0, C) in ascending order."""
        uniq, inv = np.unique(self.identity_ids, return_inverse=True)
        meta = tuple(SampleMeta(int(i), m.modality, m.sample_id) for i, m in zip(inv, self.meta))
        return EmbeddingSet(self.features, meta, self.raw_inputs, self.source_tag)

    def rows_for(self, modality: Modality) -> np.ndarray:
        return np.flatnonzero(self.modalities == int(modality))

    def equals(self, other: "EmbeddingSet") -> bool:
        """Bit-exact comparison of payloads and metadata."""
        if self.features.shape != other.features.shape or self.meta != other.meta:
            return False
        if self.source_tag != other.source_tag:
            return False
        if not np.array_equal(self.features.view(np.uint64), other.features.view(np.uint64)):
            return False
        if (self.raw_inputs is None) != (other.raw_inputs is None):
            return False
        if self.raw_inputs is not None:
            if self.raw_inputs.shape != other.raw_inputs.shape:
                return False
            return np.array_equal(self.raw_inputs.view(np.uint64), other.raw_inputs.view(np.uint64))
        return True


# --------------------------------------------------------------------------- I/O


def _resolve_format(path: Path, fmt: str | None) -> str:
    if fmt is None:
        fmt = "CSV" if path.suffix.lower() == ".csv" else "EMB1"
    fmt = fmt.upper()
    if fmt not in ("EMB1", "CSV"):
        raise ArgumentError(f"unknown format {fmt!r}; expected EMB1 or CSV")
    return fmt


def load_embedding_set(path: str | Path, format: str | None = None, source_tag: str | None = None) -> EmbeddingSet:
    """Read an embedding set; ``format`` defaults from the file suffix.

    ``source_tag`` overrides whatever the file records (CSV files carry none and
    default to ``"synthetic"``).
    """
    path = Path(path)
    fmt = _resolve_format(path, format)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if fmt == "EMB1":
        es = _decode_emb1(blob)
    else:
        es = _decode_csv(blob.decode("utf-8"))
    if source_tag is not None:
        es = EmbeddingSet(es.features, es.meta, es.raw_inputs, source_tag)
    return es


def save_embedding_set(
    es: EmbeddingSet, path: str | Path, format: str | None = None, dtype: str = "f64"
) -> None:
    path = Path(path)
    fmt = _resolve_format(path, format)
    payload = encode_emb1(es, dtype) if fmt == "EMB1" else _encode_csv(es).encode("utf-8")
    try:
        path.write_bytes(payload)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def encode_emb1(es: EmbeddingSet, dtype: str = "f64") -> bytes:
    code = {"f32": 0, "f64": 1}.get(dtype)
    if code is None:
        raise ArgumentError(f"dtype must be 'f32' or 'f64', got {dtype!r}")
    np_dtype = _DTYPES[code]
    n, d = es.n, es.d
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, n, d, es.d_in, code, 0))
    buf.write(np.ascontiguousarray(es.features, dtype=np_dtype).tobytes())
    if es.raw_inputs is not None and es.d_in > 0:
        buf.write(np.ascontiguousarray(es.raw_inputs, dtype=np_dtype).tobytes())
    meta = json.dumps([m.to_json() for m in es.meta], separators=(",", ":")).encode("utf-8")
    buf.write(_U64.pack(len(meta)))
    buf.write(meta)
    ext = json.dumps({"source_tag": es.source_tag}, separators=(",", ":")).encode("utf-8")
    buf.write(_U64.pack(len(ext)))
    buf.write(ext)
    return buf.getvalue()


def _decode_emb1(blob: bytes) -> EmbeddingSet:
    if len(blob) < _HEADER.size:
        raise FormatError("file too short for an EMB1 header")
    magic, version, n, d, d_in, code, flags = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported EMB1 version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    if flags != 0:
        raise FormatError(f"reserved flags byte must be 0, got {flags}")
    np_dtype = _DTYPES[code]
    off = _HEADER.size

    def take(count: int, what: str) -> np.ndarray:
        nonlocal off
        nbytes = count * np_dtype.itemsize
        if off + nbytes > len(blob):
            raise DataError(f"truncated {what}: expected {count} values")
        arr = np.frombuffer(blob, dtype=np_dtype, count=count, offset=off).astype(np.float64)
        off += nbytes
        return arr

    feats = take(n * d, "feature block").reshape(n, d)
    raw = take(n * d_in, "raw_inputs block").reshape(n, d_in) if d_in > 0 else None
    if off + _U64.size > len(blob):
        raise DataError("missing metadata length field")
    (meta_len,) = _U64.unpack_from(blob, off)
    off += _U64.size
    if off + meta_len > len(blob):
        raise DataError("truncated metadata block")
    try:
        records = json.loads(blob[off : off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata is not valid UTF-8 JSON: {exc}") from exc
    off += meta_len
    source_tag = "synthetic"
    if off < len(blob):
        if off + _U64.size > len(blob):
            raise FormatError("truncated extension trailer")
        (ext_len,) = _U64.unpack_from(blob, off)
        off += _U64.size
        try:
            ext = json.loads(blob[off : off + ext_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"extension trailer is not valid JSON: {exc}") from exc
        source_tag = str(ext.get("source_tag", source_tag))
    if not isinstance(records, list) or len(records) != n:
        got = len(records) if isinstance(records, list) else type(records).__name__
        raise DataError(f"header declares n={n} but metadata has {got} entries")
    meta = tuple(_meta_from_json(r) for r in records)
    return EmbeddingSet(feats, meta, raw, source_tag)


def _meta_from_json(rec: dict) -> SampleMeta:
    try:
        return SampleMeta(int(rec["id"]), Modality.parse(rec["modality"]), int(rec["sample_id"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed metadata record {rec!r}") from exc


def _encode_csv(es: EmbeddingSet) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    header = ["id", "modality", "sample_id"] + [f"f{j}" for j in range(es.d)]
    header += [f"x{j}" for j in range(es.d_in)]
    writer.writerow(header)
    for i, m in enumerate(es.meta):
        row = [m.identity_id, str(m.modality), m.sample_id]
        row += [repr(float(v)) for v in es.features[i]]
        if es.raw_inputs is not None:
            row += [repr(float(v)) for v in es.raw_inputs[i]]
        writer.writerow(row)
    return out.getvalue()


def _decode_csv(text: str) -> EmbeddingSet:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("empty CSV file") from None
    if header[:3] != ["id", "modality", "sample_id"]:
        raise FormatError(f"CSV header must start with id,modality,sample_id; got {header[:3]}")
    rest = header[3:]
    d = 0
    while d < len(rest) and rest[d] == f"f{d}":
        d += 1
    d_in = 0
    while d + d_in < len(rest) and rest[d + d_in] == f"x{d_in}":
        d_in += 1
    if d + d_in != len(rest):
        raise FormatError(f"unexpected CSV column {rest[d + d_in]!r}")
    width = 3 + d + d_in
    meta, feats, raws = [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != width:
            raise DataError(f"CSV line {lineno} has {len(row)} fields, expected {width}")
        try:
            meta.append(SampleMeta(int(row[0]), Modality.parse(row[1]), int(row[2])))
            vals = [float(v) for v in row[3:]]
        except ValueError as exc:
            raise FormatError(f"CSV line {lineno}: {exc}") from exc
        feats.append(vals[:d])
        raws.append(vals[d:])
    n = len(meta)
    features = np.array(feats, dtype=np.float64).reshape(n, d)
    raw = np.array(raws, dtype=np.float64).reshape(n, d_in) if d_in > 0 else None
    return EmbeddingSet(features, tuple(meta), raw, "synthetic")


# ----------------------------------------------------------------------- sampler


@dataclass(frozen=True)
class Batch:
    """P identity groups of K row indices each, flattened group by group."""

    indices: np.ndarray
    P: int
    K: int

    @property
    def groups(self) -> np.ndarray:
        return self.indices.reshape(self.P, self.K)

    def __len__(self) -> int:
        return int(self.indices.size)


def _identity_rows(es: EmbeddingSet) -> dict[int, dict[int, np.ndarray]]:
    table: dict[int, dict[int, list[int]]] = {}
    for row, (pid, mod) in enumerate(zip(es.identity_ids.tolist(), es.modalities.tolist())):
        table.setdefault(pid, {}).setdefault(mod, []).append(row)
    return {pid: {m: np.asarray(r) for m, r in sorted(mods.items())} for pid, mods in sorted(table.items())}


def _sample_group(by_mod: dict[int, np.ndarray], K: int, rng: np.random.Generator, pid: int) -> list[int]:
    """Round-robin over the identity's modalities, without replacement until exhausted."""
    queues = {m: list(rng.permutation(rows)) for m, rows in by_mod.items()}
    if len(queues) == 1:
        logger.warning("identity %d has a single modality; group falls back to one modality", pid)
    picked: list[int] = []
    order = list(queues)
    while len(picked) < K and any(queues.values()):
        for m in order:
            if len(picked) == K:
                break
            if queues[m]:
                picked.append(int(queues[m].pop(0)))
    if len(picked) < K:
        # identity has fewer than K rows in total: continue round-robin with replacement
        cycle = itertools.cycle(order)
        while len(picked) < K:
            m = next(cycle)
            picked.append(int(rng.choice(by_mod[m])))
    return picked


def sample_batch(es: EmbeddingSet, P: int, K: int, rng: np.random.Generator) -> Batch:
    """Draw P distinct identities with K samples each, covering modalities round-robin."""
    if K < 2:
        raise ArgumentError(f"K must be >= 2, got {K}")
    table = _identity_rows(es)
    if len(table) < P:
        raise SamplingError(f"set has {len(table)} identities, fewer than P={P}")
    pids = list(table)
    chosen = rng.choice(len(pids), size=P, replace=False)
    indices = [i for c in chosen for i in _sample_group(table[pids[c]], K, rng, pids[c])]
    return Batch(np.asarray(indices, dtype=np.int64), P, K)


def iter_epoch(es: EmbeddingSet, P: int, K: int, rng: np.random.Generator) -> Iterator[Batch]:
    """One pass over a shuffled identity list, P identities per batch; the remainder is dropped."""
    if K < 2:
        raise ArgumentError(f"K must be >= 2, got {K}")
    table = _identity_rows(es)
    if len(table) < P:
        raise SamplingError(f"set has {len(table)} identities, fewer than P={P}")
    pids = list(table)
    order = rng.permutation(len(pids))
    for start in range(0, len(order) - P + 1, P):
        idx = [i for c in order[start : start + P] for i in _sample_group(table[pids[c]], K, rng, pids[c])]
        yield Batch(np.asarray(idx, dtype=np.int64), P, K)
