"""NSL-KDD ingestion: parsing, attack taxonomy, min-max statistics and encoding.

Records are kept in file order. Symbolic features (protocol_type, service,
flag) are encoded either ordinally (normalized vocabulary index, keeping the
41-column layout) or one-hot.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from importlib import resources
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

FEATURE_NAMES = (
    "duration", "protocol_type", "service", "flag", "src_bytes", "dst_bytes",
    "land", "wrong_fragment", "urgent", "hot", "num_failed_logins", "logged_in",
    "num_compromised", "root_shell", "su_attempted", "num_root",
    "num_file_creations", "num_shells", "num_access_files", "num_outbound_cmds",
    "is_host_login", "is_guest_login", "count", "srv_count", "serror_rate",
    "srv_serror_rate", "rerror_rate", "srv_rerror_rate", "same_srv_rate",
    "diff_srv_rate", "srv_diff_host_rate", "dst_host_count",
    "dst_host_srv_count", "dst_host_same_srv_rate", "dst_host_diff_srv_rate",
    "dst_host_same_src_port_rate", "dst_host_srv_diff_host_rate",
    "dst_host_serror_rate", "dst_host_srv_serror_rate", "dst_host_rerror_rate",
    "dst_host_srv_rerror_rate",
)
NUM_FEATURES = len(FEATURE_NAMES)
# zero-based column positions of protocol_type, service, flag
SYMBOLIC = (1, 2, 3)

ENCODINGS = ("ordinal", "one-hot")
UNKNOWN_POLICIES = ("strict", "lenient")

SNAPSHOT_MAGIC = b"DQLSNAP1"


class ClassLabel(IntEnum):
    NORMAL = 0
    DOS = 1
    PROBE = 2
    U2R = 3
    R2L = 4

    @property
    def display(self) -> str:
        return _DISPLAY[self]

    @classmethod
    def from_name(cls, name: str) -> "ClassLabel":
        try:
            return _BY_CATEGORY[name.strip().lower()]
        except KeyError:
            raise ValueError(f"unknown class category {name!r}") from None


_DISPLAY = {
    ClassLabel.NORMAL: "Normal",
    ClassLabel.DOS: "DoS",
    ClassLabel.PROBE: "Probe",
    ClassLabel.U2R: "U2R",
    ClassLabel.R2L: "R2L",
}
_BY_CATEGORY = {v.lower(): k for k, v in _DISPLAY.items()}
CLASS_NAMES = tuple(_DISPLAY[c] for c in ClassLabel)


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source:
            where += f"{source}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class UnknownAttackError(KeyError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(name)

    def __str__(self) -> str:
        return f"attack name {self.name!r} is not in the taxonomy"


class UnknownCategoryError(ValueError):
    def __init__(self, feature: str, category: str):
        self.feature = feature
        self.category = category
        super().__init__(f"feature {feature!r}: category {category!r} not seen when fitting")


@dataclass(frozen=True)
class RawRecord:
    """One NSL-KDD row: 41 feature values, the attack name and optional difficulty."""

    features: tuple
    label: str
    difficulty: int | None = None


def parse_records(source: IO[bytes] | IO[str] | bytes | str | Iterable, name: str | None = None) -> list[RawRecord]:
    """Parse comma-separated NSL-KDD rows (42 or 43 fields) into records.

    ``source`` may be a binary or text stream, raw bytes, or an iterable of
    lines. Blank lines are skipped; line numbers in errors are 1-based.
    """
    if isinstance(source, bytes):
        source = io.BytesIO(source)
    elif isinstance(source, str):
        source = io.StringIO(source)
    records = []
    for lineno, line in enumerate(source, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        line = line.strip()
        if not line:
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) not in (42, 43):
            raise ParseError(f"expected 42 or 43 fields, got {len(fields)}", lineno, name)
        values = []
        for i in range(NUM_FEATURES):
            raw = fields[i]
            if i in SYMBOLIC:
                if not raw:
                    raise ParseError(f"empty symbolic value in feature F{i + 1} ({FEATURE_NAMES[i]})", lineno, name)
                values.append(raw)
                continue
            try:
                x = float(raw)
            except ValueError:
                x = math.nan
            if not math.isfinite(x):
                raise ParseError(
                    f"non-numeric value {raw!r} in feature F{i + 1} ({FEATURE_NAMES[i]})", lineno, name
                )
            values.append(x)
        difficulty = None
        if len(fields) == 43:
            try:
                difficulty = int(fields[42])
            except ValueError:
                raise ParseError(f"difficulty {fields[42]!r} is not an integer", lineno, name) from None
        label = fields[41].lower().rstrip(".")
        records.append(RawRecord(tuple(values), label, difficulty))
    return records


def read_records(path: str | os.PathLike) -> list[RawRecord]:
    with open(path, "rb") as fh:
        return parse_records(fh, name=os.fspath(path))


# --- taxonomy -------------------------------------------------------------

def load_taxonomy(path: str | os.PathLike | None = None) -> dict[str, ClassLabel]:
    """Read ``attack_name,category`` pairs. Defaults to the bundled file."""
    if path is None:
        text = resources.files(__package__).joinpath("taxonomy.txt").read_text("utf-8")
        origin = "<bundled taxonomy>"
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        origin = os.fspath(path)
    table: dict[str, ClassLabel] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2 or not parts[0]:
            raise ParseError("expected 'attack_name,category'", lineno, origin)
        try:
            category = ClassLabel.from_name(parts[1])
        except ValueError as exc:
            raise ParseError(str(exc), lineno, origin) from None
        name = parts[0].lower()
        if name in table and table[name] != category:
            raise ParseError(f"conflicting category for {name!r}", lineno, origin)
        table[name] = category
    return table


_DEFAULT_TAXONOMY: dict[str, ClassLabel] | None = None


def default_taxonomy() -> dict[str, ClassLabel]:
    global _DEFAULT_TAXONOMY
    if _DEFAULT_TAXONOMY is None:
        _DEFAULT_TAXONOMY = load_taxonomy()
    return _DEFAULT_TAXONOMY


def map_attack_label(name: str, taxonomy: Mapping[str, ClassLabel] | None = None) -> ClassLabel:
    table = default_taxonomy() if taxonomy is None else taxonomy
    try:
        return table[name]
    except KeyError:
        raise UnknownAttackError(name) from None


# --- normalization --------------------------------------------------------

@dataclass(frozen=True)
class NormalizationStats:
    """Per-feature min/max plus sorted vocabularies for the symbolic features.

    For symbolic features ``minimum`` is 0 and ``maximum`` is the largest
    vocabulary index, so ordinal encoding uses the same min-max rule.
    """

    minimum: tuple[float, ...]
    maximum: tuple[float, ...]
    vocabularies: Mapping[int, tuple[str, ...]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "minimum": list(self.minimum),
            "maximum": list(self.maximum),
            "vocabularies": {FEATURE_NAMES[i]: list(v) for i, v in sorted(self.vocabularies.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormalizationStats":
        index = {n: i for i, n in enumerate(FEATURE_NAMES)}
        vocab = {index[k]: tuple(v) for k, v in d["vocabularies"].items()}
        return cls(tuple(float(x) for x in d["minimum"]), tuple(float(x) for x in d["maximum"]), vocab)


def fit_stats(records: Sequence[RawRecord]) -> NormalizationStats:
    if not records:
        raise ValueError("cannot fit normalization statistics on an empty record list")
    vocab = {i: tuple(sorted({r.features[i] for r in records})) for i in SYMBOLIC}
    numeric = np.array(
        [[0.0 if i in SYMBOLIC else r.features[i] for i in range(NUM_FEATURES)] for r in records],
        dtype=np.float64,
    )
    lo = numeric.min(axis=0)
    hi = numeric.max(axis=0)
    for i in SYMBOLIC:
        lo[i] = 0.0
        hi[i] = float(len(vocab[i]) - 1)
    return NormalizationStats(tuple(lo.tolist()), tuple(hi.tolist()), vocab)


@dataclass(frozen=True)
class EncodedDataset:
    matrix: np.ndarray
    labels: np.ndarray
    stats: NormalizationStats
    encoding: str = "ordinal"
    columns: tuple[str, ...] = ()

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.labels.shape[0]:
            raise ValueError(f"matrix rows {self.matrix.shape} do not match {self.labels.shape[0]} labels")
        self.matrix.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return self.matrix.shape[0]

    @property
    def width(self) -> int:
        return self.matrix.shape[1]

    def class_counts(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=len(ClassLabel))
        return {c.display: int(counts[c]) for c in ClassLabel}


def column_names(stats: NormalizationStats, encoding: str = "ordinal") -> tuple[str, ...]:
    if encoding == "ordinal":
        return FEATURE_NAMES
    names = []
    for i, fname in enumerate(FEATURE_NAMES):
        if i in SYMBOLIC:
            names.extend(f"{fname}={cat}" for cat in stats.vocabularies[i])
        else:
            names.append(fname)
    return tuple(names)


def encode(
    records: Sequence[RawRecord],
    stats: NormalizationStats,
    encoding: str = "ordinal",
    unknown: str = "strict",
    taxonomy: Mapping[str, ClassLabel] | None = None,
) -> EncodedDataset:
    """Min-max scale numeric features into [0, 1] and encode symbolic ones.

    Values outside the fitted range are clamped. Constant features map to 0.
    An unseen category raises under ``unknown="strict"``; under ``"lenient"``
    it encodes as 1 (ordinal) or an all-zero block (one-hot) and is logged.
    """
    if encoding not in ENCODINGS:
        raise ValueError(f"encoding must be one of {ENCODINGS}, got {encoding!r}")
    if unknown not in UNKNOWN_POLICIES:
        raise ValueError(f"unknown-category policy must be one of {UNKNOWN_POLICIES}, got {unknown!r}")
    n = len(records)
    lookup = {i: {cat: k for k, cat in enumerate(stats.vocabularies[i])} for i in SYMBOLIC}

    raw = np.zeros((n, NUM_FEATURES), dtype=np.float64)
    unseen = np.zeros((n, NUM_FEATURES), dtype=bool)
    warned: set[tuple[int, str]] = set()
    for r, rec in enumerate(records):
        if len(rec.features) != NUM_FEATURES:
            raise ValueError(f"record {r} has {len(rec.features)} features, expected {NUM_FEATURES}")
        for i, value in enumerate(rec.features):
            if i in SYMBOLIC:
                idx = lookup[i].get(value)
                if idx is None:
                    if unknown == "strict":
                        raise UnknownCategoryError(FEATURE_NAMES[i], value)
                    if (i, value) not in warned:
                        log.warning("feature %s: unseen category %r encoded as unknown", FEATURE_NAMES[i], value)
                        warned.add((i, value))
                    unseen[r, i] = True
                    idx = 0
                raw[r, i] = idx
            else:
                raw[r, i] = value
    labels = np.array([map_attack_label(rec.label, taxonomy) for rec in records], dtype=np.int64)

    lo = np.asarray(stats.minimum, dtype=np.float64)
    hi = np.asarray(stats.maximum, dtype=np.float64)
    span = hi - lo
    constant = span <= 0
    scaled = (raw - lo) / np.where(constant, 1.0, span)
    scaled[:, constant] = 0.0
    np.clip(scaled, 0.0, 1.0, out=scaled)
    scaled[unseen] = 1.0

    if encoding == "ordinal":
        matrix = scaled
    else:
        blocks = []
        for i in range(NUM_FEATURES):
            if i not in SYMBOLIC:
                blocks.append(scaled[:, i : i + 1])
                continue
            width = len(stats.vocabularies[i])
            onehot = np.zeros((n, width), dtype=np.float64)
            idx = raw[:, i].astype(np.int64)
            rows = np.flatnonzero(~unseen[:, i])
            onehot[rows, idx[rows]] = 1.0
            blocks.append(onehot)
        matrix = np.hstack(blocks) if blocks else np.zeros((n, 0))
    matrix = np.ascontiguousarray(matrix)
    return EncodedDataset(matrix, labels, stats, encoding, column_names(stats, encoding))


# --- snapshot files -------------------------------------------------------
#
# Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header
# (sorted keys), rows*width float64 LE matrix (row-major), rows uint8 labels.

def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_snapshot(dataset: EncodedDataset, path: str | os.PathLike) -> None:
    header = _json_bytes(
        {
            "format": 1,
            "rows": len(dataset),
            "width": dataset.width,
            "encoding": dataset.encoding,
            "columns": list(dataset.columns),
            "classes": list(CLASS_NAMES),
            "stats": dataset.stats.to_dict(),
        }
    )
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(dataset.matrix, dtype="<f8").tobytes())
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def load_snapshot(path: str | os.PathLike) -> EncodedDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != SNAPSHOT_MAGIC:
        raise ValueError(f"{os.fspath(path)}: not an encoded-dataset snapshot")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + hlen])
    rows, width = header["rows"], header["width"]
    start = 16 + hlen
    nbytes = rows * width * 8
    if len(blob) != start + nbytes + rows:
        raise ValueError(f"{os.fspath(path)}: truncated or corrupt snapshot")
    matrix = np.frombuffer(blob, dtype="<f8", count=rows * width, offset=start).reshape(rows, width).astype(np.float64)
    labels = np.frombuffer(blob, dtype=np.uint8, count=rows, offset=start + nbytes).astype(np.int64)
    stats = NormalizationStats.from_dict(header["stats"])
    return EncodedDataset(matrix, labels, stats, header["encoding"], tuple(header["columns"]))


def class_tally(records: Iterable[RawRecord], taxonomy: Mapping[str, ClassLabel] | None = None) -> dict[str, int]:
    counts = {name: 0 for name in CLASS_NAMES}
    for rec in records:
        counts[map_attack_label(rec.label, taxonomy).display] += 1
    return counts
