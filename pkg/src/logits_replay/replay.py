"""Stage-0 replay files (UTF-8 JSON lines).

Line 1 is the header::

    {"format_version":1,"vocab_size":64,"tau":0.98,"k_max":200,
     "position_strategy":"all","model_fingerprint":"0123456789abcdef"}

Every following line is one record, keys in this fixed order::

    {"s":seq_id,"t":pos,"g":gold,"c":[candidates...],"a":true,"z":[...],"r":rho}

``a`` is written only when the gold token had to be appended; ``z`` (float32
logits aligned with ``c``) and ``r`` (outside mass under the Stage-0 model) are
written only when logits are stored. Reals use the shortest decimal string that
round-trips at their precision. Files are written in one shot via a temporary
file and rename.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ParseError, ValidationError

__all__ = [
    "FORMAT_VERSION",
    "POSITION_STRATEGIES",
    "ReplayRecord",
    "ReplayFileHeader",
    "ReplayStats",
    "write_records",
    "read_records",
    "iter_records",
    "summarize",
]

FORMAT_VERSION = 1
POSITION_STRATEGIES = ("all", "random", "last_token", "bucket")
_HEADER_KEYS = ("format_version", "vocab_size", "tau", "k_max", "position_strategy", "model_fingerprint")
_RECORD_KEYS = {"s", "t", "g", "c", "a", "z", "r"}


@dataclass(frozen=True)
class ReplayRecord:
    seq_id: int
    pos: int
    gold_id: int
    candidates: tuple[int, ...]
    logits: tuple[float, ...] | None = None
    gold_appended: bool = False
    outside_mass: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(int(c) for c in self.candidates))
        if self.logits is not None:
            # stored precision is float32
            object.__setattr__(self, "logits", tuple(float(np.float32(x)) for x in self.logits))

    def validate(self, vocab_size: int | None = None) -> None:
        if self.seq_id < 0 or self.pos < 0:
            raise ValidationError("seq_id and pos must be non-negative")
        if len(set(self.candidates)) != len(self.candidates):
            raise ValidationError("duplicate candidate ids")
        if self.gold_id not in self.candidates:
            raise ValidationError(f"gold token {self.gold_id} missing from candidates")
        if self.logits is not None and len(self.logits) != len(self.candidates):
            raise ValidationError("logits and candidates differ in length")
        if self.logits is not None and not all(math.isfinite(x) for x in self.logits):
            raise ValidationError("non-finite stored logit")
        if vocab_size is not None and any(c < 0 or c >= vocab_size for c in self.candidates):
            raise ValidationError("candidate id outside the vocabulary")


@dataclass(frozen=True)
class ReplayFileHeader:
    vocab_size: int
    tau: float
    k_max: int
    position_strategy: str = "all"
    model_fingerprint: int = 0
    format_version: int = FORMAT_VERSION

    def validate(self) -> None:
        if self.format_version != FORMAT_VERSION:
            raise ValidationError(f"unsupported replay format version {self.format_version}")
        if self.vocab_size < 2:
            raise ValidationError("vocab_size must be >= 2")
        if not 0.0 < self.tau < 1.0 or self.k_max < 1:
            raise ValidationError("invalid tau / k_max in header")
        if self.position_strategy not in POSITION_STRATEGIES:
            raise ValidationError(f"unknown position strategy {self.position_strategy!r}")
        if not 0 <= self.model_fingerprint < 1 << 64:
            raise ValidationError("model fingerprint must be a 64-bit unsigned integer")


@dataclass
class ReplayStats:
    record_count: int = 0
    k_histogram: dict[int, int] = field(default_factory=dict)
    median_set_size: float | None = None
    mean_set_size: float | None = None
    mean_outside_mass: float | None = None
    gold_appended_rate: float | None = None

    def to_dict(self) -> dict:
        return {
            "record_count": self.record_count,
            "k_histogram": {str(k): v for k, v in sorted(self.k_histogram.items())},
            "median_set_size": self.median_set_size,
            "mean_set_size": self.mean_set_size,
            "mean_outside_mass": self.mean_outside_mass,
            "gold_appended_rate": self.gold_appended_rate,
        }


def _f32(x: float) -> str:
    return str(np.float32(x))


def _f64(x: float) -> str:
    return repr(float(x))


def _header_line(h: ReplayFileHeader) -> str:
    return (
        f'{{"format_version":{h.format_version},"vocab_size":{h.vocab_size},'
        f'"tau":{_f64(h.tau)},"k_max":{h.k_max},'
        f'"position_strategy":{json.dumps(h.position_strategy)},'
        f'"model_fingerprint":"{h.model_fingerprint:016x}"}}'
    )


def _record_line(r: ReplayRecord) -> str:
    parts = [f'"s":{r.seq_id}', f'"t":{r.pos}', f'"g":{r.gold_id}',
             '"c":[' + ",".join(str(c) for c in r.candidates) + "]"]
    if r.gold_appended:
        parts.append('"a":true')
    if r.logits is not None:
        parts.append('"z":[' + ",".join(_f32(x) for x in r.logits) + "]")
        if r.outside_mass is not None:
            parts.append(f'"r":{_f64(r.outside_mass)}')
    return "{" + ",".join(parts) + "}"


def write_records(path, header: ReplayFileHeader, records: Iterable[ReplayRecord]) -> int:
    """Write a complete replay file; returns the record count.

    Any invalid record aborts the write with a ValidationError naming its
    index, and no file is left behind.
    """
    header.validate()
    lines = [_header_line(header)]
    for i, rec in enumerate(records):
        try:
            rec.validate(header.vocab_size)
        except ValidationError as exc:
            raise ValidationError(f"record {i}: {exc}") from None
        lines.append(_record_line(rec))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(lines) - 1


def _parse_header(line: str) -> ReplayFileHeader:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed header: {exc.msg}", 1) from None
    if not isinstance(obj, dict) or set(obj) != set(_HEADER_KEYS):
        raise ParseError(f"header must have exactly the keys {_HEADER_KEYS}", 1)
    try:
        fp = int(obj["model_fingerprint"], 16)
        header = ReplayFileHeader(
            vocab_size=int(obj["vocab_size"]),
            tau=float(obj["tau"]),
            k_max=int(obj["k_max"]),
            position_strategy=obj["position_strategy"],
            model_fingerprint=fp,
            format_version=int(obj["format_version"]),
        )
        header.validate()
    except (TypeError, ValueError) as exc:
        raise ParseError(f"invalid header: {exc}", 1) from None
    return header


def _parse_record(line: str, lineno: int, vocab_size: int) -> ReplayRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed record: {exc.msg}", lineno) from None
    if not isinstance(obj, dict) or not {"s", "t", "g", "c"} <= set(obj) or set(obj) - _RECORD_KEYS:
        raise ParseError("record keys must be s, t, g, c and optionally a, z, r", lineno)
    ints = [obj["s"], obj["t"], obj["g"], *obj["c"]] if isinstance(obj["c"], list) else None
    if ints is None or not all(isinstance(x, int) and not isinstance(x, bool) for x in ints):
        raise ParseError("s, t, g and c must be integers", lineno)
    z = obj.get("z")
    if z is not None and (not isinstance(z, list) or not all(isinstance(x, (int, float)) for x in z)):
        raise ParseError("z must be a list of numbers", lineno)
    rec = ReplayRecord(
        seq_id=obj["s"],
        pos=obj["t"],
        gold_id=obj["g"],
        candidates=tuple(obj["c"]),
        logits=None if z is None else tuple(z),
        gold_appended=bool(obj.get("a", False)),
        outside_mass=None if obj.get("r") is None else float(obj["r"]),
    )
    try:
        rec.validate(vocab_size)
    except ValidationError as exc:
        raise ValidationError(f"line {lineno}: {exc}") from None
    return rec


def iter_records(path) -> tuple[ReplayFileHeader, Iterator[ReplayRecord]]:
    """Header plus a lazy iterator that validates each record as it is read."""
    f = open(path, encoding="utf-8")
    first = f.readline()
    if not first.strip():
        f.close()
        raise ParseError("missing header", 1)
    try:
        header = _parse_header(first)
    except Exception:
        f.close()
        raise

    def gen():
        with f:
            for lineno, line in enumerate(f, 2):
                if line.strip():
                    yield _parse_record(line, lineno, header.vocab_size)

    return header, gen()


def read_records(path) -> tuple[ReplayFileHeader, list[ReplayRecord]]:
    header, it = iter_records(path)
    return header, list(it)


def summarize(path) -> ReplayStats:
    header, it = iter_records(path)
    sizes: list[int] = []
    rhos: list[float] = []
    appended = 0
    for rec in it:
        sizes.append(len(rec.candidates))
        appended += rec.gold_appended
        if rec.outside_mass is not None:
            rhos.append(rec.outside_mass)
    if not sizes:
        return ReplayStats()
    return ReplayStats(
        record_count=len(sizes),
        k_histogram=dict(sorted(Counter(sizes).items())),
        median_set_size=float(np.median(sizes)),
        mean_set_size=float(np.mean(sizes)),
        mean_outside_mass=float(np.mean(rhos)) if rhos else None,
        gold_appended_rate=appended / len(sizes),
    )
