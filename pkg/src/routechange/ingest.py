"""Reading, writing and splitting labeled traceroute datasets.

The on-disk format is one row per traceroute with the columns::

    tr_src,tr_dst,timestamp,all_rtts,total_probes_sent,total_replies_last_hop,route_changed

``all_rtts`` holds a pipe-delimited list of RTTs in milliseconds; ``route_changed``
is optional. JSONL files use the same field names with ``all_rtts`` as an array.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateSplit,
    InvalidCount,
    MalformedLine,
    MalformedRow,
    MissingColumn,
    UnlabeledData,
)

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = (
    "tr_src",
    "tr_dst",
    "timestamp",
    "all_rtts",
    "total_probes_sent",
    "total_replies_last_hop",
)
LABEL_COLUMN = "route_changed"
ALL_COLUMNS = REQUIRED_COLUMNS + (LABEL_COLUMN,)

DEFAULT_TRAIN_FRACTION = 0.70


@dataclass(frozen=True, slots=True)
class TracerouteRecord:
    src: str
    dst: str
    timestamp: int
    rtts: tuple[float, ...]
    probes_sent: int
    replies_last_hop: int
    label: int | None = None

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError("timestamp must be >= 0")
        if self.probes_sent < 0 or self.replies_last_hop < 0:
            raise ValueError("probe counters must be >= 0")
        if self.replies_last_hop > self.probes_sent:
            raise ValueError("replies_last_hop exceeds probes_sent")
        for r in self.rtts:
            if not (math.isfinite(r) and r >= 0):
                raise ValueError(f"invalid rtt value {r!r}")
        if self.label is not None and self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")

    @property
    def path(self) -> tuple[str, str]:
        return (self.src, self.dst)


@dataclass(frozen=True)
class Dataset:
    """Immutable, ordered collection of records, either fully labeled or fully unlabeled."""

    records: tuple[TracerouteRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        n_labeled = sum(r.label is not None for r in self.records)
        if 0 < n_labeled < len(self.records):
            raise UnlabeledData(
                f"mixed labeling: {n_labeled} of {len(self.records)} records carry a label"
            )

    @property
    def labeled(self) -> bool:
        return bool(self.records) and self.records[0].label is not None

    def __len__(self) -> int:
        return len(self.records)

    def labels(self) -> np.ndarray:
        if not self.labeled:
            raise UnlabeledData(f"dataset has no {LABEL_COLUMN!r} labels")
        return np.fromiter((r.label for r in self.records), dtype=np.int8, count=len(self.records))

    def paths(self) -> list[tuple[str, str]]:
        """Distinct (src, dst) pairs in first-appearance order."""
        return list(OrderedDict.fromkeys(r.path for r in self.records))


@dataclass(frozen=True)
class DelimiterOptions:
    field: str = ","
    rtt: str = "|"


@dataclass(frozen=True)
class ImbalanceReport:
    n_rows: int
    n_negative: int
    n_positive: int
    pct_negative: float
    pct_positive: float
    ratio: float | None  # majority:minority, None when single-class
    single_class: bool

    def to_dict(self) -> dict:
        return {
            "n_rows": self.n_rows,
            "n_negative": self.n_negative,
            "n_positive": self.n_positive,
            "pct_negative": self.pct_negative,
            "pct_positive": self.pct_positive,
            "imbalance_ratio": self.ratio,
            "single_class": self.single_class,
        }


# -- parsing -----------------------------------------------------------------


def _parse_int(text: str, line: int, column: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise MalformedRow(line, f"{column} is not an integer: {text!r}") from None


def _parse_timestamp(value, line: int) -> int:
    if isinstance(value, bool):
        raise MalformedRow(line, f"timestamp is not a number: {value!r}")
    if isinstance(value, int):
        return value
    try:
        as_float = float(value)
    except (TypeError, ValueError):
        raise MalformedRow(line, f"timestamp is not a number: {value!r}") from None
    if not math.isfinite(as_float):
        raise MalformedRow(line, f"timestamp is not finite: {value!r}")
    if isinstance(value, str):
        try:
            return int(value)
        except ValueError:
            pass
    truncated = int(as_float)
    if truncated != as_float:
        logger.warning("line %d: sub-second timestamp %r truncated to %d", line, value, truncated)
    return truncated


def _make_record(line, src, dst, timestamp, rtts, sent, replies, label) -> TracerouteRecord:
    if replies > sent:
        raise InvalidCount(line, f"total_replies_last_hop ({replies}) > total_probes_sent ({sent})")
    if sent < 0 or replies < 0:
        raise MalformedRow(line, "negative probe counter")
    if timestamp < 0:
        raise MalformedRow(line, "negative timestamp")
    for r in rtts:
        if not (math.isfinite(r) and r >= 0):
            raise MalformedRow(line, f"invalid rtt value {r!r}")
    if label is not None and label not in (0, 1):
        raise MalformedRow(line, f"route_changed must be 0 or 1, got {label!r}")
    return TracerouteRecord(src, dst, timestamp, tuple(rtts), sent, replies, label)


def _records_to_dataset(records: list[TracerouteRecord], first_unlabeled_line: int | None,
                        first_labeled_line: int | None) -> Dataset:
    if first_unlabeled_line is not None and first_labeled_line is not None:
        raise MalformedRow(
            max(first_labeled_line, first_unlabeled_line),
            "mixed labeled and unlabeled rows",
        )
    return Dataset(tuple(records))


def parse_csv(path: str | os.PathLike, options: DelimiterOptions = DelimiterOptions()) -> Dataset:
    """Parse a CSV traceroute file. Row order is preserved."""
    with open(path, newline="", encoding="utf-8") as fh:
        return _parse_csv_stream(fh, options)


def parse_csv_text(text: str, options: DelimiterOptions = DelimiterOptions()) -> Dataset:
    return _parse_csv_stream(io.StringIO(text), options)


def _parse_csv_stream(fh, options: DelimiterOptions) -> Dataset:
    reader = csv.reader(fh, delimiter=options.field)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise MissingColumn(REQUIRED_COLUMNS[0]) from None
    for name in REQUIRED_COLUMNS:
        if name not in header:
            raise MissingColumn(name)
    pos = {name: header.index(name) for name in header}
    label_pos = pos.get(LABEL_COLUMN)

    records: list[TracerouteRecord] = []
    first_unlabeled = first_labeled = None
    for row in reader:
        line = reader.line_num
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != len(header):
            raise MalformedRow(line, f"expected {len(header)} fields, got {len(row)}")
        rtt_field = row[pos["all_rtts"]].strip()
        try:
            rtts = [float(v) for v in rtt_field.split(options.rtt)] if rtt_field else []
        except ValueError:
            raise MalformedRow(line, f"unparseable all_rtts field {rtt_field!r}") from None
        label = None
        if label_pos is not None:
            raw = row[label_pos].strip()
            if raw:
                label = _parse_int(raw, line, LABEL_COLUMN)
        if label is None:
            first_unlabeled = first_unlabeled or line
        else:
            first_labeled = first_labeled or line
        records.append(
            _make_record(
                line,
                row[pos["tr_src"]],
                row[pos["tr_dst"]],
                _parse_timestamp(row[pos["timestamp"]].strip(), line),
                rtts,
                _parse_int(row[pos["total_probes_sent"]].strip(), line, "total_probes_sent"),
                _parse_int(row[pos["total_replies_last_hop"]].strip(), line, "total_replies_last_hop"),
                label,
            )
        )
    return _records_to_dataset(records, first_unlabeled, first_labeled)


def parse_jsonl(path: str | os.PathLike) -> Dataset:
    """Parse a JSON-lines traceroute file; yields the same Dataset as the CSV parser."""
    records: list[TracerouteRecord] = []
    first_unlabeled = first_labeled = None
    with open(path, encoding="utf-8") as fh:
        for line_no, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError:
                raise MalformedLine(line_no) from None
            if not isinstance(obj, dict) or any(k not in obj for k in REQUIRED_COLUMNS):
                raise MalformedLine(line_no, "record lacks required fields")
            try:
                rtts = [float(v) for v in obj["all_rtts"]]
                sent = obj["total_probes_sent"]
                replies = obj["total_replies_last_hop"]
                if not all(isinstance(v, int) and not isinstance(v, bool) for v in (sent, replies)):
                    raise MalformedLine(line_no, "probe counters must be integers")
                label = obj.get(LABEL_COLUMN)
                if isinstance(label, bool):
                    label = int(label)
                record = _make_record(
                    line_no, str(obj["tr_src"]), str(obj["tr_dst"]),
                    _parse_timestamp(obj["timestamp"], line_no), rtts, sent, replies, label,
                )
            except (TypeError, ValueError):
                raise MalformedLine(line_no, "field has the wrong type") from None
            except MalformedRow as exc:
                if isinstance(exc, InvalidCount):
                    raise
                raise MalformedLine(line_no, exc.reason) from None
            if record.label is None:
                first_unlabeled = first_unlabeled or line_no
            else:
                first_labeled = first_labeled or line_no
            records.append(record)
    if first_unlabeled is not None and first_labeled is not None:
        raise MalformedLine(max(first_unlabeled, first_labeled), "mixed labeled and unlabeled rows")
    return Dataset(tuple(records))


def load_dataset(path: str | os.PathLike) -> Dataset:
    """Dispatch on extension: ``.jsonl``/``.ndjson`` use the JSONL parser, else CSV."""
    suffix = Path(path).suffix.lower()
    if suffix in (".jsonl", ".ndjson"):
        return parse_jsonl(path)
    return parse_csv(path)


# -- writing -----------------------------------------------------------------


def _fmt_float(v: float) -> str:
    return repr(float(v))


def dataset_to_csv(dataset: Dataset, options: DelimiterOptions = DelimiterOptions()) -> str:
    out = io.StringIO()
    writer = csv.writer(out, delimiter=options.field, lineterminator="\n",
                        quoting=csv.QUOTE_MINIMAL)
    columns = ALL_COLUMNS if dataset.labeled else REQUIRED_COLUMNS
    writer.writerow(columns)
    for r in dataset.records:
        row = [r.src, r.dst, r.timestamp, options.rtt.join(_fmt_float(v) for v in r.rtts),
               r.probes_sent, r.replies_last_hop]
        if dataset.labeled:
            row.append(r.label)
        writer.writerow(row)
    return out.getvalue()


def dataset_to_jsonl(dataset: Dataset) -> str:
    lines = []
    for r in dataset.records:
        obj = {
            "tr_src": r.src, "tr_dst": r.dst, "timestamp": r.timestamp,
            "all_rtts": list(r.rtts), "total_probes_sent": r.probes_sent,
            "total_replies_last_hop": r.replies_last_hop,
        }
        if r.label is not None:
            obj[LABEL_COLUMN] = r.label
        lines.append(json.dumps(obj))
    return "\n".join(lines) + ("\n" if lines else "")


def atomic_write(path: str | os.PathLike, data: str | bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(dataset: Dataset, path: str | os.PathLike,
              options: DelimiterOptions = DelimiterOptions()) -> None:
    atomic_write(path, dataset_to_csv(dataset, options))


def write_jsonl(dataset: Dataset, path: str | os.PathLike) -> None:
    atomic_write(path, dataset_to_jsonl(dataset))


# -- splitting and statistics --------------------------------------------------


def split(dataset: Dataset, train_fraction: float = DEFAULT_TRAIN_FRACTION,
          seed: int = 0) -> tuple[Dataset, Dataset]:
    """Path-grouped train/test split.

    Paths are shuffled with ``seed`` and assigned to the train side until its row
    count first reaches ``train_fraction * N``; the rest go to test. Rows keep
    their original relative order on each side.
    """
    if not dataset.labeled:
        raise UnlabeledData("split requires a labeled dataset")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    paths = dataset.paths()
    sizes: dict[tuple[str, str], int] = {}
    for r in dataset.records:
        sizes[r.path] = sizes.get(r.path, 0) + 1
    order = np.random.default_rng(seed).permutation(len(paths))
    target = train_fraction * len(dataset)
    train_paths: set[tuple[str, str]] = set()
    filled = 0
    for k in order:
        if filled >= target:
            break
        train_paths.add(paths[k])
        filled += sizes[paths[k]]
    if not train_paths or len(train_paths) == len(paths):
        raise DegenerateSplit(
            f"fraction {train_fraction} over {len(paths)} paths leaves one side empty"
        )
    train = [r for r in dataset.records if r.path in train_paths]
    test = [r for r in dataset.records if r.path not in train_paths]
    return Dataset(tuple(train)), Dataset(tuple(test))


def class_distribution(dataset: Dataset) -> ImbalanceReport:
    y = dataset.labels()
    n = int(y.size)
    n_pos = int(y.sum())
    n_neg = n - n_pos
    single = n_pos == 0 or n_neg == 0
    ratio = None if single else max(n_pos, n_neg) / min(n_pos, n_neg)
    return ImbalanceReport(
        n_rows=n,
        n_negative=n_neg,
        n_positive=n_pos,
        pct_negative=100.0 * n_neg / n if n else 0.0,
        pct_positive=100.0 * n_pos / n if n else 0.0,
        ratio=ratio,
        single_class=single,
    )


def concat(datasets: Iterable[Dataset]) -> Dataset:
    records: list[TracerouteRecord] = []
    for d in datasets:
        records.extend(d.records)
    return Dataset(tuple(records))


def from_records(records: Sequence[TracerouteRecord]) -> Dataset:
    return Dataset(tuple(records))
