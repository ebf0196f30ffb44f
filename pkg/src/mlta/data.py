"""Bipartite network ingestion: incidence matrices, edge lists and summaries."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Raised for malformed, empty or non-binary network input."""


@dataclass(frozen=True)
class IncidenceMatrix:
    """Binary N x R relation between sending nodes (rows) and receiving nodes (columns)."""

    cells: np.ndarray
    sender_labels: tuple[str, ...] = field(default=())
    receiver_labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        cells = np.asarray(self.cells)
        if cells.ndim != 2:
            raise DataError(f"incidence matrix must be 2-D, got shape {cells.shape}")
        n, r = cells.shape
        if n < 1 or r < 1:
            raise DataError("incidence matrix needs at least one sender and one receiver")
        bad = np.argwhere((cells != 0) & (cells != 1))
        if bad.size:
            i, j = bad[0]
            raise DataError(f"non-binary value {cells[i, j]!r} at row {i + 1}, column {j + 1}")
        cells = cells.astype(np.int8)
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

        senders = tuple(self.sender_labels) or tuple(str(i + 1) for i in range(n))
        receivers = tuple(self.receiver_labels) or tuple(str(j + 1) for j in range(r))
        for name, labels, size in (("sender", senders, n), ("receiver", receivers, r)):
            if len(labels) != size:
                raise DataError(f"{len(labels)} {name} labels for {size} {name}s")
            if len(set(labels)) != size:
                raise DataError(f"{name} labels are not unique")
        object.__setattr__(self, "sender_labels", senders)
        object.__setattr__(self, "receiver_labels", receivers)

    @property
    def n_senders(self) -> int:
        return self.cells.shape[0]

    @property
    def n_receivers(self) -> int:
        return self.cells.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    def drop_sender(self, index: int) -> "IncidenceMatrix":
        keep = [i for i in range(self.n_senders) if i != index]
        return IncidenceMatrix(
            self.cells[keep],
            tuple(self.sender_labels[i] for i in keep),
            self.receiver_labels,
        )


@dataclass(frozen=True)
class NetworkSummary:
    sender_degrees: np.ndarray
    receiver_degrees: np.ndarray
    n_edges: int
    n_isolated_senders: int


def summarize(m: IncidenceMatrix) -> NetworkSummary:
    sender_degrees = m.cells.sum(axis=1, dtype=np.int64)
    receiver_degrees = m.cells.sum(axis=0, dtype=np.int64)
    return NetworkSummary(
        sender_degrees=sender_degrees,
        receiver_degrees=receiver_degrees,
        n_edges=int(sender_degrees.sum()),
        n_isolated_senders=int(np.count_nonzero(sender_degrees == 0)),
    )


def _read_rows(path) -> list[list[str]]:
    text = Path(path).read_text(encoding="utf-8-sig")
    rows = [row for row in csv.reader(io.StringIO(text)) if any(c.strip() for c in row)]
    if not rows:
        raise DataError(f"{path}: empty input")
    return [[c.strip() for c in row] for row in rows]


_CORNER_LABELS = {"", "sender", "senders", "actor", "id", "node"}


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_edge_list(path, *, header: bool | None = None) -> IncidenceMatrix:
    """Read a two-column ``sender,receiver`` CSV into an incidence matrix.

    Labels are ordered by first appearance; repeated pairs collapse to a single
    edge. ``header=None`` treats the first row as a header only when it reads
    literally ``sender,receiver``.
    """
    rows = _read_rows(path)
    if header is None:
        header = [c.lower() for c in rows[0]] == ["sender", "receiver"]
    start = 1 if header else 0

    senders: dict[str, int] = {}
    receivers: dict[str, int] = {}
    pairs: set[tuple[int, int]] = set()
    n_dup = 0
    for lineno, row in enumerate(rows[start:], start=start + 1):
        if len(row) != 2 or not row[0] or not row[1]:
            raise DataError(f"{path}: line {lineno}: expected 'sender,receiver', got {row!r}")
        i = senders.setdefault(row[0], len(senders))
        j = receivers.setdefault(row[1], len(receivers))
        if (i, j) in pairs:
            n_dup += 1
        pairs.add((i, j))
    if not pairs:
        raise DataError(f"{path}: empty input")
    if n_dup:
        log.info("%s: collapsed %d duplicate edge(s)", path, n_dup)

    cells = np.zeros((len(senders), len(receivers)), dtype=np.int8)
    for i, j in pairs:
        cells[i, j] = 1
    return IncidenceMatrix(cells, tuple(senders), tuple(receivers))


def load_matrix(path) -> IncidenceMatrix:
    """Read a comma-delimited 0/1 matrix.

    A first row or first column is taken as labels when it holds any
    non-numeric entry. Numeric sender ids are recognised as a label column
    when the header's corner cell is blank or a name such as ``sender``.
    """
    rows = _read_rows(path)
    has_header = any(not _is_number(c) for c in rows[0][1:]) or (
        rows[0][0].lower() in _CORNER_LABELS
        or (len(rows[0]) == 1 and not _is_number(rows[0][0]))
    )
    body_rows = rows[1:] if has_header else rows
    if not body_rows:
        raise DataError(f"{path}: no data rows")
    has_index = any(not _is_number(row[0]) for row in body_rows) or (
        has_header and rows[0][0].lower() in _CORNER_LABELS
    )

    width = len(body_rows[0])
    values = []
    for i, row in enumerate(body_rows):
        lineno = i + (2 if has_header else 1)
        if len(row) != width:
            raise DataError(f"{path}: line {lineno}: ragged row ({len(row)} cells, expected {width})")
        cells = row[1:] if has_index else row
        parsed = []
        for j, c in enumerate(cells):
            if c not in ("0", "1"):
                col = j + (2 if has_index else 1)
                raise DataError(f"{path}: non-binary value {c!r} at line {lineno}, column {col}")
            parsed.append(int(c))
        values.append(parsed)

    sender_labels = tuple(row[0] for row in body_rows) if has_index else ()
    receiver_labels = ()
    if has_header:
        receiver_labels = tuple(rows[0][1:] if has_index else rows[0])
        if len(rows[0]) != width:
            raise DataError(f"{path}: header has {len(rows[0])} cells, expected {width}")
    return IncidenceMatrix(np.array(values, dtype=np.int8), sender_labels, receiver_labels)


def load_network(path, format: str = "auto") -> IncidenceMatrix:
    """Dispatch to :func:`load_edge_list` or :func:`load_matrix`.

    ``auto`` picks the edge-list reader when every row has exactly two cells
    and some non-header row has a non-binary entry.
    """
    if format == "edges":
        return load_edge_list(path)
    if format == "matrix":
        return load_matrix(path)
    if format != "auto":
        raise ValueError(f"unknown network format {format!r}")
    rows = _read_rows(path)
    if all(len(r) == 2 for r in rows) and any(c not in ("0", "1") for r in rows[1:] for c in r):
        return load_edge_list(path)
    return load_matrix(path)


def write_matrix(m: IncidenceMatrix, path) -> None:
    """Write the canonical labelled form read back by :func:`load_matrix`."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sender", *m.receiver_labels])
        for label, row in zip(m.sender_labels, m.cells):
            writer.writerow([label, *(int(v) for v in row)])
