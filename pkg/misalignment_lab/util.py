from __future__ import annotations

import contextlib
import csv
import hashlib
import io
import logging
import math
import os
import pathlib
import tempfile
import zlib
from typing import Any, Iterable, Sequence, Union

import numpy as np

from .constants import CSV_FLOAT_FORMAT

logger = logging.getLogger(__name__)

StreamName = Union[int, str]

# Columns whose values depend on the machine, not on the seed.
VOLATILE_COLUMNS = ("wall_ms", )


def _stream_id(name: StreamName) -> int:
    """Stable integer for a stream name ("chunk" -> crc32, 7 -> 7)."""
    if isinstance(name, (int, np.integer)):
        if name < 0:
            raise ValueError(f"Stream indices must be nonnegative, got {name}")
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


def make_rng(seed: int, *stream: StreamName) -> np.random.Generator:
    """
    Build the generator for one named stream under a root seed.

    Streams are Philox (counter-based) generators keyed by a SeedSequence
    whose spawn key is the stream path, so ``make_rng(7, "lemma2", 3)`` is
    the same sequence on every machine, in any process, in any order.

    Parameters
    ----------
    seed : int
        The root seed of the experiment.
    *stream : int or str
        Path naming the stream, e.g. ``("sorting", "train")`` or
        ``("lemma1", chunk_index)``.

    Returns
    -------
    rng : numpy.random.Generator
    """
    sequence = np.random.SeedSequence(
        int(seed), spawn_key=tuple(_stream_id(name) for name in stream)
    )
    return np.random.Generator(np.random.Philox(sequence))


def orthogonal_matrix(
    rows: int, cols: int, rng: np.random.Generator, gain: float = 1.0
) -> np.ndarray:
    """
    (Semi-)orthogonal matrix from the QR decomposition of a Gaussian matrix.

    The diagonal of R is sign-fixed so the result is Haar-distributed.  For
    square matrices ``W @ W.T == I``; otherwise the shorter side is
    orthonormal.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"Invalid orthogonal matrix shape ({rows}, {cols})")
    flat_shape = (max(rows, cols), min(rows, cols))
    gaussian = rng.standard_normal(flat_shape)
    q, r = np.linalg.qr(gaussian)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * np.ascontiguousarray(q)


def format_cell(value: Any) -> str:
    """CSV cell text; reals keep 17 significant digits, inf stays 'inf'."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return CSV_FLOAT_FORMAT.format(float(value))
    return str(value)


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        if len(row) != len(header):
            raise ValueError(
                f"Row {row} has {len(row)} cells; header has {len(header)}"
            )
        writer.writerow([format_cell(value) for value in row])
    return buffer.getvalue()


def atomic_write_text(path: Union[str, os.PathLike], text: str) -> pathlib.Path:
    """Write ``text`` to a temporary file beside ``path``, then rename."""
    with atomic_output(path) as fp:
        fp.write(text.encode("utf-8"))
    return pathlib.Path(path)


@contextlib.contextmanager
def atomic_output(path: Union[str, os.PathLike]):
    """
    Yield a binary file handle whose contents appear at ``path`` only if the
    block completes.
    """
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, temp_name = tempfile.mkstemp(
        prefix=f".{path.name}.", suffix=".tmp", dir=path.parent
    )
    try:
        with os.fdopen(fd, "wb") as fp:
            yield fp
        os.replace(temp_name, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(temp_name)
        raise
    logger.debug("Wrote %s", path)


def write_csv(
    path: Union[str, os.PathLike],
    header: Sequence[str],
    rows: Iterable[Sequence[Any]],
) -> pathlib.Path:
    return atomic_write_text(path, csv_text(header, rows))


def stable_bytes(path: Union[str, os.PathLike]) -> bytes:
    """
    File contents with volatile CSV columns zeroed.

    Non-CSV files are returned unchanged.
    """
    path = pathlib.Path(path)
    raw = path.read_bytes()
    if path.suffix != ".csv":
        return raw

    rows = list(csv.reader(io.StringIO(raw.decode("utf-8"))))
    if not rows:
        return raw
    header = rows[0]
    volatile = [idx for idx, name in enumerate(header) if name in VOLATILE_COLUMNS]
    if not volatile:
        return raw
    for row in rows[1:]:
        for idx in volatile:
            row[idx] = "0"
    return csv_text(header, rows[1:]).encode("utf-8")


def file_digest(path: Union[str, os.PathLike]) -> str:
    return hashlib.sha256(stable_bytes(path)).hexdigest()


def check_output_dir(path: pathlib.Path, overwrite: bool) -> pathlib.Path:
    """
    Refuse to reuse a non-empty output directory unless ``overwrite`` is set.

    Raises
    ------
    FileExistsError
    """
    if path.exists() and any(path.iterdir()) and not overwrite:
        raise FileExistsError(
            f"Output directory {path} is not empty; pass --overwrite to reuse it"
        )
    path.mkdir(parents=True, exist_ok=True)
    return path
