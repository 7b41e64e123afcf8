"""File formats: the binary array container and the plain-text lists.

Binary container layout (all integers little-endian)::

    magic      8 bytes   b"SVKIT\\x00\\x00\\x01"
    version    uint32    FORMAT_VERSION
    header     uint32 length + UTF-8 text (key=value lines, may be empty)
    count      uint32    number of records
    record*    uint32 name length, UTF-8 name,
               uint8 dtype tag, uint32 rank, uint64 dims[rank],
               raw little-endian values in row-major order

Feature and embedding archives are containers paired with a text index
(``<name> <byte offset of record>`` per line) for random access.
"""

import os
import struct
from pathlib import Path

import numpy as np

from .exceptions import FormatError, MissingInputError

MAGIC = b"SVKIT\x00\x00\x01"
FORMAT_VERSION = 1

_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_KIND_TAG = {("f", 8): 0, ("f", 4): 1, ("i", 8): 2, ("u", 1): 3, ("b", 1): 3}


def _tag(array):
    try:
        return _KIND_TAG[array.dtype.kind, array.dtype.itemsize]
    except KeyError:
        raise FormatError(f"unsupported dtype {array.dtype}") from None


def format_header(fields):
    return "".join(f"{k}={v}\n" for k, v in fields.items())


def parse_header(text):
    fields = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"bad header line {line!r}")
        fields[key.strip()] = value.strip()
    return fields


def _write_record(fh, name, array):
    array = np.asarray(array)
    tag = _tag(array)
    raw_name = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw_name)))
    fh.write(raw_name)
    fh.write(struct.pack("<BI", tag, array.ndim))
    fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype=_TAGS[tag]).tobytes())


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated container")
    return buf


def _read_record(fh):
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, n).decode("utf-8")
    tag, rank = struct.unpack("<BI", _read_exact(fh, 5))
    if tag not in _TAGS:
        raise FormatError(f"unknown dtype tag {tag} in record {name!r}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    dtype = _TAGS[tag]
    count = int(np.prod(dims, dtype=np.int64))
    array = np.frombuffer(_read_exact(fh, count * dtype.itemsize), dtype=dtype).reshape(dims)
    if tag == 3:
        return name, array.copy()
    return name, array.astype(dtype.newbyteorder("="))


class ContainerWriter:
    """Streams records into a container; the record count is patched on close."""

    def __init__(self, path, header=None):
        self.path = Path(path)
        self._fh = open(self.path, "wb")
        self._fh.write(MAGIC)
        self._fh.write(struct.pack("<I", FORMAT_VERSION))
        raw = (header or "").encode("utf-8")
        self._fh.write(struct.pack("<I", len(raw)))
        self._fh.write(raw)
        self._count_at = self._fh.tell()
        self._fh.write(struct.pack("<I", 0))
        self.count = 0
        self.offsets = {}

    def write(self, name, array):
        if name in self.offsets:
            raise FormatError(f"duplicate record name {name!r}")
        self.offsets[name] = self._fh.tell()
        _write_record(self._fh, name, array)
        self.count += 1

    def close(self):
        if self._fh.closed:
            return
        self._fh.seek(self._count_at)
        self._fh.write(struct.pack("<I", self.count))
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _open_checked(path):
    if not os.path.exists(path):
        raise MissingInputError(f"no such file: {path}")
    fh = open(path, "rb")
    if fh.read(len(MAGIC)) != MAGIC:
        fh.close()
        raise FormatError(f"{path} is not an svkit container")
    (version,) = struct.unpack("<I", _read_exact(fh, 4))
    if version != FORMAT_VERSION:
        fh.close()
        raise FormatError(f"{path}: unsupported format version {version}")
    return fh


def write_container(path, arrays, header=None):
    """Write ``arrays`` (name -> ndarray, insertion ordered) to ``path``."""
    if isinstance(header, dict):
        header = format_header(header)
    with ContainerWriter(path, header) as writer:
        for name, array in arrays.items():
            writer.write(name, array)
        return dict(writer.offsets)


def read_container(path):
    """Return ``(header_fields, arrays)`` from a container file."""
    with _open_checked(path) as fh:
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        header = parse_header(_read_exact(fh, n).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays = {}
        for _ in range(count):
            name, array = _read_record(fh)
            arrays[name] = array
    return header, arrays


def read_record_at(path, offset):
    with _open_checked(path) as fh:
        fh.seek(offset)
        return _read_record(fh)


# ---------------------------------------------------------------- archives

def write_archive(stem, arrays, header=None):
    """Write ``<stem>.ark`` plus the text index ``<stem>.idx``."""
    stem = str(stem)
    offsets = write_container(stem + ".ark", arrays, header)
    with open(stem + ".idx", "w") as fh:
        for name, offset in offsets.items():
            fh.write(f"{name} {offset}\n")


def read_index(stem):
    path = str(stem) + ".idx"
    if not os.path.exists(path):
        raise MissingInputError(f"no such file: {path}")
    index = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                name, offset = line.split()
                index[name] = int(offset)
    return index


def read_archive(stem, names=None):
    """Read an archive, optionally only the records listed in ``names``."""
    if names is None:
        return read_container(str(stem) + ".ark")[1]
    index = read_index(stem)
    out = {}
    for name in names:
        if name not in index:
            raise MissingInputError(f"record {name!r} not in {stem}.idx")
        out[name] = read_record_at(str(stem) + ".ark", index[name])[1]
    return out


# ---------------------------------------------------------------- text lists

def write_manifest(path, records):
    """``records`` are (utterance_id, speaker_id, split, path) tuples."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(" ".join(str(f) for f in rec) + "\n")


def read_manifest(path):
    return [tuple(fields) for fields in _read_fields(path, 4)]


def write_trials(path, trials):
    with open(path, "w") as fh:
        for enroll, test, target in trials:
            fh.write(f"{enroll} {test} {'target' if target else 'nontarget'}\n")


def read_trials(path):
    out = []
    for enroll, test, label in _read_fields(path, 3):
        if label not in ("target", "nontarget"):
            raise FormatError(f"{path}: bad trial label {label!r}")
        out.append((enroll, test, label == "target"))
    return out


def write_scores(path, records):
    """``records`` are (enroll, test, score, is_target) tuples."""
    with open(path, "w") as fh:
        for enroll, test, score, target in records:
            fh.write(f"{enroll} {test} {score!r} {'target' if target else 'nontarget'}\n")


def read_scores(path):
    out = []
    for enroll, test, score, label in _read_fields(path, 4):
        if label not in ("target", "nontarget"):
            raise FormatError(f"{path}: bad score label {label!r}")
        try:
            value = float(score)
        except ValueError:
            raise FormatError(f"{path}: score {score!r} is not a number") from None
        out.append((enroll, test, value, label == "target"))
    return out


def _read_fields(path, n):
    if not os.path.exists(path):
        raise MissingInputError(f"no such file: {path}")
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != n:
                raise FormatError(f"{path}:{lineno}: expected {n} fields, got {len(fields)}")
            yield fields
