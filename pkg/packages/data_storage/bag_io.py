"""
Bag persistence in the MBAG container format.

Layout (little-endian throughout):
    b"MBAG", u32 version, u32 R, u32 D_in, u32 N, u32 label,
    u16 slide_id length, slide_id UTF-8 bytes,
    then N records of u8 level, u8 path length, u16 path indices,
    u16 row, u16 col, D_in x f32 features.
"""

import logging
import os
import struct
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from packages.helpers.errors import BagFormatError, ContractError, DataIOError, DimensionError, StructureError
from packages.hierarchy.patch_hierarchy import PatchHierarchy, build_hierarchy

logger = logging.getLogger("BagIO")

MAGIC = b"MBAG"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4s5I")
_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U16_MAX = 0xFFFF


@dataclass
class BagRecord:
    level: int
    path: Tuple[int, ...]
    coord: Tuple[int, int]
    features: np.ndarray

    def __eq__(self, other) -> bool:
        if not isinstance(other, BagRecord):
            return NotImplemented
        return (self.level == other.level and tuple(self.path) == tuple(other.path)
                and tuple(self.coord) == tuple(other.coord)
                and self.features.dtype == other.features.dtype
                and np.array_equal(self.features, other.features))


@dataclass
class Bag:
    slide_id: str
    label: int
    n_levels: int
    records: List[BagRecord] = field(default_factory=list)

    @property
    def d_in(self) -> int:
        return int(self.records[0].features.shape[0]) if self.records else 0

    def __len__(self) -> int:
        return len(self.records)

    def features(self) -> np.ndarray:
        """[N, D_in] float32, one row per record in record order."""
        if not self.records:
            return np.zeros((0, 0), dtype=np.float32)
        return np.stack([r.features for r in self.records]).astype(np.float32, copy=False)

    def hierarchy(self) -> PatchHierarchy:
        """Patch tree whose token ids are record indices."""
        return build_hierarchy(
            ((r.level, r.path, r.coord, i) for i, r in enumerate(self.records)), self.n_levels
        )


def record_size(path_length: int, d_in: int) -> int:
    return 2 + 2 * path_length + 4 + 4 * d_in


def header_size(slide_id: str) -> int:
    return _HEADER.size + _U16.size + len(slide_id.encode("utf-8"))


def _check_encodable(bag: Bag) -> None:
    if not bag.records:
        raise ContractError(f"bag {bag.slide_id} has no records")
    if bag.label < 0:
        raise ContractError(f"bag {bag.slide_id} has negative label {bag.label}")
    if len(bag.slide_id.encode("utf-8")) > _U16_MAX:
        raise ContractError(f"slide id of bag {bag.slide_id[:32]}... is too long")
    d_in = bag.d_in
    for record in bag.records:
        if record.features.shape != (d_in,):
            raise DimensionError(f"bag {bag.slide_id}: record {record.path} has {record.features.shape} "
                                 f"features, expected ({d_in},)")
        if not 0 <= record.level <= 255 or len(record.path) > 255:
            raise ContractError(f"bag {bag.slide_id}: record {record.path} does not fit a u8 level/path length")
        if any(not 0 <= int(v) <= _U16_MAX for v in (*record.path, *record.coord)):
            raise ContractError(f"bag {bag.slide_id}: record {record.path} at {record.coord} exceeds u16 range")


def encode_bag(bag: Bag) -> bytes:
    _check_encodable(bag)
    slide_bytes = bag.slide_id.encode("utf-8")
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, bag.n_levels, bag.d_in, len(bag.records), bag.label),
        _U16.pack(len(slide_bytes)),
        slide_bytes,
    ]
    for record in bag.records:
        path = tuple(int(p) for p in record.path)
        parts.append(struct.pack(f"<BB{len(path)}HHH", record.level, len(path), *path,
                                 int(record.coord[0]), int(record.coord[1])))
        parts.append(np.asarray(record.features, dtype="<f4").tobytes())
    return b"".join(parts)


def _unpack(fmt: struct.Struct, data: bytes, offset: int, what: str):
    if offset + fmt.size > len(data):
        raise BagFormatError(f"truncated {what}: need {fmt.size} bytes, {len(data) - offset} left", offset)
    return fmt.unpack_from(data, offset), offset + fmt.size


def decode_bag(data: bytes) -> Bag:
    """
    Parse MBAG bytes.

    Raises:
        BagFormatError: Bad magic or version, truncation, trailing bytes,
            non-finite features, zero records
            or records that do not form a hierarchy
    """
    (magic, version, n_levels, d_in, n_tokens, label), offset = _unpack(_HEADER, data, 0, "header")
    if magic != MAGIC:
        raise BagFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != FORMAT_VERSION:
        raise BagFormatError(f"unsupported bag format version {version}, expected {FORMAT_VERSION}", 4)
    if n_tokens == 0:
        raise BagFormatError("bag declares zero records", 16)
    (id_length,), offset = _unpack(_U16, data, offset, "slide id length")
    if offset + id_length > len(data):
        raise BagFormatError("truncated slide id", offset)
    try:
        slide_id = data[offset:offset + id_length].decode("utf-8")
    except UnicodeDecodeError as e:
        raise BagFormatError(f"slide id is not valid UTF-8: {e}", offset) from e
    offset += id_length

    feature_bytes = 4 * d_in
    records = []
    for _ in range(n_tokens):
        record_start = offset
        (level, path_length), offset = _unpack(struct.Struct("<BB"), data, offset, "record prefix")
        coords_fmt = struct.Struct(f"<{path_length}HHH")
        values, offset = _unpack(coords_fmt, data, offset, "record path")
        if offset + feature_bytes > len(data):
            raise BagFormatError(f"truncated features of record {len(records)}", offset)
        features = np.frombuffer(data, dtype="<f4", count=d_in, offset=offset).astype(np.float32)
        if not np.all(np.isfinite(features)):
            raise BagFormatError(f"non-finite features in record {len(records)}", offset)
        offset += feature_bytes
        records.append(BagRecord(level=level, path=tuple(values[:path_length]),
                                 coord=(values[path_length], values[path_length + 1]), features=features))
        logger.debug(f"record {len(records) - 1} at offset {record_start}: level {level} path {values[:path_length]}")
    if offset != len(data):
        raise BagFormatError(f"{len(data) - offset} trailing bytes after {n_tokens} records", offset)

    bag = Bag(slide_id=slide_id, label=label, n_levels=n_levels, records=records)
    try:
        bag.hierarchy()
    except StructureError as e:
        raise BagFormatError(f"invalid hierarchy in bag {slide_id}: {e}", _HEADER.size) from e
    return bag


def write_bag(bag: Bag, path: str) -> None:
    data = encode_bag(bag)
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "wb") as f:
            f.write(data)
    except OSError as e:
        logger.error(f"Could not write bag {bag.slide_id} to {path}: {e}")
        raise DataIOError(f"could not write bag {bag.slide_id} to {path}: {e}") from e
    logger.debug(f"Wrote bag {bag.slide_id} ({len(bag.records)} tokens, {len(data)} bytes) to {path}")


def read_bag(path: str) -> Bag:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        logger.error(f"Could not read bag file {path}: {e}")
        raise DataIOError(f"could not read bag file {path}: {e}") from e
    try:
        return decode_bag(data)
    except BagFormatError as e:
        logger.error(f"Malformed bag file {path}: {e}")
        raise
