"""PLY reading and writing on top of ``plyfile``.

Elements are exchanged as :class:`PlyElement` records holding one numpy
array per property, so callers never touch plyfile types.  Every parse
failure surfaces as :class:`FormatError`.
"""
from __future__ import annotations

import io
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import plyfile

from .errors import FormatError, MissingFile


@dataclass
class PlyElement:
    name: str
    count: int
    properties: List[tuple] = field(default_factory=list)  # (name, dtype)
    list_property: Optional[tuple] = None  # (name, count dtype, item dtype)
    data: Dict[str, np.ndarray] = field(default_factory=dict)


def _stack_rows(rows):
    """Equal-length index lists as an (n, k) int64 array, ragged ones as a list."""
    if len(rows) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    if all(len(r) == len(rows[0]) for r in rows):
        return np.array([np.asarray(r) for r in rows], dtype=np.int64).reshape(len(rows), len(rows[0]))
    return [np.asarray(r, dtype=np.int64) for r in rows]


def _code(dtype) -> str:
    """Byte-order-free numpy type code such as ``f4``."""
    return np.dtype(dtype).str[1:]


def _from_plyfile(el) -> PlyElement:
    out = PlyElement(el.name, el.count)
    for prop in el.properties:
        if isinstance(prop, plyfile.PlyListProperty):
            if out.list_property is not None:
                raise FormatError(f"PLY element {el.name!r} has more than one list property")
            out.list_property = (prop.name, _code(prop.len_dtype), _code(prop.val_dtype))
            out.data[prop.name] = _stack_rows(el.data[prop.name])
        else:
            code = _code(prop.val_dtype)
            out.properties.append((prop.name, code))
            out.data[prop.name] = np.ascontiguousarray(el.data[prop.name]).astype(code)
    return out


def read_ply(source) -> Dict[str, PlyElement]:
    """Elements of a PLY file (path, bytes or binary stream), keyed by name."""
    if isinstance(source, (str, os.PathLike)):
        path = Path(source)
        if not path.exists():
            raise MissingFile(f"{path} does not exist")
        raw = path.read_bytes()
    elif isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
    else:
        raw = source.read()
    try:
        with warnings.catch_warnings(), np.errstate(over="raise", invalid="raise"):
            # numpy warns on empty ascii rows; plyfile reports them as parse errors anyway
            warnings.simplefilter("ignore", UserWarning)
            data = plyfile.PlyData.read(io.BytesIO(raw))
        return {el.name: _from_plyfile(el) for el in data.elements}
    except FormatError:
        raise
    except (plyfile.PlyParseError, ValueError, TypeError, IndexError, KeyError, OverflowError,
            FloatingPointError, struct.error, UnicodeDecodeError, MemoryError) as exc:
        raise FormatError(f"malformed PLY: {exc}") from None


def _to_plyfile(el: PlyElement):
    fields = [(n, "<" + np.dtype(t).str[1:]) for n, t in el.properties]
    len_types, val_types = {}, {}
    if el.list_property is not None:
        name, count_t, item_t = el.list_property
        lists = np.asarray(el.data[name])
        width = lists.shape[1] if lists.ndim == 2 else 0
        fields.append((name, "<" + np.dtype(item_t).str[1:], (width,)))
        len_types[name] = np.dtype(count_t).str[1:]
        val_types[name] = np.dtype(item_t).str[1:]
    arr = np.empty(el.count, dtype=np.dtype(fields))
    for n, _ in el.properties:
        arr[n] = el.data[n]
    if el.list_property is not None and el.count:
        arr[el.list_property[0]] = lists
    return plyfile.PlyElement.describe(arr, el.name, len_types=len_types, val_types=val_types)


def write_ply(sink, elements: List[PlyElement], binary: bool = True, comments=()) -> Optional[bytes]:
    """Write little-endian binary or ascii PLY; returns bytes when ``sink`` is None."""
    ply = plyfile.PlyData([_to_plyfile(el) for el in elements], text=not binary, byte_order="<",
                          comments=list(comments))
    buf = io.BytesIO()
    ply.write(buf)
    data = buf.getvalue()
    if sink is None:
        return data
    if isinstance(sink, (str, os.PathLike)):
        Path(sink).write_bytes(data)
    else:
        sink.write(data)
    return None
