"""Write-once, memory-mapped key-value store in the LMDB file format.

The on-disk layout follows the Lightning Memory-Mapped Database data
format (64-bit, little-endian, data version 1): two alternating meta
pages followed by copy-on-write B+tree pages, with values larger than a
node living in contiguous overflow pages.  A single file holds the
database; a sibling ``<path>-lock`` file serializes writers.

The writer builds the tree bottom-up from the sorted key set and flips a
meta page only after the data pages are on disk, so a reader opened at
any moment sees a complete committed snapshot and never a partial batch.
Once built, stores are immutable; readers memory-map the file and serve
values as zero-copy views.
"""

from __future__ import annotations

import enum
import fcntl
import mmap
import os
import struct
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Optional, Union

import numpy as np

from ..errors import (
    CapacityError,
    DomainError,
    DuplicateKeyError,
    KeyNotFoundError,
    NotAStoreError,
    StoreError,
)
from . import codec

PAGE_SIZE = 4096
PAGE_HDR = 16
NODE_HDR = 8
MAGIC = 0xBEEFC0DE
DATA_VERSION = 1
P_INVALID = 0xFFFF_FFFF_FFFF_FFFF

P_BRANCH = 0x01
P_LEAF = 0x02
P_OVERFLOW = 0x04
P_META = 0x08
F_BIGDATA = 0x01

#: Persisted environment flag for the single-file (no-subdir) layout.
_ENV_FLAGS = 0x4000

#: Longest key accepted by stock builds of the reference C library.
MAX_KEY_BYTES = 511

#: Largest node kept inline in a leaf; bigger values go to overflow pages.
NODE_MAX = ((PAGE_SIZE - PAGE_HDR) // 2 & ~1) - 2

DEFAULT_MAP_SIZE = 1 << 30

_META_STRUCT = struct.Struct("<IIQQ")  # magic, version, fixed address, mapsize
_DB_STRUCT = struct.Struct("<IHH5Q")  # pad, flags, depth, branch/leaf/ovf/entries/root
_TAIL_STRUCT = struct.Struct("<QQ")  # last_pg, txnid
_PAGE_HDR_STRUCT = struct.Struct("<QHHHH")  # pgno, pad, flags, lower, upper
_OVF_HDR_STRUCT = struct.Struct("<QHHI")  # pgno, pad, flags, page count
_NODE_STRUCT = struct.Struct("<HHHH")  # lo, hi, flags, ksize


def _even(n: int) -> int:
    return (n + 1) & ~1


def _ovf_page_count(size: int, psize: int) -> int:
    return (PAGE_HDR - 1 + size) // psize + 1


@dataclass(frozen=True)
class _MainDb:
    depth: int
    branch_pages: int
    leaf_pages: int
    overflow_pages: int
    entries: int
    root: int


@dataclass(frozen=True)
class _Meta:
    psize: int
    map_size: int
    main: _MainDb
    last_pg: int
    txnid: int


def _pack_meta(psize: int, map_size: int, main: _MainDb, last_pg: int, txnid: int) -> bytes:
    free_db = _DB_STRUCT.pack(psize, _ENV_FLAGS, 0, 0, 0, 0, 0, P_INVALID)
    main_db = _DB_STRUCT.pack(
        0, 0, main.depth, main.branch_pages, main.leaf_pages,
        main.overflow_pages, main.entries, main.root,
    )
    return (
        _META_STRUCT.pack(MAGIC, DATA_VERSION, 0, map_size)
        + free_db
        + main_db
        + _TAIL_STRUCT.pack(last_pg, txnid)
    )


def _parse_meta(buf: bytes, offset: int) -> Optional[_Meta]:
    try:
        _pgno, _pad, flags, _lo, _hi = _PAGE_HDR_STRUCT.unpack_from(buf, offset)
        if not flags & P_META:
            return None
        magic, version, _addr, map_size = _META_STRUCT.unpack_from(buf, offset + PAGE_HDR)
        if magic != MAGIC or version != DATA_VERSION:
            return None
        base = offset + PAGE_HDR + _META_STRUCT.size
        psize, _eflags, *_rest = _DB_STRUCT.unpack_from(buf, base)
        depth, branch, leaf, ovf, entries, root = _DB_STRUCT.unpack_from(
            buf, base + _DB_STRUCT.size
        )[2:]
        last_pg, txnid = _TAIL_STRUCT.unpack_from(buf, base + 2 * _DB_STRUCT.size)
    except struct.error:
        return None
    if psize < 512 or psize & (psize - 1):
        return None
    return _Meta(psize, map_size, _MainDb(depth, branch, leaf, ovf, entries, root), last_pg, txnid)


class StoreMode(enum.Enum):
    READ_ONLY = "read_only"
    WRITE_ONCE = "write_once"


@dataclass(frozen=True)
class WriteReport:
    """Summary returned after a store build."""

    entries: int
    total_value_bytes: int
    leaf_pages: int
    branch_pages: int
    overflow_pages: int
    file_bytes: int
    path: str

    def to_dict(self) -> dict:
        return {
            "entries": self.entries,
            "total_value_bytes": self.total_value_bytes,
            "leaf_pages": self.leaf_pages,
            "branch_pages": self.branch_pages,
            "overflow_pages": self.overflow_pages,
            "file_bytes": self.file_bytes,
            "path": self.path,
        }


class StoreWriter:
    """Exclusive builder for a new store file.

    Entries may arrive in any order; keys are sorted at commit time.
    ``flush`` commits a consistent snapshot (alternating meta pages, data
    synced first); ``close`` commits once more if needed and releases the
    writer lock.  With ``batch_size`` set, a commit happens automatically
    every that many puts.
    """

    def __init__(
        self,
        path: Union[str, Path],
        *,
        map_size: int = DEFAULT_MAP_SIZE,
        batch_size: Optional[int] = None,
    ):
        self._path = Path(path)
        self._psize = PAGE_SIZE
        if map_size < 4 * self._psize:
            raise DomainError(f"map size {map_size} is too small for two meta pages")
        self._map_size = map_size
        self._batch_size = batch_size
        if self._path.exists() and self._path.stat().st_size > 0:
            raise StoreError(f"{self._path} already exists; stores are write-once")
        self._lock_file = open(self._path.with_name(self._path.name + "-lock"), "wb")
        try:
            fcntl.flock(self._lock_file, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError as exc:
            self._lock_file.close()
            raise StoreError(f"{self._path} is locked by another writer") from exc
        self._file = open(self._path, "w+b")
        self._keys: set[bytes] = set()
        # (key, inline value bytes or None, overflow pgno, value length)
        self._entries: list[tuple[bytes, Optional[bytes], int, int]] = []
        self._next_pgno = 2
        self._overflow_pages = 0
        self._total_value_bytes = 0
        self._txnid = 0
        self._dirty = True
        self._closed = False
        self._report: Optional[WriteReport] = None
        empty = _MainDb(0, 0, 0, 0, 0, P_INVALID)
        for pgno in (0, 1):
            self._write_page(
                pgno,
                _PAGE_HDR_STRUCT.pack(pgno, 0, P_META, 0, 0)
                + _pack_meta(self._psize, self._map_size, empty, 1, 0),
            )

    def _write_page(self, pgno: int, data: bytes) -> None:
        assert len(data) <= self._psize
        self._file.seek(pgno * self._psize)
        self._file.write(data)
        if len(data) < self._psize:
            self._file.write(b"\x00" * (self._psize - len(data)))

    def _alloc(self, count: int) -> int:
        if (self._next_pgno + count) * self._psize > self._map_size:
            raise CapacityError(
                f"store would exceed map_size={self._map_size} bytes;"
                f" raise it or split the dataset"
            )
        pgno = self._next_pgno
        self._next_pgno += count
        return pgno

    def put(self, key: Union[str, bytes], value: Union[bytes, bytearray, memoryview]) -> None:
        """Queue one key-value pair; the value is written out immediately
        when it needs overflow pages."""
        if self._closed:
            raise StoreError("writer is closed")
        kb = key.encode("utf-8") if isinstance(key, str) else bytes(key)
        if not 0 < len(kb) <= MAX_KEY_BYTES:
            raise DomainError(f"key length must be in [1, {MAX_KEY_BYTES}]: {key!r}")
        if kb in self._keys:
            raise DuplicateKeyError(f"duplicate key {key!r}")
        vb = bytes(value)
        if len(vb) >= 1 << 32:
            raise DomainError(f"value for {key!r} exceeds the 4 GiB format limit")
        self._keys.add(kb)
        self._total_value_bytes += len(vb)
        if NODE_HDR + len(kb) + len(vb) > NODE_MAX:
            count = _ovf_page_count(len(vb), self._psize)
            pgno = self._alloc(count)
            header = _OVF_HDR_STRUCT.pack(pgno, 0, P_OVERFLOW, count)
            self._file.seek(pgno * self._psize)
            self._file.write(header)
            self._file.write(vb)
            tail = count * self._psize - PAGE_HDR - len(vb)
            if tail:
                self._file.write(b"\x00" * tail)
            self._overflow_pages += count
            self._entries.append((kb, None, pgno, len(vb)))
        else:
            self._entries.append((kb, vb, 0, len(vb)))
        self._dirty = True
        if self._batch_size and len(self._entries) % self._batch_size == 0:
            self.flush()

    def _leaf_node(self, key: bytes, inline: Optional[bytes], ovpgno: int, vlen: int) -> bytes:
        head = _NODE_STRUCT.pack(
            vlen & 0xFFFF, vlen >> 16, 0 if inline is not None else F_BIGDATA, len(key)
        )
        if inline is not None:
            return head + key + inline
        return head + key + struct.pack("<Q", ovpgno)

    def _pack_page(self, pgno: int, flags: int, nodes: list[bytes]) -> bytes:
        buf = bytearray(self._psize)
        upper = self._psize
        ptrs = []
        for node in nodes:
            upper -= _even(len(node))
            buf[upper : upper + len(node)] = node
            ptrs.append(upper)
        lower = PAGE_HDR + 2 * len(nodes)
        assert lower <= upper
        _PAGE_HDR_STRUCT.pack_into(buf, 0, pgno, 0, flags, lower, upper)
        struct.pack_into(f"<{len(ptrs)}H", buf, PAGE_HDR, *ptrs)
        return bytes(buf)

    def _build_level(
        self, flags: int, nodes: Iterable[tuple[bytes, bytes]]
    ) -> list[tuple[bytes, int]]:
        """Pack (first_key, node_bytes) pairs into pages, returning one
        (first_key, pgno) per page."""
        pages = []
        cur: list[bytes] = []
        cur_first: Optional[bytes] = None
        used = PAGE_HDR
        for first_key, node in nodes:
            need = 2 + _even(len(node))
            if cur and used + need > self._psize:
                pgno = self._alloc(1)
                self._write_page(pgno, self._pack_page(pgno, flags, cur))
                pages.append((cur_first, pgno))
                cur, used = [], PAGE_HDR
            if not cur:
                cur_first = first_key
            cur.append(node)
            used += need
        if cur:
            pgno = self._alloc(1)
            self._write_page(pgno, self._pack_page(pgno, flags, cur))
            pages.append((cur_first, pgno))
        return pages

    def _branch_node(self, key: bytes, child: int, is_first: bool) -> bytes:
        head = _NODE_STRUCT.pack(
            child & 0xFFFF, (child >> 16) & 0xFFFF, (child >> 32) & 0xFFFF,
            0 if is_first else len(key),
        )
        return head if is_first else head + key

    def flush(self) -> None:
        """Commit all entries written so far as one consistent snapshot."""
        if self._closed:
            raise StoreError("writer is closed")
        if not self._dirty:
            return
        ordered = sorted(self._entries, key=lambda e: e[0])
        leaf_nodes = (
            (key, self._leaf_node(key, inline, ovpgno, vlen))
            for key, inline, ovpgno, vlen in ordered
        )
        level = self._build_level(P_LEAF, leaf_nodes) if ordered else []
        leaf_pages = len(level)
        branch_pages = 0
        depth = 1 if level else 0
        while len(level) > 1:
            level = self._build_branch_level(level)
            branch_pages += len(level)
            depth += 1
        root = level[0][1] if level else P_INVALID
        main = _MainDb(
            depth, branch_pages, leaf_pages, self._overflow_pages, len(ordered), root
        )
        self._file.flush()
        os.fsync(self._file.fileno())
        self._txnid += 1
        meta_pgno = self._txnid & 1
        self._write_page(
            meta_pgno,
            _PAGE_HDR_STRUCT.pack(meta_pgno, 0, P_META, 0, 0)
            + _pack_meta(self._psize, self._map_size, main, self._next_pgno - 1, self._txnid),
        )
        self._file.flush()
        os.fsync(self._file.fileno())
        self._last_main = main
        self._dirty = False

    def _build_branch_level(self, children: list[tuple[bytes, int]]) -> list[tuple[bytes, int]]:
        """One branch level over (first_key, pgno) children, page-packed."""
        pages = []
        cur: list[bytes] = []
        cur_first: Optional[bytes] = None
        used = PAGE_HDR
        for first_key, child in children:
            node = self._branch_node(first_key, child, is_first=not cur)
            need = 2 + _even(len(node))
            if cur and used + need > self._psize:
                pgno = self._alloc(1)
                self._write_page(pgno, self._pack_page(pgno, P_BRANCH, cur))
                pages.append((cur_first, pgno))
                cur, used = [], PAGE_HDR
                node = self._branch_node(first_key, child, is_first=True)
                need = 2 + _even(len(node))
            if not cur:
                cur_first = first_key
            cur.append(node)
            used += need
        if cur:
            pgno = self._alloc(1)
            self._write_page(pgno, self._pack_page(pgno, P_BRANCH, cur))
            pages.append((cur_first, pgno))
        return pages

    def close(self) -> WriteReport:
        if self._closed:
            assert self._report is not None
            return self._report
        self.flush()
        main = self._last_main
        file_bytes = self._file.seek(0, os.SEEK_END)
        self._file.close()
        fcntl.flock(self._lock_file, fcntl.LOCK_UN)
        self._lock_file.close()
        self._closed = True
        self._report = WriteReport(
            entries=main.entries,
            total_value_bytes=self._total_value_bytes,
            leaf_pages=main.leaf_pages,
            branch_pages=main.branch_pages,
            overflow_pages=main.overflow_pages,
            file_bytes=file_bytes,
            path=str(self._path),
        )
        return self._report

    def __enter__(self) -> "StoreWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.close()
        else:  # leave a clean lock even on failure
            try:
                self._file.close()
            finally:
                fcntl.flock(self._lock_file, fcntl.LOCK_UN)
                self._lock_file.close()
                self._closed = True


class StoreReader:
    """Memory-mapped snapshot view of a committed store.

    Lookups descend the B+tree: branch pages are parsed once and cached
    (they are a small fraction of the file), leaf pages are binary
    searched in place.  Values come back as zero-copy views into the map,
    valid until ``close``.
    """

    def __init__(self, path: Union[str, Path]):
        self._path = Path(path)
        try:
            self._file = open(self._path, "rb")
        except OSError as exc:
            raise NotAStoreError(f"cannot open {path}: {exc}") from exc
        size = self._file.seek(0, os.SEEK_END)
        if size == 0:
            self._file.close()
            raise NotAStoreError(f"{path} is empty")
        self._mm = mmap.mmap(self._file.fileno(), 0, prot=mmap.PROT_READ)
        self._view = memoryview(self._mm)
        self._branch_cache: dict[int, tuple[list[bytes], list[int]]] = {}
        head = self._mm[: min(size, 8 * PAGE_SIZE)]
        meta0 = _parse_meta(head, 0)
        psize_guess = meta0.psize if meta0 else PAGE_SIZE
        meta1 = _parse_meta(head, psize_guess) if size >= 2 * psize_guess else None
        candidates = [m for m in (meta0, meta1) if m is not None]
        if not candidates:
            self.close()
            raise NotAStoreError(f"{path} does not carry a valid store header")
        meta = max(candidates, key=lambda m: m.txnid)
        self._psize = meta.psize
        self._meta = meta
        self._n_pages = size // self._psize
        root = meta.main.root
        if root != P_INVALID and root >= self._n_pages:
            self.close()
            raise NotAStoreError(f"{path} root page {root} outside the file")
        self._leaf_cache: dict[int, tuple[list[bytes], list[tuple[int, int]]]] = {}

    @property
    def path(self) -> Path:
        return self._path

    def __len__(self) -> int:
        return self._meta.main.entries

    def stat(self) -> dict:
        m = self._meta
        return {
            "psize": m.psize,
            "map_size": m.map_size,
            "depth": m.main.depth,
            "branch_pages": m.main.branch_pages,
            "leaf_pages": m.main.leaf_pages,
            "overflow_pages": m.main.overflow_pages,
            "entries": m.main.entries,
            "last_pgno": m.last_pg,
            "txnid": m.txnid,
        }

    def _page_flags(self, pgno: int) -> int:
        if pgno >= self._n_pages:
            raise NotAStoreError(f"page {pgno} outside the store file")
        return _PAGE_HDR_STRUCT.unpack_from(self._mm, pgno * self._psize)[2]

    def _parse_branch(self, pgno: int) -> tuple[list[bytes], list[int]]:
        cached = self._branch_cache.get(pgno)
        if cached is not None:
            return cached
        base = pgno * self._psize
        _pg, _pad, flags, lower, _upper = _PAGE_HDR_STRUCT.unpack_from(self._mm, base)
        if not flags & P_BRANCH:
            raise NotAStoreError(f"page {pgno} is not a branch page")
        n = (lower - PAGE_HDR) >> 1
        ptrs = struct.unpack_from(f"<{n}H", self._mm, base + PAGE_HDR)
        separators: list[bytes] = []
        children: list[int] = []
        for i, ptr in enumerate(ptrs):
            off = base + ptr
            lo, hi, fl, ksize = _NODE_STRUCT.unpack_from(self._mm, off)
            children.append(lo | hi << 16 | fl << 32)
            if i:
                separators.append(self._mm[off + NODE_HDR : off + NODE_HDR + ksize])
        parsed = (separators, children)
        self._branch_cache[pgno] = parsed
        return parsed

    def _value_span(self, off: int, dsize: int, nflags: int, ksize: int) -> tuple[int, int]:
        """Absolute byte span of one node's value, resolving overflow chains."""
        data_off = off + NODE_HDR + ksize
        if nflags & F_BIGDATA:
            (ovpgno,) = struct.unpack_from("<Q", self._mm, data_off)
            ovbase = ovpgno * self._psize
            _pg, _pad, oflags, count = _OVF_HDR_STRUCT.unpack_from(self._mm, ovbase)
            if not oflags & P_OVERFLOW or count * self._psize < PAGE_HDR + dsize:
                raise NotAStoreError(f"corrupt overflow chain at page {ovpgno}")
            return ovbase + PAGE_HDR, ovbase + PAGE_HDR + dsize
        return data_off, data_off + dsize

    def _parse_leaf(self, pgno: int) -> tuple[list[bytes], list[tuple[int, int]]]:
        """Keys and value spans of a leaf page, memoized.

        Leaf pages are a small fraction of a store dominated by tensor
        payloads, so caching them turns repeated lookups into a bisect.
        """
        cached = self._leaf_cache.get(pgno)
        if cached is not None:
            return cached
        mm = self._mm
        base = pgno * self._psize
        _pg, _pad, flags, lower, _upper = _PAGE_HDR_STRUCT.unpack_from(mm, base)
        if not flags & P_LEAF:
            raise NotAStoreError(f"page {pgno} is not a leaf page")
        n = (lower - PAGE_HDR) >> 1
        ptrs = struct.unpack_from(f"<{n}H", mm, base + PAGE_HDR)
        keys: list[bytes] = []
        spans: list[tuple[int, int]] = []
        for ptr in ptrs:
            off = base + ptr
            dlo, dhi, nflags, ksize = _NODE_STRUCT.unpack_from(mm, off)
            keys.append(mm[off + NODE_HDR : off + NODE_HDR + ksize])
            spans.append(self._value_span(off, dlo | dhi << 16, nflags, ksize))
        parsed = (keys, spans)
        if len(self._leaf_cache) >= 16384:
            self._leaf_cache.clear()
        self._leaf_cache[pgno] = parsed
        return parsed

    def get(self, key: Union[str, bytes]) -> memoryview:
        """Raw value bytes for a key, as a view into the mapped file."""
        kb = key.encode("utf-8") if isinstance(key, str) else bytes(key)
        meta = self._meta.main
        if meta.root == P_INVALID:
            raise KeyNotFoundError(f"key not found: {key!r}")
        pgno = meta.root
        for _ in range(meta.depth - 1):
            separators, children = self._parse_branch(pgno)
            pgno = children[bisect_right(separators, kb)]
        keys, spans = self._parse_leaf(pgno)
        i = bisect_left(keys, kb)
        if i == len(keys) or keys[i] != kb:
            raise KeyNotFoundError(f"key not found: {key!r}")
        start, end = spans[i]
        return self._view[start:end]

    def __contains__(self, key: Union[str, bytes]) -> bool:
        try:
            self.get(key)
            return True
        except KeyNotFoundError:
            return False

    def _iter_page(self, pgno: int) -> Iterator[tuple[bytes, memoryview]]:
        base = pgno * self._psize
        flags = _PAGE_HDR_STRUCT.unpack_from(self._mm, base)[2]
        if flags & P_BRANCH:
            _, children = self._parse_branch(pgno)
            for child in children:
                yield from self._iter_page(child)
            return
        if not flags & P_LEAF:
            raise NotAStoreError(f"page {pgno} is neither branch nor leaf")
        keys, spans = self._parse_leaf(pgno)
        for key, (start, end) in zip(keys, spans):
            yield key, self._view[start:end]

    def items(self) -> Iterator[tuple[str, memoryview]]:
        """All entries in lexicographic key order."""
        if self._meta.main.root == P_INVALID:
            return
        for key, value in self._iter_page(self._meta.main.root):
            yield key.decode("utf-8"), value

    def keys(self) -> Iterator[str]:
        for key, _value in self.items():
            yield key

    def close(self) -> None:
        self._branch_cache.clear()
        try:
            self._view.release()
        except ValueError:
            pass
        try:
            self._mm.close()
        except BufferError:
            pass  # value views are still alive; the map frees when they die
        self._file.close()

    def __enter__(self) -> "StoreReader":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()


@dataclass
class StoreHandle:
    """Reference to a store file plus the access mode and map size."""

    path: Union[str, Path]
    mode: StoreMode = StoreMode.READ_ONLY
    map_size: int = DEFAULT_MAP_SIZE
    _reader: Optional[StoreReader] = field(default=None, repr=False, compare=False)

    def reader(self) -> StoreReader:
        if self.mode is not StoreMode.READ_ONLY:
            raise StoreError("handle is not read-only")
        if self._reader is None:
            self._reader = StoreReader(self.path)
        return self._reader

    def close(self) -> None:
        if self._reader is not None:
            self._reader.close()
            self._reader = None

    def __enter__(self) -> "StoreHandle":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()


def write_store(
    entries: Iterable[tuple[str, codec.TensorMapping]],
    handle: StoreHandle,
    *,
    batch_size: Optional[int] = None,
) -> WriteReport:
    """Encode records and build the store named by a write-once handle."""
    if handle.mode is not StoreMode.WRITE_ONCE:
        raise StoreError("write_store requires a WRITE_ONCE handle")
    with StoreWriter(handle.path, map_size=handle.map_size, batch_size=batch_size) as writer:
        for key, record in entries:
            writer.put(key, codec.encode_record(record))
        return writer.close()


def read_record(handle: StoreHandle, key: Union[str, bytes]) -> dict[str, np.ndarray]:
    """Decode the record stored under a key via a read-only handle."""
    return codec.decode_record(handle.reader().get(key))
