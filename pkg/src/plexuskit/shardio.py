"""2D shard files and their JSON manifest.

A ``p x q`` sharding writes one binary file per block ``(i, j)``. Each file
holds, with block-local indices:

* ``a_even`` / ``a_odd``: rows ``row_bounds[i]`` x cols ``col_bounds[j]`` of
  both permuted adjacency variants (CSR)
* ``features``: rows ``row_bounds[i]`` x feature cols ``feature_bounds[j]``
* ``labels_row`` / ``labels_col`` / ``mask_row`` / ``mask_col``: piece
  ``i*q + j`` of the node vectors in both permutation orders

Binary layout, little-endian::

    file    := "PLXS" u32 version u8 precision(4|8) u32 nsections section*
    section := u16 namelen name u8 kind u64 rows u64 cols u64 nnz payload
    CSR     := u64 row_ptr[rows+1]  u32 col_idx[nnz]  float values[nnz]
    DENSE   := float values[rows*cols]
    INT     := i64 values[rows]
    BOOL    := u8 values[rows]

The manifest records per-file SHA-256 and per-section offsets with CRC32 so
a loader can read just the sections it needs and still verify them.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph_prep import RNG_NAME, PreparedGraph
from .layout import chunk_bounds, sub_bounds
from .tensor_core import CsrMatrix, csr_block, csr_from_coo

MAGIC = b"PLXS"
VERSION = 1
KIND_CSR, KIND_DENSE, KIND_INT, KIND_BOOL = 1, 2, 3, 4
PRECISION_TAGS = {4: "f32", 8: "f64"}
FLOAT_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
MANIFEST_NAME = "manifest.json"


class ShardError(Exception):
    code = "shard"


class ChecksumError(ShardError):
    code = "checksum"


class TruncatedShardError(ShardError):
    code = "truncated"


class ManifestError(ShardError):
    code = "manifest"


class MissingShardError(ShardError):
    code = "missing"


def _encode_section(name: str, obj, fdtype: np.dtype) -> bytes:
    nm = name.encode()
    head = struct.pack("<H", len(nm)) + nm
    if isinstance(obj, CsrMatrix):
        body = (obj.row_ptr.astype("<u8").tobytes() + obj.col_idx.astype("<u4").tobytes()
                + obj.values.astype(fdtype).tobytes())
        return head + struct.pack("<BQQQ", KIND_CSR, obj.rows, obj.cols, obj.nnz) + body
    arr = np.asarray(obj)
    if arr.dtype == bool:
        return head + struct.pack("<BQQQ", KIND_BOOL, len(arr), 1, len(arr)) + arr.astype("u1").tobytes()
    if arr.dtype.kind in "iu":
        return head + struct.pack("<BQQQ", KIND_INT, len(arr), 1, len(arr)) + arr.astype("<i8").tobytes()
    rows, cols = arr.shape
    return head + struct.pack("<BQQQ", KIND_DENSE, rows, cols, rows * cols) + arr.astype(fdtype).tobytes()


def encode_file(sections: dict, precision: str) -> tuple[bytes, dict]:
    """Serialise sections; returns (bytes, {name: {offset, length, crc32}})."""
    fdtype = FLOAT_DTYPES[precision]
    out = bytearray(MAGIC + struct.pack("<IBI", VERSION, fdtype.itemsize, len(sections)))
    index = {}
    for name, obj in sections.items():
        blob = _encode_section(name, obj, fdtype)
        index[name] = {"offset": len(out), "length": len(blob), "crc32": zlib.crc32(blob)}
        out += blob
    return bytes(out), index


class _Cursor:
    def __init__(self, buf: bytes, where: str):
        self.buf, self.pos, self.where = buf, 0, where

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedShardError(f"{self.where}: truncated at byte {self.pos} (+{n})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def _decode_section(cur: _Cursor, fdtype: np.dtype):
    (nlen,) = cur.unpack("<H")
    name = cur.take(nlen).decode()
    kind, rows, cols, nnz = cur.unpack("<BQQQ")
    native = fdtype.newbyteorder("=")
    if kind == KIND_CSR:
        rp = cur.array("<u8", rows + 1).astype(np.int64)
        ci = cur.array("<u4", nnz).astype(np.int64)
        vals = cur.array(fdtype, nnz).astype(native)
        return name, CsrMatrix(rows, cols, rp, ci, vals)
    if kind == KIND_DENSE:
        return name, cur.array(fdtype, rows * cols).astype(native).reshape(rows, cols)
    if kind == KIND_INT:
        return name, cur.array("<i8", rows).astype(np.int64)
    if kind == KIND_BOOL:
        return name, cur.array("u1", rows).astype(bool)
    raise ShardError(f"{cur.where}: unknown section kind {kind}")


def _read_header(cur: _Cursor) -> tuple[np.dtype, int]:
    if cur.take(4) != MAGIC:
        raise ShardError(f"{cur.where}: bad magic")
    version, width, nsec = cur.unpack("<IBI")
    if version != VERSION or width not in PRECISION_TAGS:
        raise ShardError(f"{cur.where}: unsupported version {version} / width {width}")
    return FLOAT_DTYPES[PRECISION_TAGS[width]], nsec


def decode_file(buf: bytes, where: str = "<buffer>") -> dict:
    cur = _Cursor(buf, where)
    fdtype, nsec = _read_header(cur)
    out = {}
    for _ in range(nsec):
        name, obj = _decode_section(cur, fdtype)
        out[name] = obj
    if cur.pos != len(buf):
        raise ShardError(f"{where}: {len(buf) - cur.pos} trailing bytes")
    return out


@dataclass
class ShardManifest:
    root: Path
    dataset: str
    num_nodes: int
    num_features: int
    num_classes: int
    p: int
    q: int
    precision: str
    permutation_seed: int | None
    nnz: int
    train_count: int
    shards: list = field(default_factory=list)
    perm_file: dict = field(default_factory=dict)
    rng: str = RNG_NAME

    def row_bounds(self, i: int) -> tuple[int, int]:
        return chunk_bounds(self.num_nodes, self.p, i)

    def col_bounds(self, j: int) -> tuple[int, int]:
        return chunk_bounds(self.num_nodes, self.q, j)

    def feature_bounds(self, j: int) -> tuple[int, int]:
        return chunk_bounds(self.num_features, self.q, j)

    def vector_bounds(self, i: int, j: int) -> tuple[int, int]:
        return sub_bounds(self.num_nodes, self.p, i, self.q, j)

    def shard(self, i: int, j: int) -> dict:
        if not (0 <= i < self.p and 0 <= j < self.q):
            raise ManifestError(f"shard ({i}, {j}) outside {self.p}x{self.q} grid")
        return self.shards[i * self.q + j]

    def path(self, i: int, j: int) -> Path:
        return self.root / self.shard(i, j)["file"]

    def total_bytes(self) -> int:
        return sum(s["bytes"] for s in self.shards)

    def to_json(self) -> dict:
        return {
            "format": "plexuskit-shards", "version": VERSION, "dataset": self.dataset,
            "num_nodes": self.num_nodes, "num_features": self.num_features,
            "num_classes": self.num_classes, "p": self.p, "q": self.q,
            "precision": self.precision, "rng": self.rng,
            "permutation_seed": self.permutation_seed, "nnz": self.nnz,
            "train_count": self.train_count, "perm_file": self.perm_file, "shards": self.shards,
        }

    def save(self):
        with open(self.root / MANIFEST_NAME, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "ShardManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            with open(path) as fh:
                d = json.load(fh)
        except FileNotFoundError:
            raise MissingShardError(f"manifest {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: invalid JSON ({exc})") from None
        if d.get("format") != "plexuskit-shards":
            raise ManifestError(f"{path}: not a shard manifest")
        m = cls(path.parent, d["dataset"], d["num_nodes"], d["num_features"], d["num_classes"],
                d["p"], d["q"], d["precision"], d["permutation_seed"], d["nnz"],
                d["train_count"], d["shards"], d.get("perm_file", {}), d.get("rng", RNG_NAME))
        m.check()
        return m

    def check(self):
        if len(self.shards) != self.p * self.q:
            raise ManifestError(f"{self.p}x{self.q} grid but {len(self.shards)} shard entries")
        for k, s in enumerate(self.shards):
            if (s["i"], s["j"]) != divmod(k, self.q):
                raise ManifestError(f"shard entry {k} is ({s['i']}, {s['j']}), out of order")
        for key in ("nnz_even", "nnz_odd"):
            if sum(s[key] for s in self.shards) != self.nnz:
                raise ManifestError(f"sum of {key} does not match total nnz {self.nnz}")


def _shard_sections(g: PreparedGraph, p: int, q: int, i: int, j: int) -> dict:
    n, d = g.num_nodes, g.num_features
    r0, r1 = chunk_bounds(n, p, i)
    c0, c1 = chunk_bounds(n, q, j)
    f0, f1 = chunk_bounds(d, q, j)
    v0, v1 = sub_bounds(n, p, i, q, j)
    return {
        "a_even": csr_block(g.a_even, r0, r1, c0, c1),
        "a_odd": csr_block(g.a_odd, r0, r1, c0, c1),
        "features": g.features[r0:r1, f0:f1],
        "labels_row": g.labels_by_order["row"][v0:v1],
        "labels_col": g.labels_by_order["col"][v0:v1],
        "mask_row": g.mask_by_order["row"][v0:v1],
        "mask_col": g.mask_by_order["col"][v0:v1],
    }


def write_shards(g: PreparedGraph, p: int, q: int, out_dir, precision: str = "f64",
                 max_workers: int | None = None) -> ShardManifest:
    if p < 1 or q < 1:
        raise ValueError("p and q must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def write_one(k):
        i, j = divmod(k, q)
        secs = _shard_sections(g, p, q, i, j)
        blob, index = encode_file(secs, precision)
        name = f"shard_{i:03d}_{j:03d}.plxs"
        with open(out / name, "wb") as fh:
            fh.write(blob)
        return {"i": i, "j": j, "file": name, "bytes": len(blob),
                "sha256": hashlib.sha256(blob).hexdigest(),
                "nnz_even": secs["a_even"].nnz, "nnz_odd": secs["a_odd"].nnz,
                "sections": index}

    with ThreadPoolExecutor(max_workers=max_workers or 1) as pool:
        shards = list(pool.map(write_one, range(p * q)))
    perm_blob, _ = encode_file({"perm_row": g.perm.row, "perm_col": g.perm.col}, precision)
    with open(out / "perm.plxs", "wb") as fh:
        fh.write(perm_blob)
    m = ShardManifest(out, g.name, g.num_nodes, g.num_features, g.num_classes, p, q, precision,
                      g.perm.seed, g.a_even.nnz, g.train_count, shards,
                      {"file": "perm.plxs", "sha256": hashlib.sha256(perm_blob).hexdigest()})
    m.check()
    m.save()
    return m


def _read_bytes(path: Path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except FileNotFoundError:
        raise MissingShardError(f"shard file {path} is missing") from None


def read_shard(manifest: ShardManifest, i: int, j: int) -> dict:
    """Read and fully verify one shard file; returns its sections."""
    entry = manifest.shard(i, j)
    path = manifest.path(i, j)
    blob = _read_bytes(path)
    if len(blob) < entry["bytes"]:
        raise TruncatedShardError(f"{path}: {len(blob)} bytes, manifest says {entry['bytes']}")
    if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
        raise ChecksumError(f"{path}: SHA-256 mismatch")
    secs = decode_file(blob, str(path))
    if secs["a_even"].nnz != entry["nnz_even"] or secs["a_odd"].nnz != entry["nnz_odd"]:
        raise ManifestError(f"{path}: nnz disagrees with manifest")
    return secs


def read_permutation(manifest: ShardManifest) -> tuple[np.ndarray, np.ndarray]:
    path = manifest.root / manifest.perm_file["file"]
    blob = _read_bytes(path)
    if hashlib.sha256(blob).hexdigest() != manifest.perm_file["sha256"]:
        raise ChecksumError(f"{path}: SHA-256 mismatch")
    secs = decode_file(blob, str(path))
    return secs["perm_row"], secs["perm_col"]


class SectionReader:
    """Reads individual sections by offset, verifying CRC32, and counts bytes.

    Sections are cached so a rank that needs the same block for several
    layers reads it once.
    """

    def __init__(self, manifest: ShardManifest):
        self.manifest = manifest
        self.bytes_read = 0
        self.files_touched: set[tuple[int, int]] = set()
        self._cache: dict = {}

    def section(self, i: int, j: int, name: str):
        key = (i, j, name)
        if key in self._cache:
            return self._cache[key]
        entry = self.manifest.shard(i, j)
        path = self.manifest.path(i, j)
        info = entry["sections"][name]
        try:
            with open(path, "rb") as fh:
                head = fh.read(13)
                fh.seek(info["offset"])
                blob = fh.read(info["length"])
        except FileNotFoundError:
            raise MissingShardError(f"shard file {path} is missing") from None
        self.bytes_read += len(head) + len(blob)
        self.files_touched.add((i, j))
        if len(blob) < info["length"]:
            raise TruncatedShardError(f"{path}: section {name} truncated")
        if zlib.crc32(blob) != info["crc32"]:
            raise ChecksumError(f"{path}: section {name} CRC32 mismatch")
        fdtype, _ = _read_header(_Cursor(head, str(path)))
        got, obj = _decode_section(_Cursor(blob, f"{path}:{name}"), fdtype)
        if got != name:
            raise ManifestError(f"{path}: expected section {name}, found {got}")
        self._cache[key] = obj
        return obj

    def _overlap(self, bounds_fn, count, lo, hi):
        for k in range(count):
            b0, b1 = bounds_fn(k)
            if b0 < hi and lo < b1:
                yield k, b0, b1

    def csr(self, which: str, r0: int, r1: int, c0: int, c1: int) -> CsrMatrix:
        """Assemble rows [r0, r1) x cols [c0, c1) of ``a_even`` or ``a_odd``."""
        m = self.manifest
        rows, cols, vals = [], [], []
        for i, b0, b1 in self._overlap(m.row_bounds, m.p, r0, r1):
            for j, d0, d1 in self._overlap(m.col_bounds, m.q, c0, c1):
                blk = self.section(i, j, which)
                lo, hi = max(r0, b0), min(r1, b1)
                part = csr_block(blk, lo - b0, hi - b0, max(c0, d0) - d0, min(c1, d1) - d0)
                rows.append(part.row_indices() + (lo - r0))
                cols.append(part.col_idx + (max(c0, d0) - c0))
                vals.append(part.values)
        dtype = FLOAT_DTYPES[m.precision].newbyteorder("=")
        if not rows:
            return CsrMatrix.empty(r1 - r0, c1 - c0, dtype)
        return csr_from_coo(np.concatenate(rows), np.concatenate(cols),
                            np.concatenate(vals), (r1 - r0, c1 - c0))

    def features(self, r0: int, r1: int, c0: int, c1: int) -> np.ndarray:
        m = self.manifest
        out = np.zeros((r1 - r0, c1 - c0), dtype=FLOAT_DTYPES[m.precision].newbyteorder("="))
        for i, b0, b1 in self._overlap(m.row_bounds, m.p, r0, r1):
            for j, d0, d1 in self._overlap(m.feature_bounds, m.q, c0, c1):
                blk = self.section(i, j, "features")
                lo, hi = max(r0, b0), min(r1, b1)
                clo, chi = max(c0, d0), min(c1, d1)
                out[lo - r0:hi - r0, clo - c0:chi - c0] = blk[lo - b0:hi - b0, clo - d0:chi - d0]
        return out

    def vector(self, name: str, lo: int, hi: int) -> np.ndarray:
        m = self.manifest
        parts = []
        for k in range(m.p * m.q):
            i, j = divmod(k, m.q)
            b0, b1 = m.vector_bounds(i, j)
            if b0 < hi and lo < b1:
                v = self.section(i, j, name)
                parts.append(v[max(lo, b0) - b0:min(hi, b1) - b0])
        if not parts:
            return np.zeros(0, dtype=bool if name.startswith("mask") else np.int64)
        return np.concatenate(parts)


def file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def list_files(manifest: ShardManifest) -> list[Path]:
    return [manifest.root / s["file"] for s in manifest.shards] + [
        manifest.root / manifest.perm_file["file"]]

