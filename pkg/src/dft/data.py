"""On-disk dataset format: a manifest plus edges/features/labels files.

Layout of one dataset directory:

  manifest.json    {"name", "n", "d", "c", "files", "feature_encoding"}
  edges.tsv        header "src\\tdst", one 0-indexed pair per line
  labels.tsv       header "node\\tlabel", one line per node (optional)
  features.bin     u32 n, u32 d (little-endian), then n*d float32 row-major
  features.csr     u32 n, u32 d, u64 nnz, indptr (n+1 u64), indices (nnz u32),
                   values (nnz float32)

Directed edge lists are symmetrized on load; save writes the canonical
sorted undirected form, so saved directories round-trip byte-identically.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .graph import Graph

ENCODINGS = ("dense_f32", "csr_f32")

_MANIFEST_KEYS = {"name", "n", "d", "c", "files", "feature_encoding"}


def _read_manifest(directory: Path) -> dict:
    path = directory / "manifest.json"
    if not path.exists():
        raise DataError(f"missing manifest: {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    unknown = sorted(set(manifest) - _MANIFEST_KEYS)
    if unknown:
        raise DataError(f"{path}: unknown keys {unknown}")
    missing = sorted(_MANIFEST_KEYS - {"c"} - set(manifest))
    if missing:
        raise DataError(f"{path}: missing keys {missing}")
    if manifest["feature_encoding"] not in ENCODINGS:
        raise DataError(
            f"{path}: feature_encoding must be one of {ENCODINGS}, "
            f"got {manifest['feature_encoding']!r}"
        )
    return manifest


def _parse_tsv(path: Path, expected_header: str) -> list[tuple[int, int]]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if header != expected_header:
            raise DataError(
                f"{path}:1: expected header {expected_header!r}, got {header!r}"
            )
        for lineno, line in enumerate(f, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected two tab-separated "
                                f"fields, got {line!r}")
            try:
                rows.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer field in {line!r}")
    return rows


def _read_dense_features(path: Path, n: int, d: int) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 8:
        raise DataError(f"{path}: truncated header")
    fn, fd = struct.unpack("<II", raw[:8])
    if (fn, fd) != (n, d):
        raise DataError(
            f"{path}: header says {fn}x{fd}, manifest says {n}x{d}"
        )
    expected = 8 + 4 * n * d
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(n, d).astype(np.float64)


def _read_csr_features(path: Path, n: int, d: int) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 16:
        raise DataError(f"{path}: truncated header")
    fn, fd, nnz = struct.unpack("<IIQ", raw[:16])
    if (fn, fd) != (n, d):
        raise DataError(f"{path}: header says {fn}x{fd}, manifest says {n}x{d}")
    off = 16
    indptr = np.frombuffer(raw, dtype="<u8", offset=off, count=n + 1)
    off += 8 * (n + 1)
    indices = np.frombuffer(raw, dtype="<u4", offset=off, count=nnz)
    off += 4 * nnz
    values = np.frombuffer(raw, dtype="<f4", offset=off, count=nnz)
    off += 4 * nnz
    if len(raw) != off:
        raise DataError(f"{path}: expected {off} bytes, got {len(raw)}")
    if indptr[0] != 0 or indptr[-1] != nnz or (np.diff(indptr) < 0).any():
        raise DataError(f"{path}: malformed indptr array")
    if nnz and indices.max() >= d:
        raise DataError(f"{path}: column index out of range")
    dense = np.zeros((n, d))
    for i in range(n):
        lo, hi = indptr[i], indptr[i + 1]
        dense[i, indices[lo:hi]] = values[lo:hi]
    return dense


def load_dataset(directory) -> Graph:
    """Load one dataset directory into a Graph (edges symmetrized)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory not found: {directory}")
    manifest = _read_manifest(directory)
    n, d = int(manifest["n"]), int(manifest["d"])
    files = manifest["files"]

    edge_path = directory / files["edges"]
    if not edge_path.exists():
        raise DataError(f"missing edges file: {edge_path}")
    pairs = _parse_tsv(edge_path, "src\tdst")
    edges = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if edges.size:
        if edges.min() < 0 or edges.max() >= n:
            raise DataError(f"{edge_path}: edge endpoint out of range for n={n}")
        edges = edges[edges[:, 0] != edges[:, 1]]

    feat_path = directory / files["features"]
    if not feat_path.exists():
        raise DataError(f"missing features file: {feat_path}")
    if manifest["feature_encoding"] == "dense_f32":
        features = _read_dense_features(feat_path, n, d)
    else:
        features = _read_csr_features(feat_path, n, d)

    labels = None
    c = manifest.get("c")
    if "labels" in files:
        label_path = directory / files["labels"]
        if not label_path.exists():
            raise DataError(f"missing labels file: {label_path}")
        rows = _parse_tsv(label_path, "node\tlabel")
        if len(rows) != n:
            raise DataError(
                f"{label_path}: {len(rows)} label rows for {n} nodes"
            )
        nodes = np.asarray([r[0] for r in rows], dtype=np.int64)
        if not np.array_equal(np.sort(nodes), np.arange(n)):
            raise DataError(f"{label_path}: node ids are not exactly 0..{n - 1}")
        labels = np.empty(n, dtype=np.int64)
        labels[nodes] = [r[1] for r in rows]
        if c is None:
            raise DataError(f"{directory}: labels present but manifest c is null")
        if labels.size and (labels.min() < 0 or labels.max() >= c):
            raise DataError(f"{label_path}: label outside [0, {c})")

    g = Graph(n, edges, features, labels=labels,
              num_classes=int(c) if c is not None else None)
    g.name = manifest["name"]
    return g


def save_dataset(g: Graph, directory, name=None,
                 encoding: str = "dense_f32") -> None:
    """Write the canonical on-disk form of a graph (deterministic bytes)."""
    if encoding not in ENCODINGS:
        raise DataError(f"unknown feature encoding {encoding!r}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if name is None:
        name = getattr(g, "name", "graph")

    files = {"edges": "edges.tsv",
             "features": "features.bin" if encoding == "dense_f32"
             else "features.csr"}
    if g.labels is not None:
        files["labels"] = "labels.tsv"
    manifest = {
        "name": name,
        "n": g.n,
        "d": g.feature_dim,
        "c": g.num_classes,
        "files": files,
        "feature_encoding": encoding,
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )

    with open(directory / files["edges"], "w", encoding="utf-8") as f:
        f.write("src\tdst\n")
        for u, v in g.edges:
            f.write(f"{u}\t{v}\n")

    feats = np.ascontiguousarray(g.features.data, dtype="<f4")
    if encoding == "dense_f32":
        with open(directory / files["features"], "wb") as f:
            f.write(struct.pack("<II", g.n, g.feature_dim))
            f.write(feats.tobytes())
    else:
        indptr = [0]
        indices = []
        values = []
        for row in feats:
            nz = np.flatnonzero(row)
            indices.append(nz.astype("<u4"))
            values.append(row[nz])
            indptr.append(indptr[-1] + len(nz))
        nnz = indptr[-1]
        with open(directory / files["features"], "wb") as f:
            f.write(struct.pack("<IIQ", g.n, g.feature_dim, nnz))
            f.write(np.asarray(indptr, dtype="<u8").tobytes())
            f.write(np.concatenate(indices).astype("<u4").tobytes()
                    if indices else b"")
            f.write(np.concatenate(values).astype("<f4").tobytes()
                    if values else b"")

    if g.labels is not None:
        with open(directory / files["labels"], "w", encoding="utf-8") as f:
            f.write("node\tlabel\n")
            for i, lab in enumerate(g.labels):
                f.write(f"{i}\t{lab}\n")
