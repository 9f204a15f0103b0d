"""Readers and writers: ASCII PLY and TSV point clouds, label tables, and
per-block mask files.

Floats are written with ``repr`` so a read-back reproduces every value
bit-exactly. Parse failures raise :class:`ParseError` naming the offending
line.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import numpy.typing as npt

from .core import PointCloud
from .errors import ParseError
from .merging import BlockGeometry, InstanceMask

_FLOAT_PLY_TYPES = {"float", "float32", "double", "float64"}
_INT_PLY_TYPES = {"char", "uchar", "int8", "uint8", "short", "ushort", "int16", "uint16",
                  "int", "uint", "int32", "uint32", "int64", "uint64"}


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# PLY


def read_ply(path) -> PointCloud:
    """Read an ASCII PLY with properties x, y, z and optional semantic, instance."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError(f"{path}: line 1: expected 'ply' magic, got {lines[0]!r}" if lines
                         else f"{path}: empty file")

    n_vertices = None
    in_vertex_element = False
    properties: list[str] = []
    data_start = None
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if line.startswith("comment") or not line:
            continue
        if line == "end_header":
            data_start = lineno
            break
        tokens = line.split()
        if tokens[0] == "format":
            if tokens[1:] != ["ascii", "1.0"]:
                raise ParseError(f"{path}: line {lineno}: only 'format ascii 1.0' is supported, got {line!r}")
        elif tokens[0] == "element":
            if tokens[1] == "vertex":
                in_vertex_element = True
                try:
                    n_vertices = int(tokens[2])
                except (IndexError, ValueError):
                    raise ParseError(f"{path}: line {lineno}: bad vertex count in {line!r}") from None
            else:
                raise ParseError(f"{path}: line {lineno}: unsupported element {tokens[1]!r}")
        elif tokens[0] == "property":
            if not in_vertex_element:
                raise ParseError(f"{path}: line {lineno}: property outside vertex element")
            if len(tokens) != 3:
                raise ParseError(f"{path}: line {lineno}: malformed property {line!r}")
            ptype, pname = tokens[1], tokens[2]
            if pname in ("x", "y", "z") and ptype not in _FLOAT_PLY_TYPES:
                raise ParseError(f"{path}: line {lineno}: {pname} must be a float type, got {ptype!r}")
            if pname in ("semantic", "instance") and ptype not in _INT_PLY_TYPES:
                raise ParseError(f"{path}: line {lineno}: {pname} must be an integer type, got {ptype!r}")
            properties.append(pname)
        else:
            raise ParseError(f"{path}: line {lineno}: unexpected header line {line!r}")

    if data_start is None:
        raise ParseError(f"{path}: missing end_header")
    if n_vertices is None:
        raise ParseError(f"{path}: header declares no vertex element")
    for req in ("x", "y", "z"):
        if req not in properties:
            raise ParseError(f"{path}: header lacks required property {req!r}")

    data_lines = lines[data_start:]
    if len(data_lines) < n_vertices:
        raise ParseError(f"{path}: header declares {n_vertices} vertices but only {len(data_lines)} data lines follow")
    col = {name: i for i, name in enumerate(properties)}
    xyz = np.empty((n_vertices, 3))
    semantic = np.empty(n_vertices, dtype=np.int64) if "semantic" in col else None
    instance = np.empty(n_vertices, dtype=np.int64) if "instance" in col else None
    for row, raw in enumerate(data_lines[:n_vertices]):
        lineno = data_start + 1 + row
        tokens = raw.split()
        if len(tokens) != len(properties):
            raise ParseError(f"{path}: line {lineno}: expected {len(properties)} values, got {len(tokens)}")
        try:
            xyz[row, 0] = float(tokens[col["x"]])
            xyz[row, 1] = float(tokens[col["y"]])
            xyz[row, 2] = float(tokens[col["z"]])
            if semantic is not None:
                semantic[row] = int(tokens[col["semantic"]])
            if instance is not None:
                instance[row] = int(tokens[col["instance"]])
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from None
    return PointCloud(positions=xyz, semantic=semantic, instance=instance)


def write_ply(path, cloud: PointCloud) -> None:
    path = Path(path)
    header = ["ply", "format ascii 1.0", f"element vertex {cloud.n}",
              "property double x", "property double y", "property double z"]
    if cloud.semantic is not None:
        header.append("property int semantic")
    if cloud.instance is not None:
        header.append("property int instance")
    header.append("end_header")
    rows = []
    for i in range(cloud.n):
        parts = [_fmt(cloud.positions[i, 0]), _fmt(cloud.positions[i, 1]), _fmt(cloud.positions[i, 2])]
        if cloud.semantic is not None:
            parts.append(str(int(cloud.semantic[i])))
        if cloud.instance is not None:
            parts.append(str(int(cloud.instance[i])))
        rows.append(" ".join(parts))
    path.write_text("\n".join(header + rows) + "\n")


# ---------------------------------------------------------------------------
# TSV point clouds


_CLOUD_COLUMNS = ("x", "y", "z", "semantic", "instance")


def read_tsv(path) -> PointCloud:
    """Read a TSV cloud with columns x y z [semantic] [instance].

    A header row is optional; without one, columns are taken positionally in
    the order above.
    """
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ParseError(f"{path}: empty file")
    first = lines[0].split("\t")
    if any(tok.strip().isalpha() for tok in first):
        columns = [tok.strip() for tok in first]
        for name in columns:
            if name not in _CLOUD_COLUMNS:
                raise ParseError(f"{path}: line 1: unknown column {name!r}")
        for req in ("x", "y", "z"):
            if req not in columns:
                raise ParseError(f"{path}: line 1: missing required column {req!r}")
        data_lines = lines[1:]
        start = 2
    else:
        columns = list(_CLOUD_COLUMNS[: len(first)])
        data_lines = lines
        start = 1
    col = {name: i for i, name in enumerate(columns)}
    n = len(data_lines)
    xyz = np.empty((n, 3))
    semantic = np.empty(n, dtype=np.int64) if "semantic" in col else None
    instance = np.empty(n, dtype=np.int64) if "instance" in col else None
    for row, raw in enumerate(data_lines):
        lineno = start + row
        tokens = raw.split("\t")
        if len(tokens) != len(columns):
            raise ParseError(f"{path}: line {lineno}: expected {len(columns)} values, got {len(tokens)}")
        try:
            xyz[row] = (float(tokens[col["x"]]), float(tokens[col["y"]]), float(tokens[col["z"]]))
            if semantic is not None:
                semantic[row] = int(tokens[col["semantic"]])
            if instance is not None:
                instance[row] = int(tokens[col["instance"]])
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from None
    return PointCloud(positions=xyz, semantic=semantic, instance=instance)


def write_tsv(path, cloud: PointCloud) -> None:
    path = Path(path)
    columns = ["x", "y", "z"]
    if cloud.semantic is not None:
        columns.append("semantic")
    if cloud.instance is not None:
        columns.append("instance")
    rows = ["\t".join(columns)]
    for i in range(cloud.n):
        parts = [_fmt(cloud.positions[i, 0]), _fmt(cloud.positions[i, 1]), _fmt(cloud.positions[i, 2])]
        if cloud.semantic is not None:
            parts.append(str(int(cloud.semantic[i])))
        if cloud.instance is not None:
            parts.append(str(int(cloud.instance[i])))
        rows.append("\t".join(parts))
    path.write_text("\n".join(rows) + "\n")


def read_cloud(path) -> PointCloud:
    """Dispatch on extension: .ply or .tsv/.txt."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix in (".tsv", ".txt"):
        return read_tsv(path)
    raise ParseError(f"{path}: unsupported extension {suffix!r}, expected .ply or .tsv")


def write_cloud(path, cloud: PointCloud) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        write_ply(path, cloud)
    elif suffix in (".tsv", ".txt"):
        write_tsv(path, cloud)
    else:
        raise ParseError(f"{path}: unsupported extension {suffix!r}, expected .ply or .tsv")


# ---------------------------------------------------------------------------
# Per-point label tables


def write_labels_tsv(path, instance, semantic=None) -> None:
    """Write final per-point labels: point_id, instance, and optional semantic."""
    instance = np.asarray(instance, dtype=np.int64)
    columns = ["point_id", "instance"] + (["semantic"] if semantic is not None else [])
    rows = ["\t".join(columns)]
    for i in range(len(instance)):
        parts = [str(i), str(int(instance[i]))]
        if semantic is not None:
            parts.append(str(int(semantic[i])))
        rows.append("\t".join(parts))
    Path(path).write_text("\n".join(rows) + "\n")


def read_labels_tsv(path) -> tuple[npt.NDArray[np.int64], npt.NDArray[np.int64] | None]:
    """Read per-point labels from a label table or a labeled cloud TSV/PLY.

    Returns ``(instance, semantic)`` ordered by point id; semantic is None
    when the file carries none.
    """
    path = Path(path)
    if path.suffix.lower() == ".ply":
        cloud = read_ply(path)
        if cloud.instance is None:
            raise ParseError(f"{path}: no instance labels present")
        return cloud.instance, cloud.semantic
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ParseError(f"{path}: empty file")
    header = [tok.strip() for tok in lines[0].split("\t")]
    if "x" in header:
        cloud = read_tsv(path)
        if cloud.instance is None:
            raise ParseError(f"{path}: no instance labels present")
        return cloud.instance, cloud.semantic
    if header[:2] != ["point_id", "instance"]:
        raise ParseError(f"{path}: line 1: expected columns starting 'point_id\\tinstance', got {lines[0]!r}")
    has_semantic = "semantic" in header
    n = len(lines) - 1
    instance = np.empty(n, dtype=np.int64)
    semantic = np.empty(n, dtype=np.int64) if has_semantic else None
    seen = np.zeros(n, dtype=bool)
    for row, raw in enumerate(lines[1:]):
        lineno = row + 2
        tokens = raw.split("\t")
        if len(tokens) != len(header):
            raise ParseError(f"{path}: line {lineno}: expected {len(header)} values, got {len(tokens)}")
        try:
            pid = int(tokens[0])
            if not 0 <= pid < n:
                raise ValueError(f"point_id {pid} outside 0..{n - 1}")
            if seen[pid]:
                raise ValueError(f"duplicate point_id {pid}")
            seen[pid] = True
            instance[pid] = int(tokens[1])
            if semantic is not None:
                semantic[pid] = int(tokens[header.index("semantic")])
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from None
    return instance, semantic


# ---------------------------------------------------------------------------
# Per-block mask files (the external-predictor interface)


def write_block_file(path, block_id: int, center_xy, radius: float,
                     masks: list[InstanceMask], semantic=None) -> None:
    """Write one block's predictions as JSON.

    ``semantic``, when given, is a pair of (point_ids, classes) arrays with
    this block's per-point semantic votes.
    """
    payload: dict = {
        "block_id": int(block_id),
        "center": [float(center_xy[0]), float(center_xy[1])],
        "radius": float(radius),
        "masks": [
            {
                "query_index": int(m.query_index),
                "score": float(m.score),
                "point_ids": [int(p) for p in m.point_ids],
            }
            for m in masks
        ],
    }
    if semantic is not None:
        point_ids, classes = semantic
        payload["semantic"] = {
            "point_ids": [int(p) for p in point_ids],
            "classes": [int(c) for c in classes],
        }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def read_block_file(path) -> tuple[int, BlockGeometry, list[InstanceMask], tuple | None]:
    """Read one block's predictions; returns (block_id, geometry, masks, semantic)."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    try:
        block_id = int(payload["block_id"])
        geom = BlockGeometry(center_xy=(float(payload["center"][0]), float(payload["center"][1])),
                             radius=float(payload["radius"]))
        masks = [
            InstanceMask(
                point_ids=np.asarray(m["point_ids"], dtype=np.int64),
                score=float(m["score"]),
                block_id=block_id,
                query_index=int(m.get("query_index", qi)),
            )
            for qi, m in enumerate(payload["masks"])
        ]
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise ParseError(f"{path}: malformed block file: {exc!r}") from None
    semantic = None
    if "semantic" in payload:
        try:
            semantic = (
                np.asarray(payload["semantic"]["point_ids"], dtype=np.int64),
                np.asarray(payload["semantic"]["classes"], dtype=np.int64),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: malformed semantic section: {exc!r}") from None
    return block_id, geom, masks, semantic


def write_json(path, payload: dict) -> None:
    """Deterministic JSON: sorted keys, fixed indentation."""
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
