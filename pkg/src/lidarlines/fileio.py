"""Readers and writers: KITTI velodyne .bin, PLY, JSON-lines segments, checkpoints.

Every writer goes through :func:`atomic_write`, so a crash never leaves a
half-written file under the final name.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .geometry import PointCloud
from .lines import LineSegment
from .net import MicroNet, checkpoint_bytes, checkpoint_from_bytes

PathLike = Union[str, os.PathLike]

KITTI_RECORD = 16


class FormatError(ValueError):
    """Malformed input file; ``offset`` or ``line`` locate the problem."""

    def __init__(self, message: str, offset: Optional[int] = None, line: Optional[int] = None):
        where = ""
        if offset is not None:
            where = f" at byte offset {offset}"
        elif line is not None:
            where = f" at line {line}"
        super().__init__(message + where)
        self.offset = offset
        self.line = line


def atomic_write(path: PathLike, data: Union[bytes, str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- KITTI ------------------------------------------------------------------

def read_kitti_bin(path: PathLike) -> PointCloud:
    """Little-endian float32 records ``(x, y, z, intensity)``; intensity is dropped."""
    raw = Path(path).read_bytes()
    full = len(raw) // KITTI_RECORD
    if len(raw) % KITTI_RECORD:
        raise FormatError(f"truncated record ({len(raw) % KITTI_RECORD} of {KITTI_RECORD} bytes)",
                          offset=full * KITTI_RECORD)
    rec = np.frombuffer(raw, dtype="<f4").reshape(full, 4)
    return PointCloud(rec[:, :3].astype(np.float64))


def write_kitti_bin(path: PathLike, cloud: PointCloud,
                    intensity: Optional[np.ndarray] = None) -> None:
    rec = np.zeros((len(cloud), 4), dtype="<f4")
    rec[:, :3] = cloud.points
    if intensity is not None:
        rec[:, 3] = intensity
    atomic_write(path, rec.tobytes())


# -- PLY --------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_PLY_NAMES = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort",
              "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}


@dataclass
class PlyElement:
    name: str
    count: int
    properties: List[Tuple[str, str]]  # (name, numpy type code without byte order)
    header_line: int

    def dtype(self, byte_order: str = "<") -> np.dtype:
        return np.dtype([(n, byte_order + t) for n, t in self.properties])


@dataclass
class PlyData:
    cloud: PointCloud
    edges: Optional[np.ndarray] = None


def _parse_header(lines: List[str]):
    if not lines or lines[0].strip() != "ply":
        raise FormatError("missing 'ply' magic", line=1)
    fmt = None
    elements: List[PlyElement] = []
    for no, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) != 3 or tok[1] not in ("ascii", "binary_little_endian") or tok[2] != "1.0":
                raise FormatError(f"unsupported format line {raw.strip()!r}", line=no)
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise FormatError("element needs a name and a count", line=no)
            try:
                count = int(tok[2])
            except ValueError:
                raise FormatError(f"bad element count {tok[2]!r}", line=no) from None
            if count < 0:
                raise FormatError("negative element count", line=no)
            elements.append(PlyElement(tok[1], count, [], no))
        elif tok[0] == "property":
            if not elements:
                raise FormatError("property before any element", line=no)
            if len(tok) >= 2 and tok[1] == "list":
                raise FormatError("list properties are not supported", line=no)
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise FormatError(f"bad property declaration {raw.strip()!r}", line=no)
            elements[-1].properties.append((tok[2], _PLY_TYPES[tok[1]]))
        elif tok[0] == "end_header":
            if fmt is None:
                raise FormatError("missing format line", line=no)
            return fmt, elements, no
        else:
            raise FormatError(f"unknown header keyword {tok[0]!r}", line=no)
    raise FormatError("missing end_header", line=len(lines) + 1)


def read_ply(path: PathLike) -> PlyData:
    """Read an ASCII or binary little-endian PLY written by :func:`write_ply`.

    The vertex element must carry ``x``, ``y`` and ``z``; ``line_label``,
    ``score`` and ``desc_<i>`` become cloud channels. An ``edge`` element
    with ``vertex1``/``vertex2`` is returned as an ``(M, 2)`` index array.
    """
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if end < 0:
        raise FormatError("missing end_header", line=raw.count(b"\n") + 1)
    nl = raw.find(b"\n", end)
    body_start = len(raw) if nl < 0 else nl + 1
    try:
        header = raw[:body_start].decode("ascii").splitlines()
    except UnicodeDecodeError:
        raise FormatError("header is not ASCII", line=1) from None
    fmt, elements, header_end = _parse_header(header)
    body = raw[body_start:]
    data = {}
    if fmt == "ascii":
        rows = body.decode("ascii").splitlines()
        pos = 0
        for el in elements:
            arr = np.zeros(el.count, dtype=el.dtype())
            for r in range(el.count):
                line_no = header_end + pos + 1
                if pos >= len(rows):
                    raise FormatError(f"missing {el.name} rows", line=line_no)
                tok = rows[pos].split()
                pos += 1
                if len(tok) != len(el.properties):
                    raise FormatError(f"expected {len(el.properties)} values, got {len(tok)}",
                                      line=line_no)
                try:
                    arr[r] = tuple(np.array(t).astype(typ).item() if typ[0] == "f" else int(t)
                                   for t, (_, typ) in zip(tok, el.properties))
                except ValueError:
                    raise FormatError("unparsable value", line=line_no) from None
            data[el.name] = arr
    else:
        offset = 0
        for el in elements:
            dt = el.dtype("<")
            need = dt.itemsize * el.count
            if offset + need > len(body):
                raise FormatError(f"binary body too short for element {el.name!r}",
                                  offset=body_start + offset)
            data[el.name] = np.frombuffer(body, dtype=dt, count=el.count, offset=offset).copy()
            offset += need
    vert_el = next((e for e in elements if e.name == "vertex"), None)
    if vert_el is None:
        raise FormatError("no vertex element", line=header_end)
    names = [n for n, _ in vert_el.properties]
    for axis in "xyz":
        if axis not in names:
            raise FormatError(f"vertex element lacks property {axis!r}", line=vert_el.header_line)
    v = data["vertex"]
    pts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    labels = v["line_label"].astype(np.uint8) if "line_label" in names else None
    scores = v["score"].astype(np.float64) if "score" in names else None
    desc_names = sorted((n for n in names if n.startswith("desc_")), key=lambda n: int(n[5:]))
    desc = (np.stack([v[n] for n in desc_names], axis=1).astype(np.float64)
            if desc_names else None)
    if desc is not None:
        desc = desc / np.linalg.norm(desc, axis=1, keepdims=True)
    edges = None
    if "edge" in data:
        e = data["edge"]
        edges = np.stack([e["vertex1"], e["vertex2"]], axis=1).astype(np.int64)
    return PlyData(PointCloud(pts, labels=labels, scores=scores, descriptors=desc), edges)


def _ply_bytes(vertex: np.ndarray, edges: Optional[np.ndarray], binary: bool) -> bytes:
    fmt = "binary_little_endian" if binary else "ascii"
    head = ["ply", f"format {fmt} 1.0", "comment lidarlines", f"element vertex {len(vertex)}"]
    for name in vertex.dtype.names:
        head.append(f"property {_PLY_NAMES[vertex.dtype[name].str[1:]]} {name}")
    if edges is not None:
        head += [f"element edge {len(edges)}", "property int vertex1", "property int vertex2"]
    head.append("end_header")
    out = ("\n".join(head) + "\n").encode("ascii")
    edge_arr = None
    if edges is not None:
        edge_arr = np.zeros(len(edges), dtype=[("vertex1", "<i4"), ("vertex2", "<i4")])
        edge_arr["vertex1"], edge_arr["vertex2"] = edges[:, 0], edges[:, 1]
    if binary:
        out += vertex.tobytes()
        if edge_arr is not None:
            out += edge_arr.tobytes()
        return out
    rows = []
    for rec in vertex:
        rows.append(" ".join(repr(float(x)) if vertex.dtype[i].kind == "f" else str(int(x))
                             for i, x in enumerate(rec)))
    if edge_arr is not None:
        rows += [f"{a} {b}" for a, b in edge_arr]
    return out + ("\n".join(rows) + ("\n" if rows else "")).encode("ascii")


def _vertex_array(cloud: PointCloud) -> np.ndarray:
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if cloud.labels is not None:
        fields.append(("line_label", "u1"))
    if cloud.scores is not None:
        fields.append(("score", "<f4"))
    d = 0 if cloud.descriptors is None else cloud.descriptors.shape[1]
    fields += [(f"desc_{i}", "<f4") for i in range(d)]
    v = np.zeros(len(cloud), dtype=fields)
    v["x"], v["y"], v["z"] = cloud.points.T
    if cloud.labels is not None:
        v["line_label"] = cloud.labels
    if cloud.scores is not None:
        v["score"] = cloud.scores
    for i in range(d):
        v[f"desc_{i}"] = cloud.descriptors[:, i]
    return v


def write_ply(path: PathLike, cloud: PointCloud, binary: bool = False) -> None:
    atomic_write(path, _ply_bytes(_vertex_array(cloud), None, binary))


def write_segments_ply(path: PathLike, segments: Sequence[LineSegment], binary: bool = False) -> None:
    """Two vertices per segment and one edge joining them."""
    pts = np.array([[s.e0, s.e1] for s in segments], dtype=np.float64).reshape(-1, 3)
    edges = np.arange(len(pts)).reshape(-1, 2)
    atomic_write(path, _ply_bytes(_vertex_array(PointCloud(pts)), edges, binary))


# -- segments sidecar ---------------------------------------------------------

def write_segments_jsonl(path: PathLike, segments: Sequence[LineSegment]) -> None:
    text = "".join(json.dumps(s.to_dict(), sort_keys=True) + "\n" for s in segments)
    atomic_write(path, text)


def read_segments_jsonl(path: PathLike) -> List[LineSegment]:
    out = []
    for no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(LineSegment.from_dict(json.loads(line)))
        except (ValueError, KeyError) as exc:
            raise FormatError(f"bad segment record: {exc}", line=no) from None
    return out


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path: PathLike, net: MicroNet, meta: Optional[dict] = None) -> None:
    atomic_write(path, checkpoint_bytes(net, meta))


def load_checkpoint(path: PathLike) -> MicroNet:
    return checkpoint_from_bytes(Path(path).read_bytes())
