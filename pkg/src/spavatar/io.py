"""PLY (ascii / binary little-endian) and OBJ readers and writers."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .pointcloud import MissingNormals, OrientedPointCloud, TriangleMesh

PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_NP_TO_PLY = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort",
              "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}


class ParseError(ValueError):
    pass


# -- generic element I/O ----------------------------------------------------

def write_ply_elements(path, elements, binary=True, comments=()):
    """Write PLY elements.

    ``elements`` is a list of ``(name, props)`` where ``props`` maps property
    name to an array. A 2-D integer array is written as a list property
    (e.g. ``vertex_indices`` of faces, uchar count / int items).
    """
    header = ["ply", "format binary_little_endian 1.0" if binary else "format ascii 1.0"]
    header += [f"comment {c}" for c in comments]
    prepared = []
    for name, props in elements:
        cols = {k: np.asarray(v) for k, v in props.items()}
        count = len(next(iter(cols.values()))) if cols else 0
        header.append(f"element {name} {count}")
        for key, arr in cols.items():
            if len(arr) != count:
                raise ValueError(f"property {name}.{key} has {len(arr)} rows, expected {count}")
            code = arr.dtype.str[1:]
            if arr.ndim == 2:
                header.append(f"property list uchar {_NP_TO_PLY[code]} {key}")
            else:
                header.append(f"property {_NP_TO_PLY[code]} {key}")
        prepared.append((count, cols))
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        for count, cols in prepared:
            if count == 0:
                continue
            if binary:
                fields, values = [], []
                for key, arr in cols.items():
                    if arr.ndim == 2:
                        fields.append((f"{key}__n", "u1"))
                        values.append(np.full(count, arr.shape[1], dtype=np.uint8))
                        fields.append((key, "<" + arr.dtype.str[1:], (arr.shape[1],)))
                    else:
                        fields.append((key, "<" + arr.dtype.str[1:]))
                    values.append(arr)
                rec = np.empty(count, dtype=fields)
                names = rec.dtype.names
                for fname, val in zip(names, values):
                    rec[fname] = val
                fh.write(rec.tobytes())
            else:
                lines = []
                for row in range(count):
                    toks = []
                    for arr in cols.values():
                        if arr.ndim == 2:
                            toks.append(str(arr.shape[1]))
                            toks.extend(_fmt(x) for x in arr[row])
                        else:
                            toks.append(_fmt(arr[row]))
                    lines.append(" ".join(toks))
                fh.write(("\n".join(lines) + "\n").encode("ascii"))


def _fmt(x):
    if isinstance(x, (np.floating, float)):
        return repr(float(x))
    return str(int(x))


def _parse_header(buf):
    end = buf.find(b"end_header")
    if not buf.startswith(b"ply") or end < 0:
        raise ParseError("not a PLY file (missing 'ply' magic or end_header)")
    nl = buf.find(b"\n", end)
    body_start = len(buf) if nl < 0 else nl + 1
    lines = buf[:end].decode("ascii", errors="replace").splitlines()
    fmt, elements = None, []
    for lineno, line in enumerate(lines, 1):
        toks = line.split()
        if not toks or toks[0] in ("ply", "comment", "obj_info"):
            continue
        if toks[0] == "format":
            fmt = toks[1]
        elif toks[0] == "element":
            elements.append((toks[1], int(toks[2]), []))
        elif toks[0] == "property":
            if not elements:
                raise ParseError(f"line {lineno}: property before any element")
            try:
                if toks[1] == "list":
                    prop = (toks[4], "list", PLY_TYPES[toks[2]], PLY_TYPES[toks[3]])
                else:
                    prop = (toks[2], "scalar", PLY_TYPES[toks[1]], None)
            except (KeyError, IndexError) as exc:
                raise ParseError(f"line {lineno}: bad property declaration {line!r}") from exc
            elements[-1][2].append(prop)
        else:
            raise ParseError(f"line {lineno}: unexpected header keyword {toks[0]!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"unsupported PLY format {fmt!r}")
    return fmt, elements, body_start, len(lines) + 1


def read_ply_elements(path):
    """Return ``{element_name: {property: array}}`` from a PLY file."""
    buf = Path(path).read_bytes()
    fmt, elements, pos, header_lines = _parse_header(buf)
    out = {}
    if fmt == "ascii":
        rows = buf[pos:].decode("ascii", errors="replace").splitlines()
        rows = [r for r in rows if r.strip()]
        cursor = 0
        for name, count, props in elements:
            if cursor + count > len(rows):
                raise ParseError(
                    f"line {header_lines + len(rows) + 1}: element {name!r} declares {count} rows,"
                    f" only {len(rows) - cursor} present")
            cols = {p[0]: [] for p in props}
            for r in range(count):
                toks = rows[cursor + r].split()
                t = 0
                try:
                    for pname, kind, dtype, item in props:
                        if kind == "list":
                            n = int(toks[t])
                            cols[pname].append([float(x) for x in toks[t + 1:t + 1 + n]])
                            t += 1 + n
                        else:
                            cols[pname].append(float(toks[t]))
                            t += 1
                except (IndexError, ValueError) as exc:
                    raise ParseError(f"line {header_lines + cursor + r + 1}: malformed row") from exc
            cursor += count
            out[name] = {}
            for pname, kind, dtype, item in props:
                if kind == "list":
                    out[name][pname] = _ragged(cols[pname], item)
                else:
                    out[name][pname] = np.asarray(cols[pname], dtype=dtype)
        return out

    for name, count, props in elements:
        if any(kind == "list" for _, kind, _, _ in props):
            out[name], pos = _read_binary_lists(buf, pos, name, count, props)
            continue
        dt = np.dtype([(p[0], "<" + p[2]) for p in props])
        nbytes = dt.itemsize * count
        if pos + nbytes > len(buf):
            raise ParseError(f"byte {pos}: element {name!r} truncated "
                             f"(need {nbytes} bytes, have {len(buf) - pos})")
        rec = np.frombuffer(buf, dtype=dt, count=count, offset=pos)
        out[name] = {p[0]: rec[p[0]].copy() for p in props}
        pos += nbytes
    return out


def _ragged(rows, dtype):
    lengths = {len(r) for r in rows}
    if len(lengths) <= 1:
        return np.asarray(rows, dtype=dtype).reshape(len(rows), -1)
    return [np.asarray(r, dtype=dtype) for r in rows]


def _read_binary_lists(buf, pos, name, count, props):
    # fast path: every list has the same length as the first row
    fields = []
    probe = pos
    for pname, kind, dtype, item in props:
        if kind == "list":
            if probe + np.dtype(dtype).itemsize > len(buf):
                raise ParseError(f"byte {probe}: element {name!r} truncated")
            n = int(np.frombuffer(buf, dtype="<" + dtype, count=1, offset=probe)[0])
            fields.append((pname + "__n", "<" + dtype))
            fields.append((pname, "<" + item, (n,)))
            probe += np.dtype(dtype).itemsize + n * np.dtype(item).itemsize
        else:
            fields.append((pname, "<" + dtype))
            probe += np.dtype(dtype).itemsize
    dt = np.dtype(fields)
    nbytes = dt.itemsize * count
    if pos + nbytes <= len(buf):
        rec = np.frombuffer(buf, dtype=dt, count=count, offset=pos)
        ok = all(np.all(rec[p[0] + "__n"] == dt[p[0]].shape[0]) for p in props if p[1] == "list")
        if ok:
            return {p[0]: rec[p[0]].copy() for p in props}, pos + nbytes
    cols = {p[0]: [] for p in props}
    for _ in range(count):
        for pname, kind, dtype, item in props:
            size = np.dtype(dtype).itemsize
            if pos + size > len(buf):
                raise ParseError(f"byte {pos}: element {name!r} truncated")
            val = np.frombuffer(buf, dtype="<" + dtype, count=1, offset=pos)[0]
            pos += size
            if kind == "list":
                n = int(val)
                isz = np.dtype(item).itemsize
                if pos + n * isz > len(buf):
                    raise ParseError(f"byte {pos}: element {name!r} truncated")
                cols[pname].append(np.frombuffer(buf, dtype="<" + item, count=n, offset=pos).copy())
                pos += n * isz
            else:
                cols[pname].append(val)
    result = {}
    for pname, kind, dtype, item in props:
        result[pname] = _ragged(cols[pname], item) if kind == "list" else np.asarray(cols[pname], dtype=dtype)
    return result, pos


# -- typed readers / writers ------------------------------------------------------

def _color_columns(colors):
    c = np.clip(np.round(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)
    return {"red": c[:, 0], "green": c[:, 1], "blue": c[:, 2]}


def _read_colors(props):
    if not all(k in props for k in ("red", "green", "blue")):
        return None
    c = np.stack([props["red"], props["green"], props["blue"]], axis=1)
    if np.issubdtype(c.dtype, np.integer):
        return c.astype(np.float64) / 255.0
    return c.astype(np.float64)


def write_ply(obj, path, binary=True):
    """Write an :class:`OrientedPointCloud` or :class:`TriangleMesh` as PLY.

    Coordinates are stored as float32; labels as uchar ``label`` (per vertex
    for clouds, per face for meshes).
    """
    if isinstance(obj, OrientedPointCloud):
        props = {"x": obj.positions[:, 0].astype(np.float32),
                 "y": obj.positions[:, 1].astype(np.float32),
                 "z": obj.positions[:, 2].astype(np.float32),
                 "nx": obj.normals[:, 0].astype(np.float32),
                 "ny": obj.normals[:, 1].astype(np.float32),
                 "nz": obj.normals[:, 2].astype(np.float32)}
        if obj.colors is not None:
            props.update(_color_columns(obj.colors))
        if obj.labels is not None:
            props["label"] = obj.labels.astype(np.uint8)
        write_ply_elements(path, [("vertex", props)], binary=binary)
        return
    if isinstance(obj, TriangleMesh):
        v = obj.vertices.astype(np.float32)
        props = {"x": v[:, 0], "y": v[:, 1], "z": v[:, 2]}
        if obj.vertex_colors is not None:
            props.update(_color_columns(obj.vertex_colors))
        face_props = {"vertex_indices": obj.faces.astype(np.int32)}
        if obj.face_labels is not None:
            face_props["label"] = obj.face_labels.astype(np.uint8)
        write_ply_elements(path, [("vertex", props), ("face", face_props)], binary=binary)
        return
    raise TypeError(f"cannot write {type(obj).__name__} as PLY")


def read_ply(path, require_normals=False):
    """Read a PLY file as a mesh (if it has faces) or an oriented point cloud."""
    el = read_ply_elements(path)
    if "vertex" not in el:
        raise ParseError(f"{path}: no vertex element")
    v = el["vertex"]
    for key in ("x", "y", "z"):
        if key not in v:
            raise ParseError(f"{path}: vertex element lacks property {key!r}")
    pos = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    colors = _read_colors(v)
    face = el.get("face")
    if face is not None and len(next(iter(face.values()), [])) > 0:
        idx = face.get("vertex_indices", face.get("vertex_index"))
        if idx is None or isinstance(idx, list):
            raise ParseError(f"{path}: only triangle faces are supported")
        labels = face.get("label")
        return TriangleMesh(pos, idx.astype(np.int64), colors,
                            None if labels is None else labels.astype(np.int64))
    if not all(k in v for k in ("nx", "ny", "nz")):
        if require_normals:
            raise MissingNormals(f"{path}: point cloud has no nx/ny/nz properties")
        normals = np.tile([0.0, 0.0, 1.0], (len(pos), 1))
    else:
        normals = np.stack([v["nx"], v["ny"], v["nz"]], axis=1).astype(np.float64)
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        # float32 storage perturbs unit length at ~1e-7
        normals = normals / np.where(norms > 0, norms, 1.0) if np.any(np.abs(norms - 1) > 1e-6) else normals
    labels = v.get("label")
    return OrientedPointCloud(pos, normals, colors,
                              None if labels is None else labels.astype(np.int64))


def write_obj(mesh: TriangleMesh, path, normals=True):
    """OBJ with ``v``, optional per-vertex ``vn``, and 1-based ``f``."""
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    if normals:
        lines += [f"vn {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertex_normals()]
        lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in mesh.faces + 1]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in mesh.faces + 1]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        toks = line.split()
        if not toks:
            continue
        try:
            if toks[0] == "v":
                verts.append([float(t) for t in toks[1:4]])
            elif toks[0] == "f":
                idx = [int(t.split("/")[0]) for t in toks[1:]]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0] - 1, idx[k] - 1, idx[k + 1] - 1])
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: malformed {toks[0]!r} record") from exc
    return TriangleMesh(np.asarray(verts).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3))
