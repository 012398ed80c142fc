"""Read and write PLY, OBJ and xyz-csv geometry files.

PLY files may be ASCII or binary little-endian. Vertex coordinates are the
``x``/``y``/``z`` properties (any numeric type); faces use a ``vertex_indices``
(or ``vertex_index``) list property. Extra per-vertex scalar attributes can be
written, e.g. a registration uncertainty field.
"""

import csv
import io
import json
import os

import numpy as np

from .exceptions import FormatError, ValidationError
from .geometry import PointSet, TriangleMesh

FORMATS = ("ply", "obj", "xyz-csv")

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def infer_format(path):
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ply":
        return "ply"
    if ext == ".obj":
        return "obj"
    if ext in (".csv", ".xyz", ".txt"):
        return "xyz-csv"
    raise FormatError(f"cannot infer geometry format from extension {ext!r}")


def load_geometry(path, format=None, with_attributes=False):
    """Load a :class:`TriangleMesh` (if faces are present) or :class:`PointSet`.

    With ``with_attributes=True`` returns ``(geometry, attributes)`` where
    ``attributes`` maps extra PLY vertex property names to arrays.
    """
    fmt = format or infer_format(path)
    if fmt not in FORMATS:
        raise FormatError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    with open(path, "rb") as fh:
        data = fh.read()
    if fmt == "ply":
        points, faces, attrs = _read_ply(data)
    elif fmt == "obj":
        points, faces = _read_obj(data.decode("utf-8", errors="replace"))
        attrs = {}
    else:
        points, faces = _read_csv(data.decode("utf-8", errors="replace")), None
        attrs = {}
    if not np.all(np.isfinite(points)):
        row = int(np.flatnonzero(~np.isfinite(points).all(1))[0])
        raise ValidationError(f"{path}: vertex {row} has a non-finite coordinate")
    geom = TriangleMesh(points, faces) if faces is not None and len(faces) else PointSet(points)
    return (geom, attrs) if with_attributes else geom


def save_geometry(geom, path, format=None, attributes=None, binary=False):
    """Write ``geom``; ``attributes`` adds per-vertex float properties (PLY only)."""
    fmt = format or infer_format(path)
    pts = geom.points
    faces = geom.triangles if isinstance(geom, TriangleMesh) else np.zeros((0, 3), dtype=np.int64)
    attributes = dict(attributes or {})
    for name, values in attributes.items():
        if np.shape(values) != (len(pts),):
            raise ValidationError(f"attribute {name!r} must have one value per vertex")
    if fmt == "ply":
        payload = _write_ply(pts, faces, attributes, binary)
    elif fmt == "obj":
        payload = _write_obj(pts, faces)
    elif fmt == "xyz-csv":
        payload = _write_csv(pts)
    else:
        raise FormatError(f"unknown format {fmt!r}")
    with open(path, "wb") as fh:
        fh.write(payload)


def _fmt(x):
    return f"{x:.9g}"


# --------------------------------------------------------------------------
# PLY


def _parse_ply_header(data):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError("not a PLY file (missing 'ply' magic or 'end_header')")
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []
    for lineno, raw in enumerate(lines, start=1):
        parts = raw.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian"):
                raise FormatError(f"header line {lineno}: unsupported PLY format {raw.strip()!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise FormatError(f"header line {lineno}: malformed element {raw.strip()!r}")
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise FormatError(f"header line {lineno}: property before any element")
            if parts[1] == "list":
                if len(parts) != 5 or parts[2] not in _PLY_TYPES or parts[3] not in _PLY_TYPES:
                    raise FormatError(f"header line {lineno}: malformed list property")
                elements[-1]["props"].append((parts[4], "list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
            else:
                if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                    raise FormatError(f"header line {lineno}: malformed property {raw.strip()!r}")
                elements[-1]["props"].append((parts[2], "scalar", _PLY_TYPES[parts[1]], None))
        else:
            raise FormatError(f"header line {lineno}: unexpected keyword {parts[0]!r}")
    if fmt is None:
        raise FormatError("PLY header lacks a format line")
    return fmt, elements, body_start


def _read_ply(data):
    fmt, elements, offset = _parse_ply_header(data)
    vertex = None
    faces = None
    attrs = {}
    if fmt == "ascii":
        tokens = data[offset:].decode("ascii", errors="replace").split()
        pos = 0
        for el in elements:
            rows = []
            for r in range(el["count"]):
                row = {}
                for name, kind, t1, t2 in el["props"]:
                    try:
                        if kind == "list":
                            cnt = int(tokens[pos])
                            row[name] = [float(x) for x in tokens[pos + 1:pos + 1 + cnt]]
                            if len(row[name]) != cnt:
                                raise IndexError
                            pos += 1 + cnt
                        else:
                            row[name] = float(tokens[pos])
                            pos += 1
                    except (IndexError, ValueError):
                        raise FormatError(
                            f"element {el['name']!r} row {r}: cannot parse property {name!r} "
                            f"(token {pos})"
                        ) from None
                rows.append(row)
            el["rows"] = rows
    else:
        pos = offset
        for el in elements:
            scalar_only = all(kind == "scalar" for _, kind, _, _ in el["props"])
            if scalar_only:
                dt = np.dtype([(name, "<" + t1) for name, _, t1, _ in el["props"]])
                nbytes = dt.itemsize * el["count"]
                if pos + nbytes > len(data):
                    raise FormatError(f"element {el['name']!r}: truncated binary data at byte {pos}")
                arr = np.frombuffer(data, dtype=dt, count=el["count"], offset=pos)
                pos += nbytes
                el["rows"] = [{n: float(r[n]) for n in dt.names} for r in arr] if el["name"] != "vertex" else arr
            else:
                rows = []
                for r in range(el["count"]):
                    row = {}
                    for name, kind, t1, t2 in el["props"]:
                        try:
                            if kind == "list":
                                cnt = int(np.frombuffer(data, "<" + t1, 1, pos)[0])
                                pos += np.dtype(t1).itemsize
                                row[name] = np.frombuffer(data, "<" + t2, cnt, pos).tolist()
                                pos += cnt * np.dtype(t2).itemsize
                            else:
                                row[name] = float(np.frombuffer(data, "<" + t1, 1, pos)[0])
                                pos += np.dtype(t1).itemsize
                        except ValueError:
                            raise FormatError(
                                f"element {el['name']!r} row {r}: truncated binary data at byte {pos}"
                            ) from None
                    rows.append(row)
                el["rows"] = rows

    for el in elements:
        names = [p[0] for p in el["props"]]
        if el["name"] == "vertex":
            if not {"x", "y"} <= set(names):
                raise FormatError("vertex element lacks x/y properties")
            coords = [c for c in ("x", "y", "z") if c in names]
            rows = el["rows"]
            if isinstance(rows, np.ndarray):
                if len(rows):
                    vertex = np.column_stack([rows[c].astype(np.float64) for c in coords])
                else:
                    vertex = np.zeros((0, len(coords)))
                for n in names:
                    if n not in coords:
                        attrs[n] = rows[n].astype(np.float64)
            else:
                vertex = np.array([[row[c] for c in coords] for row in rows], dtype=np.float64).reshape(-1, len(coords))
                for n, kind, _, _ in el["props"]:
                    if n not in coords and kind == "scalar":
                        attrs[n] = np.array([row[n] for row in rows], dtype=np.float64)
        elif el["name"] == "face":
            key = next((n for n in ("vertex_indices", "vertex_index") if n in names), None)
            if key is None:
                raise FormatError("face element lacks a vertex_indices list")
            tris = []
            for r, row in enumerate(el["rows"]):
                idx = [int(v) for v in row[key]]
                if len(idx) < 3:
                    raise FormatError(f"face {r} has fewer than 3 vertices")
                # fan-triangulate polygons
                tris.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
            faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    if vertex is None:
        raise FormatError("PLY file has no vertex element")
    return vertex, faces, attrs


def _write_ply(points, faces, attributes, binary):
    n, d = points.shape
    coords = ("x", "y", "z")[:d]
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {n}"]
    header += [f"property double {c}" for c in coords]
    header += [f"property double {name}" for name in attributes]
    if len(faces):
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    cols = [points[:, i] for i in range(d)] + [np.asarray(v, dtype=np.float64) for v in attributes.values()]
    table = np.column_stack(cols) if cols else np.zeros((n, 0))
    if binary:
        body = np.ascontiguousarray(table, dtype="<f8").tobytes()
        if len(faces):
            fdt = np.dtype([("c", "u1"), ("i", "<i4", (3,))])
            farr = np.empty(len(faces), dtype=fdt)
            farr["c"] = 3
            farr["i"] = faces
            body += farr.tobytes()
        return head + body
    out = io.StringIO()
    for row in table:
        out.write(" ".join(_fmt(v) for v in row) + "\n")
    for f in faces:
        out.write(f"3 {f[0]} {f[1]} {f[2]}\n")
    return head + out.getvalue().encode("ascii")


# --------------------------------------------------------------------------
# OBJ and CSV


def _read_obj(text):
    verts, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                if len(idx) < 3:
                    raise ValueError
                faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
        except ValueError:
            raise FormatError(f"line {lineno}: cannot parse {raw.strip()!r}") from None
    if not verts:
        raise FormatError("OBJ file has no vertices")
    if len({len(v) for v in verts}) != 1:
        raise FormatError("OBJ vertices have inconsistent dimension")
    return np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64).reshape(-1, 3)


def _write_obj(points, faces):
    out = io.StringIO()
    for p in points:
        out.write("v " + " ".join(_fmt(v) for v in p) + "\n")
    for f in faces:
        out.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
    return out.getvalue().encode("ascii")


def _read_csv(text):
    rows = []
    for lineno, rec in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not rec or all(not c.strip() for c in rec):
            continue
        try:
            rows.append([float(c) for c in rec])
        except ValueError:
            if lineno == 1 and not rows:
                continue  # header
            raise FormatError(f"line {lineno}: non-numeric value in {rec!r}") from None
    if not rows:
        raise FormatError("xyz-csv file has no data rows")
    if len({len(r) for r in rows}) != 1:
        raise FormatError("xyz-csv rows have inconsistent column counts")
    return np.array(rows, dtype=np.float64)


def _write_csv(points):
    out = io.StringIO()
    out.write(",".join(("x", "y", "z")[: points.shape[1]]) + "\n")
    for p in points:
        out.write(",".join(_fmt(v) for v in p) + "\n")
    return out.getvalue().encode("ascii")


# --------------------------------------------------------------------------
# landmarks, training sets, traces and chains


def load_landmarks(path):
    """Landmarks from a JSON list of ``{"id", "coordinates", "variance"?}``."""
    from .geometry import Landmark

    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, list):
        raise FormatError(f"{path}: expected a JSON list of landmarks")
    out = []
    for i, item in enumerate(data):
        if not isinstance(item, dict) or "id" not in item or "coordinates" not in item:
            raise FormatError(f"{path}: landmark {i} needs 'id' and 'coordinates'")
        extra = set(item) - {"id", "coordinates", "variance"}
        if extra:
            raise FormatError(f"{path}: landmark {i} has unknown keys {sorted(extra)}")
        out.append(Landmark(str(item["id"]), item["coordinates"], float(item.get("variance", 0.0))))
    return out


def save_landmarks(landmarks, path):
    data = [{"id": lm.id, "coordinates": [float(v) for v in lm.point], "variance": lm.variance}
            for lm in landmarks]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=1)
        fh.write("\n")


def load_training_fields(directory, reference):
    """Deformation fields ``shape - reference`` for every geometry file in ``directory``.

    Shapes must be in vertex correspondence with ``reference``.
    """
    names = sorted(f for f in os.listdir(directory) if os.path.splitext(f)[1].lower() in (".ply", ".obj", ".csv"))
    if len(names) < 2:
        raise ValidationError(f"{directory}: a statistical kernel needs at least 2 training shapes")
    fields = []
    for name in names:
        shape = load_geometry(os.path.join(directory, name))
        if shape.points.shape != reference.points.shape:
            raise ValidationError(f"{name}: {shape.n} vertices, reference has {reference.n}")
        fields.append(shape.points - reference.points)
    return np.stack(fields)


TRACE_COLUMNS = ("iteration", "sigma2", "mean_dist", "max_dist", "log_posterior", "accepted")


def write_trace_csv(trace, path):
    """Per-iteration trace as CSV (floats with 9 significant digits)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            cells = []
            for col in TRACE_COLUMNS:
                v = row.get(col, "")
                if isinstance(v, float) or isinstance(v, np.floating):
                    cells.append("" if np.isnan(v) else _fmt(float(v)))
                else:
                    cells.append(str(v))
            writer.writerow(cells)


def read_trace_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in ("sigma2", "mean_dist", "max_dist", "log_posterior"):
            row[key] = float(row[key]) if row[key] != "" else float("nan")
        row["iteration"] = int(row["iteration"])
    return rows


def save_chain(chain, path):
    """Retained chain states as ``.npz`` (coefficients, transforms, log-posteriors)."""
    np.savez(
        path,
        alphas=chain.alphas,
        scales=np.array([T.scale for T in chain.transforms]),
        rotations=np.array([T.rotation for T in chain.transforms]).reshape(len(chain.transforms), -1),
        translations=np.array([T.translation for T in chain.transforms]).reshape(len(chain.transforms), -1),
        log_posteriors=chain.log_posteriors,
        meta=np.array(json.dumps({"burn_in": chain.burn_in, "thin": chain.thin,
                                  "n_steps": chain.n_steps, "n_accepted": chain.n_accepted})),
    )
