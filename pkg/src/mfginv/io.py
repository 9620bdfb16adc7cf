"""CSV files for fields, kernels, metrics and traces.

Every file starts with the grid comment ``# m=..,n=..,T=..,dim=..``,
followed by file-kind comments and one header row. Values are written
with 17 significant digits so a write/read cycle is bit-exact.

Rows are axis-major: the face axis varies slowest, then ``i1``, ``i2``,
and the time index ``j`` fastest.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .grid import LAYOUTS, GridSpec

_SPEC_RE = re.compile(r"^# m=(\d+),n=(\d+),T=([^,]+),dim=(\d+)\s*$")


class FormatError(ValueError):
    """A file does not match the expected kind or grid."""


def fmt(x) -> str:
    return format(float(x), ".17g")


def parse_spec_comment(line: str) -> GridSpec:
    mt = _SPEC_RE.match(line.strip())
    if not mt:
        raise FormatError(f"not a grid comment: {line.strip()!r}")
    m, n, T, dim = mt.groups()
    return GridSpec(int(dim), int(m), int(n), float(T))


def _space_cols(dim: int) -> list[str]:
    return ["i1", "i2"][:dim]


def _columns(layout: str, dim: int) -> list[str]:
    space = _space_cols(dim)
    if layout == "face":
        return ["axis", *space, "j"]
    if layout == "cell":
        return space
    return [*space, "j"]


def _to_file_order(arr: np.ndarray, layout: str, dim: int) -> np.ndarray:
    """Move time to the last axis (and the face axis to the front)."""
    if layout == "face":
        return np.moveaxis(arr, 0, -1)
    if layout == "cell":
        return arr
    return np.moveaxis(arr, 0, -1)


def _from_file_order(arr: np.ndarray, layout: str) -> np.ndarray:
    if layout == "cell":
        return arr
    return np.moveaxis(arr, -1, 0)


def _write(path, comments: list[str], columns: list[str], index: np.ndarray, values: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        for c in comments:
            fh.write(c + "\n")
        fh.write(",".join(columns + ["value"]) + "\n")
        for idx, v in zip(index, values):
            fh.write(",".join(str(int(i)) for i in idx) + "," + fmt(v) + "\n")


def _read(path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    comments = [ln for ln in lines if ln.startswith("#")]
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    if not body:
        raise FormatError(f"{path}: no header row")
    header = body[0].split(",")
    rows = np.array([[float(t) for t in ln.split(",")] for ln in body[1:]]) if body[1:] else \
        np.zeros((0, len(header)))
    return comments, header, rows


def _comment_value(comments: list[str], key: str) -> str | None:
    for c in comments:
        mt = re.match(rf"^# {re.escape(key)}=(.*)$", c.strip())
        if mt:
            return mt.group(1)
    return None


def _file_spec(comments: list[str], path) -> GridSpec:
    for c in comments:
        if c.startswith("# m="):
            return parse_spec_comment(c)
    raise FormatError(f"{path}: missing grid comment")


def _check_spec(found: GridSpec, expected: GridSpec | None, path) -> GridSpec:
    if expected is not None and found != expected:
        raise FormatError(f"{path}: grid {found.comment()[2:]} does not match {expected.comment()[2:]}")
    return found


def write_field(path, arr: np.ndarray, spec: GridSpec, layout: str) -> None:
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}")
    spec.check(arr, layout)
    ordered = _to_file_order(np.asarray(arr, dtype=float), layout, spec.dim)
    index = np.indices(ordered.shape).reshape(ordered.ndim, -1).T
    _write(path, [spec.comment(), f"# layout={layout}"], _columns(layout, spec.dim),
           index, ordered.ravel())


def read_field(path, spec: GridSpec | None = None, layout: str | None = None):
    """Return ``(array, spec, layout)``; mismatching ``spec``/``layout`` raise."""
    comments, header, rows = _read(path)
    found = _check_spec(_file_spec(comments, path), spec, path)
    lay = _comment_value(comments, "layout")
    if lay not in LAYOUTS:
        raise FormatError(f"{path}: missing or unknown layout comment")
    if layout is not None and lay != layout:
        raise FormatError(f"{path}: layout {lay} where {layout} was expected")
    cols = _columns(lay, found.dim)
    if header != cols + ["value"]:
        raise FormatError(f"{path}: header {header} does not match layout {lay}")
    shape = found.shape(lay)
    fshape = _to_file_order(np.empty(shape), lay, found.dim).shape
    if rows.shape[0] != int(np.prod(fshape)):
        raise FormatError(f"{path}: {rows.shape[0]} rows, expected {int(np.prod(fshape))}")
    arr = _from_file_order(rows[:, -1].reshape(fshape), lay)
    return np.ascontiguousarray(arr), found, lay


def write_kernel(path, ktilde: np.ndarray, spec: GridSpec) -> None:
    if ktilde.shape != spec.quotient_shape:
        raise ValueError(f"kernel must have quotient shape {spec.quotient_shape}")
    index = np.indices(ktilde.shape).reshape(spec.dim, -1).T
    _write(path, [spec.comment(), f"# quotient-grid m={spec.m}"], ["q1", "q2"][: spec.dim],
           index, ktilde.ravel())


def read_kernel(path, spec: GridSpec | None = None):
    comments, header, rows = _read(path)
    found = _check_spec(_file_spec(comments, path), spec, path)
    q = _comment_value(comments, "quotient-grid m")
    if q is None or int(q) != found.m:
        raise FormatError(f"{path}: missing or inconsistent quotient-grid header")
    if rows.shape[0] != int(np.prod(found.quotient_shape)):
        raise FormatError(f"{path}: wrong number of kernel rows")
    return rows[:, -1].reshape(found.quotient_shape).copy(), found


def write_metric(path, g0: np.ndarray, spec: GridSpec, preset: str) -> None:
    spec.check(g0, "cell", "g0")
    index = np.indices(g0.shape).reshape(spec.dim, -1).T
    _write(path, [spec.comment(), "# layout=cell", f"# entry-maps={preset}"],
           _space_cols(spec.dim), index, g0.ravel())


def read_metric(path, spec: GridSpec | None = None):
    """Return ``(g0, spec, preset)``."""
    comments, _, _ = _read(path)
    preset = _comment_value(comments, "entry-maps")
    if preset is None:
        raise FormatError(f"{path}: missing entry-maps comment")
    g0, found, _ = read_field(path, spec, "cell")
    return g0, found, preset


def write_table(path, rows: list[dict], columns: list[str], spec: GridSpec) -> None:
    """Plain numeric table (traces, diagnostics) under the grid comment."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(spec.comment() + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_cell(row.get(c)) for c in columns) + "\n")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return fmt(v)


def read_table(path, spec: GridSpec | None = None) -> tuple[list[str], list[dict]]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    comments = [ln for ln in lines if ln.startswith("#")]
    _check_spec(_file_spec(comments, path), spec, path)
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    cols = body[0].split(",")
    out = []
    for ln in body[1:]:
        vals = ln.split(",")
        out.append({c: (float(v) if v not in ("",) and _isnum(v) else v) for c, v in zip(cols, vals)})
    return cols, out


def _isnum(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False
