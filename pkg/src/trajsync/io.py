"""Text file formats.

Numbers are written at 17 significant digits and timestamps as decimal
seconds with at least nine fractional digits, both chosen so that reading a
written file returns the identical floats. LF and CRLF line endings are
accepted; ``#`` starts a comment line. An empty file is an empty container.

Formats:

* trajectory: ``t x y z qx qy qz qw`` (whitespace separated)
* series CSV: ``t,x,y,z``
* time pairs CSV: ``sensor_time,host_time``
* hull CSV: ``x,y``
* radar CSV: ``t,x,y,z,doppler,intensity`` (rows sharing ``t`` form a scan)
* place CSV: ``x,y,z,heading_deg,d0,d1,...``
* stream JSONL: one ``imu`` / ``cloud`` / ``pose`` record per line
* graph JSONL: ``node``, ``rel``, ``abs_pose``, ``abs_pos``, ``frame``,
  ``fixed`` and ``loss`` records
"""

from __future__ import annotations

import json
from decimal import Decimal
from pathlib import Path

import numpy as np

from .geom import Pose, Trajectory, matrix_to_quat, quat_to_matrix
from .kinematics import RadarScan
from .pgo import AbsPoseEdge, AbsPosEdge, PoseGraph, RelPoseEdge, RobustLoss
from .reversal import CloudRecord, ImuRecord, MessageStream, PoseRecord, format_ns, seconds_to_ns
from .xcorr import TimedVec3Series


class FormatError(ValueError):
    """Malformed input; ``line`` and ``column`` are 1-based."""

    def __init__(self, msg: str, line: int | None = None, column: int | None = None):
        self.line, self.column = line, column
        where = "" if line is None else f"line {line}" + ("" if column is None else f", column {column}") + ": "
        super().__init__(where + msg)


def fmt_num(x) -> str:
    return f"{float(x):.17g}"


def fmt_time(t) -> str:
    """Shortest decimal with >= 9 fractional digits that reads back as ``t``."""
    t = float(t)
    for digits in range(9, 25):
        s = f"{t:.{digits}f}"
        if float(s) == t:
            return s
    return repr(t)


def _lines(path):
    text = Path(path).read_text(encoding="utf-8")
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        if line.strip() and not line.lstrip().startswith("#"):
            yield n, line


def _split(line: str, sep):
    """Fields with their 1-based start columns."""
    if sep is None:
        out, col = [], 0
        for tok in line.split():
            col = line.index(tok, col)
            out.append((tok, col + 1))
            col += len(tok)
        return out
    out, col = [], 1
    for tok in line.split(sep):
        out.append((tok.strip(), col))
        col += len(tok) + 1
    return out


def _parse_float(tok, lineno, col) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise FormatError(f"not a number: {tok!r}", lineno, col) from None
    if not np.isfinite(v):
        raise FormatError(f"non-finite value: {tok!r}", lineno, col)
    return v


def read_table(path, ncols: int | None, sep=",", header: tuple | None = None) -> np.ndarray:
    """Numeric rows of a delimited file. ``ncols=None`` accepts any fixed
    width of at least one column. A first row equal to ``header`` is skipped."""
    rows, width = [], ncols
    for k, (lineno, line) in enumerate(_lines(path)):
        fields = _split(line, sep)
        if k == 0 and header is not None and tuple(f for f, _ in fields[: len(header)]) == header:
            continue
        if width is None:
            width = len(fields)
        if len(fields) != width:
            raise FormatError(f"schema mismatch: expected {width} fields, found {len(fields)}", lineno)
        rows.append([_parse_float(tok, lineno, col) for tok, col in fields])
    return np.array(rows, dtype=float).reshape(-1, width or 0)


def _write_rows(path, rows, sep=",", header: str | None = None, time_cols=(0,)):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            fh.write(header + "\n")
        for row in rows:
            fh.write(sep.join(fmt_time(v) if c in time_cols else fmt_num(v) for c, v in enumerate(row)) + "\n")


# -- trajectory ---------------------------------------------------------------


def read_trajectory_array(path) -> np.ndarray:
    return read_table(path, 8, sep=None)


def write_trajectory_array(path, arr) -> None:
    _write_rows(path, np.asarray(arr, dtype=float).reshape(-1, 8), sep=" ")


def read_trajectory(path) -> Trajectory:
    arr = read_trajectory_array(path)
    R = np.stack([quat_to_matrix(q) for q in arr[:, 4:8]]) if len(arr) else np.zeros((0, 3, 3))
    try:
        return Trajectory(arr[:, 0], R, arr[:, 1:4])
    except ValueError as e:
        raise FormatError(str(e)) from None


def write_trajectory(path, traj: Trajectory) -> None:
    q = traj.quats()
    write_trajectory_array(path, np.column_stack([traj.stamps, traj.positions, q]) if len(traj) else [])


# -- CSV series ---------------------------------------------------------------

SERIES_HEADER = ("t", "x", "y", "z")


def read_series(path) -> TimedVec3Series:
    arr = read_table(path, 4, header=SERIES_HEADER)
    try:
        return TimedVec3Series(arr[:, 0], arr[:, 1:])
    except ValueError as e:
        raise FormatError(str(e)) from None


def write_series(path, s: TimedVec3Series) -> None:
    _write_rows(path, np.column_stack([s.stamps, s.values]), header=",".join(SERIES_HEADER))


def read_time_pairs(path) -> np.ndarray:
    return read_table(path, 2, header=("sensor_time", "host_time"))


def write_time_pairs(path, pairs) -> None:
    _write_rows(path, np.asarray(pairs, dtype=float).reshape(-1, 2), header="sensor_time,host_time", time_cols=(0, 1))


def read_hull(path) -> np.ndarray:
    return read_table(path, 2, header=("x", "y"))


def write_hull(path, vertices) -> None:
    _write_rows(path, np.asarray(vertices, dtype=float).reshape(-1, 2), header="x,y", time_cols=(0, 1))


RADAR_HEADER = ("t", "x", "y", "z", "doppler", "intensity")


def read_radar(path, doppler_sign: float = 1.0) -> list[RadarScan]:
    """Scans grouped by frame stamp. ``doppler_sign=-1`` flips files that
    store receding-positive radial speeds the other way round."""
    if doppler_sign not in (1, -1):
        raise ValueError("doppler_sign must be +1 or -1")
    arr = read_table(path, 6, header=RADAR_HEADER)
    arr[:, 4] *= doppler_sign
    scans = []
    if len(arr) == 0:
        return scans
    starts = np.flatnonzero(np.r_[True, arr[1:, 0] != arr[:-1, 0]])
    ends = np.r_[starts[1:], len(arr)]
    for a, b in zip(starts, ends):
        chunk = arr[a:b]
        try:
            scans.append(RadarScan(float(chunk[0, 0]), chunk[:, 1:4], chunk[:, 4], chunk[:, 5]))
        except ValueError as e:
            raise FormatError(str(e)) from None
    if any(s2.t <= s1.t for s1, s2 in zip(scans, scans[1:])):
        raise FormatError("radar scans must be in increasing time order")
    return scans


def write_radar(path, scans) -> None:
    rows = []
    for s in scans:
        rows.append(np.column_stack([np.full(len(s), s.t), s.points, s.doppler, s.intensity]))
    _write_rows(path, np.vstack(rows) if rows else [], header=",".join(RADAR_HEADER))


def read_places(path):
    """``(descriptors, positions, headings_deg)`` of a place CSV."""
    arr = read_table(path, None)
    if arr.shape[1] and arr.shape[1] < 5:
        raise FormatError("schema mismatch: place rows need position, heading and a descriptor")
    return arr[:, 4:], arr[:, 0:3], arr[:, 3]


def write_places(path, descriptors, positions, headings) -> None:
    d = np.asarray(descriptors, dtype=float)
    rows = np.column_stack([np.asarray(positions, dtype=float).reshape(len(d), 3), np.asarray(headings, dtype=float), d])
    _write_rows(path, rows, time_cols=())


# -- JSONL --------------------------------------------------------------------


def _json_lines(path):
    for lineno, line in _lines(path):
        try:
            rec = json.loads(line, parse_float=Decimal)
        except json.JSONDecodeError as e:
            raise FormatError(e.msg, lineno, e.colno) from None
        if not isinstance(rec, dict):
            raise FormatError("record must be an object", lineno, 1)
        yield lineno, rec


def _floats(v, n, lineno, key):
    if not isinstance(v, list) or len(v) != n:
        raise FormatError(f"schema mismatch: {key!r} needs {n} numbers", lineno)
    try:
        return tuple(float(x) for x in v)
    except (TypeError, ValueError):
        raise FormatError(f"non-numeric entry in {key!r}", lineno) from None


def _field(rec, key, lineno):
    if key not in rec:
        raise FormatError(f"schema mismatch: missing {key!r}", lineno)
    return rec[key]


def _ns(v, lineno) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, Decimal, str)):
        raise FormatError("timestamp must be a number", lineno)
    try:
        return seconds_to_ns(str(v))
    except ArithmeticError:
        raise FormatError(f"bad timestamp {v!r}", lineno) from None


def _vec(xs) -> str:
    return "[" + ", ".join(fmt_num(x) for x in xs) + "]"


def read_stream(path) -> MessageStream:
    recs = []
    for lineno, rec in _json_lines(path):
        kind = _field(rec, "kind", lineno)
        t = _ns(_field(rec, "t", lineno), lineno)
        if kind == "imu":
            recs.append(
                ImuRecord(t, _floats(_field(rec, "gyro", lineno), 3, lineno, "gyro"), _floats(_field(rec, "accel", lineno), 3, lineno, "accel"))
            )
        elif kind == "cloud":
            stamps = tuple(_ns(s, lineno) for s in rec.get("point_stamps", []))
            pts = rec.get("points")
            if pts is not None:
                if not isinstance(pts, list) or not pts:
                    pts = ()
                width = len(pts[0]) if pts else 0
                pts = tuple(_floats(row, width, lineno, "points") for row in pts)
            recs.append(CloudRecord(t, stamps, pts, rec.get("payload"), bool(rec.get("reversed", False))))
        elif kind == "pose":
            recs.append(
                PoseRecord(t, _floats(_field(rec, "position", lineno), 3, lineno, "position"), _floats(_field(rec, "quat", lineno), 4, lineno, "quat"))
            )
        else:
            raise FormatError(f"unknown record kind {kind!r}", lineno)
    try:
        return MessageStream(recs)
    except ValueError as e:
        raise FormatError(str(e)) from None


def _stream_line(r) -> str:
    if isinstance(r, ImuRecord):
        return f'{{"kind": "imu", "t": {format_ns(r.t_ns)}, "gyro": {_vec(r.gyro)}, "accel": {_vec(r.accel)}}}'
    if isinstance(r, PoseRecord):
        return f'{{"kind": "pose", "t": {format_ns(r.t_ns)}, "position": {_vec(r.position)}, "quat": {_vec(r.quat)}}}'
    stamps = "[" + ", ".join(format_ns(s) for s in r.point_stamps_ns) + "]"
    pts = "null" if r.points is None else "[" + ", ".join(_vec(row) for row in r.points) + "]"
    return (
        f'{{"kind": "cloud", "t": {format_ns(r.t_ns)}, "point_stamps": {stamps}, "points": {pts}, '
        f'"payload": {json.dumps(r.payload)}, "reversed": {json.dumps(r.reversed)}}}'
    )


def write_stream(path, stream: MessageStream) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in stream:
            fh.write(_stream_line(r) + "\n")


def _pose_of(rec, lineno) -> Pose:
    p = _floats(_field(rec, "p", lineno), 3, lineno, "p")
    q = _floats(rec.get("q", [0, 0, 0, 1]), 4, lineno, "q")
    return Pose(quat_to_matrix(q), p)


def _info_of(rec, dim, lineno):
    if "info" not in rec:
        return np.eye(dim)
    rows = rec["info"]
    if not isinstance(rows, list) or len(rows) != dim:
        raise FormatError(f"schema mismatch: info must be {dim}x{dim}", lineno)
    return np.array([_floats(r, dim, lineno, "info") for r in rows])


def read_graph(path) -> PoseGraph:
    stamps, Rs, ps, edges = [], [], [], []
    frame, estimate, fixed, loss = None, False, set(), {}
    for lineno, rec in _json_lines(path):
        typ = _field(rec, "type", lineno)
        try:
            if typ == "node":
                if int(_field(rec, "id", lineno)) != len(stamps):
                    raise FormatError("node ids must be consecutive from 0", lineno)
                T = _pose_of(rec, lineno)
                stamps.append(float(_field(rec, "t", lineno)))
                Rs.append(T.R)
                ps.append(T.p)
            elif typ == "rel":
                edges.append(RelPoseEdge(int(rec["i"]), int(rec["j"]), _pose_of(rec, lineno), _info_of(rec, 6, lineno)))
            elif typ == "abs_pose":
                edges.append(AbsPoseEdge(int(rec["i"]), _pose_of(rec, lineno), _info_of(rec, 6, lineno)))
            elif typ == "abs_pos":
                p = np.array(_floats(_field(rec, "p", lineno), 3, lineno, "p"))
                edges.append(AbsPosEdge(int(rec["i"]), p, _info_of(rec, 3, lineno)))
            elif typ == "frame":
                frame = _pose_of(rec, lineno)
                estimate = bool(rec.get("estimate", False))
            elif typ == "fixed":
                fixed.add(int(rec["i"]))
            elif typ == "loss":
                loss[str(rec["edge"])] = RobustLoss(str(rec.get("kind", "cauchy")), float(rec.get("scale", 1.0)))
            else:
                raise FormatError(f"unknown record type {typ!r}", lineno)
        except KeyError as e:
            raise FormatError(f"schema mismatch: missing {e.args[0]!r}", lineno) from None
    nodes = Trajectory(stamps, np.array(Rs).reshape(-1, 3, 3), np.array(ps).reshape(-1, 3))
    try:
        return PoseGraph(nodes, edges, frame, estimate, loss, frozenset(fixed))
    except ValueError as e:
        raise FormatError(str(e)) from None


def _pose_fields(T: Pose) -> str:
    return f'"p": {_vec(T.p)}, "q": {_vec(matrix_to_quat(T.R))}'


def _info_field(info) -> str:
    return '"info": [' + ", ".join(_vec(r) for r in np.asarray(info)) + "]"


def write_graph(path, g: PoseGraph) -> None:
    lines = []
    for k, sp in enumerate(g.nodes):
        lines.append(f'{{"type": "node", "id": {k}, "t": {fmt_time(sp.t)}, {_pose_fields(sp.pose)}}}')
    for e in g.edges:
        if isinstance(e, RelPoseEdge):
            lines.append(f'{{"type": "rel", "i": {e.i}, "j": {e.j}, {_pose_fields(e.T)}, {_info_field(e.info)}}}')
        elif isinstance(e, AbsPoseEdge):
            lines.append(f'{{"type": "abs_pose", "i": {e.i}, {_pose_fields(e.T)}, {_info_field(e.info)}}}')
        else:
            lines.append(f'{{"type": "abs_pos", "i": {e.i}, "p": {_vec(e.p)}, {_info_field(e.info)}}}')
    if g.frame_transform is not None or g.estimate_frame:
        T = g.frame_transform or Pose()
        lines.append(f'{{"type": "frame", {_pose_fields(T)}, "estimate": {json.dumps(g.estimate_frame)}}}')
    for k in sorted(g.fixed):
        lines.append(f'{{"type": "fixed", "i": {k}}}')
    for name, lo in g.loss.items():
        lines.append(f'{{"type": "loss", "edge": "{name}", "kind": "{lo.kind}", "scale": {fmt_num(lo.scale)}}}')
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(e.msg, e.lineno, e.colno) from None
