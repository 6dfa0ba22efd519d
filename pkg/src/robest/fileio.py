"""File formats: ASCII PLY clouds, 2D g2o pose graphs, CSV/JSON results."""

from __future__ import annotations

import json
import platform
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .posegraph import EdgeKind, PoseGraph2, PoseGraphEdge, wrap_angle

__all__ = [
    "PlyCloud",
    "G2oGraph2",
    "PlyParseError",
    "G2oParseError",
    "read_ply",
    "downsample_and_box",
    "read_g2o_2d",
    "write_g2o_2d",
    "CSV_HEADER",
    "write_records_csv",
    "read_records_csv",
    "write_manifest_json",
]

CSV_HEADER = "method,outlier_ratio,mc_index,rot_err_deg,trans_err,traj_rmse,iters,wall_ms,stop_reason"

_PLY_FLOAT_TYPES = {"float", "float32", "double", "float64"}


class PlyParseError(ValueError):
    """Malformed, truncated, or unsupported PLY input."""


class G2oParseError(ValueError):
    """Malformed g2o record."""


@dataclass(frozen=True)
class PlyCloud:
    points: np.ndarray
    source_path: str
    original_count: int


@dataclass(frozen=True)
class G2oGraph2:
    """Parsed 2D pose graph plus the raw information matrices per edge."""

    graph: PoseGraph2
    information: tuple[np.ndarray, ...]
    skipped_records: int


def read_ply(path) -> PlyCloud:
    """Read an ASCII PLY point cloud (x, y, z vertex properties).

    Faces and extra vertex properties are ignored. Binary PLY is rejected
    explicitly.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="ascii", errors="strict")
    except UnicodeDecodeError as exc:
        raise PlyParseError(f"{path}: not an ASCII PLY file") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyParseError(f"{path}: missing 'ply' magic line")

    elements: list[tuple[str, int]] = []  # (name, count) in declaration order
    vertex_props: list[tuple[str, str]] = []  # (type, name)
    current_element = None
    header_end = None
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("comment"):
            continue
        if line.startswith("format"):
            if "ascii" not in line.split():
                raise PlyParseError(
                    f"{path}:{lineno}: binary PLY is not supported (ASCII only)"
                )
        elif line.startswith("element"):
            parts = line.split()
            if len(parts) != 3:
                raise PlyParseError(f"{path}:{lineno}: malformed element line")
            try:
                count = int(parts[2])
            except ValueError as exc:
                raise PlyParseError(f"{path}:{lineno}: bad element count") from exc
            current_element = parts[1]
            elements.append((parts[1], count))
        elif line.startswith("property"):
            if current_element == "vertex":
                parts = line.split()
                if parts[1] == "list":
                    raise PlyParseError(
                        f"{path}:{lineno}: list property on vertex element"
                    )
                if len(parts) != 3:
                    raise PlyParseError(f"{path}:{lineno}: malformed property line")
                vertex_props.append((parts[1], parts[2]))
        elif line == "end_header":
            header_end = lineno
            break
    if header_end is None:
        raise PlyParseError(f"{path}: header missing end_header")

    names = [name for _, name in vertex_props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise PlyParseError(f"{path}: vertex element lacks property '{axis}'")
    for prop_type, name in vertex_props:
        if name in ("x", "y", "z") and prop_type not in _PLY_FLOAT_TYPES:
            raise PlyParseError(
                f"{path}: vertex property '{name}' has non-float type '{prop_type}'"
            )
    columns = [names.index(axis) for axis in ("x", "y", "z")]

    body = [
        line.strip()
        for line in lines[header_end:]
        if line.strip() and not line.strip().startswith("comment")
    ]
    cursor = 0
    points = None
    for name, count in elements:
        if len(body) - cursor < count:
            raise PlyParseError(
                f"{path}: element '{name}' declares {count} rows but only "
                f"{len(body) - cursor} remain"
            )
        if name == "vertex":
            rows = np.empty((count, 3))
            for k in range(count):
                tokens = body[cursor + k].split()
                if len(tokens) < len(vertex_props):
                    raise PlyParseError(
                        f"{path}: vertex row {k} has {len(tokens)} fields, "
                        f"expected {len(vertex_props)}"
                    )
                try:
                    rows[k] = [float(tokens[c]) for c in columns]
                except ValueError as exc:
                    raise PlyParseError(
                        f"{path}: vertex row {k} has a non-numeric coordinate"
                    ) from exc
            points = rows
        cursor += count

    if points is None or points.shape[0] < 1:
        raise PlyParseError(f"{path}: no vertex element found")
    if not np.all(np.isfinite(points)):
        raise PlyParseError(f"{path}: non-finite vertex coordinates")
    return PlyCloud(
        points=points, source_path=str(path), original_count=points.shape[0]
    )


def downsample_and_box(
    cloud: PlyCloud, m: int, box_half_width: float, rng: np.random.Generator
) -> np.ndarray:
    """Random subsample (without replacement) then rescale into a cube.

    The axis-aligned bounding box of the subsample is mapped affinely onto
    [-w, w]^3; a degenerate axis collapses to 0.
    """
    points = cloud.points
    if not 1 <= m <= points.shape[0]:
        raise ValueError(f"m={m} out of range for a cloud of {points.shape[0]} points")
    indices = np.sort(rng.choice(points.shape[0], size=m, replace=False))
    sample = points[indices]
    low = sample.min(axis=0)
    high = sample.max(axis=0)
    span = high - low
    scaled = np.zeros_like(sample)
    for axis in range(3):
        if span[axis] > 0:
            scaled[:, axis] = (sample[:, axis] - low[axis]) / span[axis] * (
                2.0 * box_half_width
            ) - box_half_width
    return scaled


def _parse_floats(tokens: Sequence[str], path, lineno: int) -> list[float]:
    try:
        return [float(tok) for tok in tokens]
    except ValueError as exc:
        raise G2oParseError(f"{path}:{lineno}: non-numeric field") from exc


def read_g2o_2d(path) -> G2oGraph2:
    """Read VERTEX_SE2 / EDGE_SE2 records into a pose graph.

    Unknown record types are skipped and counted. Each edge's kappa is the
    rotational diagonal of its information matrix and tau the mean of the
    two translational diagonals. Edges with j = i + 1 are classified as
    odometry, everything else as loop closures.
    """
    path = Path(path)
    vertices: dict[int, tuple[float, float, float]] = {}
    raw_edges: list[tuple[int, int, np.ndarray, float, np.ndarray]] = []
    skipped = 0

    with open(path, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            tag = tokens[0]
            if tag == "VERTEX_SE2":
                if len(tokens) != 5:
                    raise G2oParseError(
                        f"{path}:{lineno}: VERTEX_SE2 needs 4 fields, got {len(tokens) - 1}"
                    )
                vid = int(tokens[1]) if tokens[1].isdigit() else None
                if vid is None:
                    raise G2oParseError(f"{path}:{lineno}: bad vertex id")
                x, y, theta = _parse_floats(tokens[2:], path, lineno)
                vertices[vid] = (x, y, wrap_angle(theta))
            elif tag == "EDGE_SE2":
                if len(tokens) != 12:
                    raise G2oParseError(
                        f"{path}:{lineno}: EDGE_SE2 needs 11 fields, got {len(tokens) - 1}"
                    )
                try:
                    i, j = int(tokens[1]), int(tokens[2])
                except ValueError as exc:
                    raise G2oParseError(f"{path}:{lineno}: bad edge ids") from exc
                dx, dy, dtheta, i11, i12, i13, i22, i23, i33 = _parse_floats(
                    tokens[3:], path, lineno
                )
                info = np.array(
                    [[i11, i12, i13], [i12, i22, i23], [i13, i23, i33]]
                )
                if np.linalg.eigvalsh(info).min() < -1e-9 * max(
                    1.0, abs(info).max()
                ):
                    raise G2oParseError(
                        f"{path}:{lineno}: information matrix is not PSD"
                    )
                raw_edges.append((i, j, np.array([dx, dy]), dtheta, info))
            else:
                skipped += 1

    if skipped:
        warnings.warn(
            f"{path}: skipped {skipped} unsupported g2o record(s)", stacklevel=2
        )
    if not vertices:
        raise G2oParseError(f"{path}: no VERTEX_SE2 records")

    ids = sorted(vertices)
    index = {vid: k for k, vid in enumerate(ids)}
    poses = np.array([vertices[vid] for vid in ids])

    edges = []
    information = []
    for i, j, rel_xy, dtheta, info in raw_edges:
        if i not in index or j not in index:
            raise G2oParseError(f"{path}: edge ({i}, {j}) references unknown vertex")
        kappa = float(info[2, 2])
        tau = float((info[0, 0] + info[1, 1]) / 2.0)
        kind = EdgeKind.ODOMETRY if index[j] == index[i] + 1 else EdgeKind.LOOP_CLOSURE
        edges.append(
            PoseGraphEdge(
                i=index[i],
                j=index[j],
                rel_xy=rel_xy,
                rel_theta=wrap_angle(dtheta),
                kappa=kappa,
                tau=tau,
                kind=kind,
            )
        )
        information.append(info)

    graph = PoseGraph2(vertices=poses, edges=tuple(edges))
    return G2oGraph2(
        graph=graph, information=tuple(information), skipped_records=skipped
    )


def _fmt(value: float) -> str:
    return f"{value:.17g}"


def write_g2o_2d(graph: PoseGraph2, path) -> None:
    """Write VERTEX_SE2 / EDGE_SE2 records (information from kappa/tau)."""
    lines = []
    for vid, (x, y, theta) in enumerate(graph.vertices):
        lines.append(f"VERTEX_SE2 {vid} {_fmt(x)} {_fmt(y)} {_fmt(theta)}")
    for edge in graph.edges:
        tau, kappa = edge.tau, edge.kappa
        lines.append(
            f"EDGE_SE2 {edge.i} {edge.j} {_fmt(edge.rel_xy[0])} {_fmt(edge.rel_xy[1])} "
            f"{_fmt(edge.rel_theta)} {_fmt(tau)} 0 0 {_fmt(tau)} 0 {_fmt(kappa)}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_records_csv(records: Iterable, path) -> None:
    """Write benchmark records under the fixed header.

    Floats carry 17 significant digits so a read-back is bit-exact.
    trajectory RMSE is left empty for runs without one.
    """
    rows = [CSV_HEADER]
    for rec in records:
        rmse = "" if rec.trajectory_rmse is None else _fmt(rec.trajectory_rmse)
        rows.append(
            ",".join(
                [
                    rec.method,
                    _fmt(rec.outlier_ratio),
                    str(rec.mc_index),
                    _fmt(rec.rotation_error_deg),
                    _fmt(rec.translation_error),
                    rmse,
                    str(rec.iterations),
                    _fmt(rec.wall_time_ms),
                    rec.stop_reason,
                ]
            )
        )
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def read_records_csv(path) -> list[dict]:
    """Read back a records CSV into plain dicts (floats parsed)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: unexpected CSV header")
    out = []
    for line in lines[1:]:
        fields = line.split(",")
        out.append(
            {
                "method": fields[0],
                "outlier_ratio": float(fields[1]),
                "mc_index": int(fields[2]),
                "rot_err_deg": float(fields[3]),
                "trans_err": float(fields[4]),
                "traj_rmse": None if fields[5] == "" else float(fields[5]),
                "iters": int(fields[6]),
                "wall_ms": float(fields[7]),
                "stop_reason": fields[8],
            }
        )
    return out


def write_manifest_json(config: dict, path) -> None:
    """Persist the full run configuration plus environment fingerprints."""
    manifest = {
        "config": config,
        "library_version": __version__,
        "environment": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "platform": platform.platform(),
        },
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
