"""Point cloud and mesh file I/O

XYZ: one point per line, three decimal floats separated by single spaces, LF, no header.
PLY (write): binary little-endian, element vertex with float x, y, z.
"""

from pathlib import Path
from typing import Callable, Dict, Union
import logging

import numpy as np
import trimesh

from pcdenoise.config import settings
from pcdenoise.core.errors import DatasetIOError
from pcdenoise.core.geometry import PointCloud

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_PLY_VERTEX = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4")])


def read_xyz(path: PathLike) -> PointCloud:
    """Read an ASCII XYZ file"""
    try:
        points = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as e:
        raise DatasetIOError(str(path), f"cannot parse XYZ: {e}") from e
    if points.shape[1] != 3:
        raise DatasetIOError(str(path), f"expected 3 columns, found {points.shape[1]}")
    return PointCloud(points)


def write_xyz(path: PathLike, cloud: PointCloud) -> None:
    """Write an ASCII XYZ file (round-trip precision for float64)"""
    try:
        np.savetxt(path, cloud.points, fmt="%.17g", delimiter=" ", newline="\n")
    except OSError as e:
        raise DatasetIOError(str(path), str(e)) from e


def write_ply_points(path: PathLike, cloud: PointCloud) -> None:
    """Write a binary little-endian PLY with float32 vertices"""
    vertices = np.empty(cloud.n, dtype=_PLY_VERTEX)
    vertices["x"], vertices["y"], vertices["z"] = cloud.points.astype(np.float32).T
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {cloud.n}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "end_header\n"
    )
    try:
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            f.write(vertices.tobytes())
    except OSError as e:
        raise DatasetIOError(str(path), str(e)) from e


def read_ply_points(path: PathLike) -> PointCloud:
    """Read the vertices of a PLY file (ascii or binary)"""
    try:
        loaded = trimesh.load(str(path), file_type="ply", process=False)
    except Exception as e:
        raise DatasetIOError(str(path), f"cannot parse PLY: {e}") from e
    vertices = np.asarray(getattr(loaded, "vertices", []), dtype=np.float64)
    if vertices.ndim != 2 or vertices.shape[0] == 0:
        raise DatasetIOError(str(path), "PLY file has no vertices")
    return PointCloud(vertices)


_READERS: Dict[str, Callable[[PathLike], PointCloud]] = {".xyz": read_xyz, ".ply": read_ply_points}
_WRITERS: Dict[str, Callable[[PathLike, PointCloud], None]] = {".xyz": write_xyz, ".ply": write_ply_points}


def point_format(path: PathLike) -> str:
    """
    Suffix of a point file, checked against PCD_POINT_SUFFIXES

    Raises:
        DatasetIOError: If the suffix is not accepted or has no reader
    """
    suffix = Path(path).suffix.lower()
    if suffix not in settings.point_suffixes or suffix not in _READERS:
        accepted = ", ".join(s for s in settings.point_suffixes if s in _READERS)
        raise DatasetIOError(str(path), f"unsupported point format '{suffix}' (accepted: {accepted})")
    return suffix


def load_points(path: PathLike) -> PointCloud:
    """Read a point cloud, dispatching on the file suffix"""
    suffix = point_format(path)
    if not Path(path).exists():
        raise DatasetIOError(str(path), "file not found")
    return _READERS[suffix](path)


def save_points(path: PathLike, cloud: PointCloud) -> None:
    """Write a point cloud, dispatching on the file suffix"""
    _WRITERS[point_format(path)](path, cloud)
    logger.debug(f"Wrote {cloud.n} points to {path}")


def load_mesh_arrays(path: PathLike):
    """
    Load vertices and triangles of a mesh file

    Polygons are fan-triangulated by the loader; processing is disabled so vertex
    indexing is kept as written.

    Returns:
        (vertices (V, 3) float64, triangles (F, 3) int64)
    """
    try:
        mesh = trimesh.load(str(path), force="mesh", process=False)
    except Exception as e:
        raise DatasetIOError(str(path), f"cannot load mesh: {e}") from e
    vertices = np.asarray(mesh.vertices, dtype=np.float64)
    triangles = np.asarray(mesh.faces, dtype=np.int64)
    if vertices.size == 0 or triangles.size == 0:
        raise DatasetIOError(str(path), "mesh has no faces")
    return vertices, triangles
