"""Triangle-mesh extraction from the signed distance volume and file export.

Extraction runs marching cubes over the dense bounding box of the allocated
blocks, restricted to cubes whose eight corners all carry weight. Exports are
binary little-endian PLY (positions, per-vertex colors, triangle indices) and
OBJ (positions and faces). Both writers are byte-deterministic for a given
volume.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage import measure

from .tsdf import BLOCK_SIZE, TsdfVolume

# Refuse to densify beyond this many voxels; desk-scale scenes stay far below.
_MAX_DENSE_VOXELS = 600_000_000


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float32, meters
    faces: np.ndarray  # (F, 3) int32
    colors: np.ndarray = field(default=None)  # (V, 3) uint8

    def __post_init__(self):
        if self.colors is None:
            self.colors = np.full((self.vertices.shape[0], 3), 200, dtype=np.uint8)

    @property
    def empty(self):
        return self.vertices.shape[0] == 0


def _empty_mesh():
    return TriangleMesh(
        np.zeros((0, 3), np.float32), np.zeros((0, 3), np.int32), np.zeros((0, 3), np.uint8)
    )


def extract_mesh(volume: TsdfVolume) -> TriangleMesh:
    """Marching cubes over occupied voxels, with interpolated vertex colors."""
    coords = volume.sorted_coords()
    if not coords:
        return _empty_mesh()
    coords_arr = np.array(coords, dtype=np.int64)
    lo = coords_arr.min(axis=0)
    hi = coords_arr.max(axis=0) + 1
    shape = tuple((hi - lo) * BLOCK_SIZE)
    if int(np.prod(shape)) > _MAX_DENSE_VOXELS:
        raise MemoryError(
            "volume bounding box too large for dense extraction; "
            "use a coarser voxel size"
        )

    distance = np.full(shape, volume.truncation, dtype=np.float32)
    mask = np.zeros(shape, dtype=bool)
    color = np.zeros(shape + (3,), dtype=np.uint8)
    for coord in coords:
        block = volume.blocks[coord]
        origin = (np.array(coord) - lo) * BLOCK_SIZE
        sl = tuple(slice(int(o), int(o) + BLOCK_SIZE) for o in origin)
        w = block.weight.reshape(BLOCK_SIZE, BLOCK_SIZE, BLOCK_SIZE)
        occupied = w > 0
        d = np.full_like(w, volume.truncation)
        d[occupied] = (
            block.wdist.reshape(w.shape)[occupied] / w[occupied]
        )
        distance[sl] = d
        mask[sl] = occupied
        c = np.zeros(w.shape + (3,), np.float32)
        c[occupied] = block.wcolor.reshape(w.shape + (3,))[occupied] / w[occupied][:, None]
        color[sl] = np.clip(c, 0, 255).astype(np.uint8)

    try:
        verts, faces, _, _ = measure.marching_cubes(distance, level=0.0, mask=mask)
    except (ValueError, RuntimeError):
        return _empty_mesh()
    if verts.shape[0] == 0:
        return _empty_mesh()

    sampled = np.stack(
        [ndimage.map_coordinates(color[..., ch].astype(np.float32), verts.T, order=1)
         for ch in range(3)],
        axis=1,
    )
    world = (verts + 0.5) * volume.voxel_size + lo * volume.block_extent
    return TriangleMesh(
        world.astype(np.float32),
        faces.astype(np.int32),
        np.clip(np.round(sampled), 0, 255).astype(np.uint8),
    )


def write_ply(path, mesh: TriangleMesh):
    """Binary little-endian PLY with positions, colors and triangle indices."""
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {mesh.vertices.shape[0]}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        f"element face {mesh.faces.shape[0]}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for vertex, color in zip(mesh.vertices, mesh.colors):
            fh.write(struct.pack("<fff", *map(float, vertex)))
            fh.write(struct.pack("<BBB", *map(int, color)))
        for face in mesh.faces:
            fh.write(struct.pack("<Biii", 3, *map(int, face)))


def read_ply(path) -> TriangleMesh:
    """Read meshes produced by write_ply (used by tests)."""
    with open(path, "rb") as fh:
        line = fh.readline()
        assert line.strip() == b"ply"
        n_vertices = n_faces = 0
        while True:
            line = fh.readline().decode("ascii").strip()
            if line.startswith("element vertex"):
                n_vertices = int(line.split()[-1])
            elif line.startswith("element face"):
                n_faces = int(line.split()[-1])
            elif line == "end_header":
                break
        vertices = np.empty((n_vertices, 3), np.float32)
        colors = np.empty((n_vertices, 3), np.uint8)
        for i in range(n_vertices):
            vertices[i] = struct.unpack("<fff", fh.read(12))
            colors[i] = struct.unpack("<BBB", fh.read(3))
        faces = np.empty((n_faces, 3), np.int32)
        for i in range(n_faces):
            count, a, b, c = struct.unpack("<Biii", fh.read(13))
            assert count == 3
            faces[i] = (a, b, c)
    return TriangleMesh(vertices, faces, colors)


def write_obj(path, mesh: TriangleMesh):
    """OBJ with vertex positions and 1-based triangular faces."""
    with open(path, "w") as fh:
        for vertex in mesh.vertices:
            fh.write(f"v {vertex[0]:.6f} {vertex[1]:.6f} {vertex[2]:.6f}\n")
        for face in mesh.faces:
            fh.write(f"f {face[0] + 1} {face[1] + 1} {face[2] + 1}\n")
