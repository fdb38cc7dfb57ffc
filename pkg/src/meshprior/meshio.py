"""Mesh and point-cloud file I/O: PLY (ascii + binary), OBJ with UVs, MTL,
PNG textures.

PLY colors may be 8-bit (normalized to [0, 1] on load) or float; writes are
binary little-endian so identical data produces identical bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import PointCloud, TriangleMesh

__all__ = [
    "TexturedMesh",
    "read_ply",
    "write_ply",
    "read_obj",
    "write_obj",
    "read_texture",
    "write_texture",
]


@dataclass(frozen=True)
class TexturedMesh:
    """A mesh with per-face-corner UVs and a texture image in [0, 1]."""

    mesh: TriangleMesh
    corner_uv: np.ndarray  # (F, 3, 2)
    texture: np.ndarray  # (H, W, 3) float in [0, 1]

    def sample_colors(self, face_ids: np.ndarray, barycentric: np.ndarray) -> np.ndarray:
        """Bilinear texture lookup at barycentric points of faces."""
        uv = np.einsum("kc,kcd->kd", barycentric, self.corner_uv[face_ids])
        h, w = self.texture.shape[:2]
        r = np.clip(uv[:, 1] * h - 0.5, 0, h - 1)
        c = np.clip(uv[:, 0] * w - 0.5, 0, w - 1)
        r0 = np.clip(np.floor(r).astype(np.int64), 0, h - 2) if h > 1 else np.zeros(len(r), np.int64)
        c0 = np.clip(np.floor(c).astype(np.int64), 0, w - 2) if w > 1 else np.zeros(len(c), np.int64)
        fr = (r - r0)[:, None]
        fc = (c - c0)[:, None]
        t = self.texture
        return (
            t[r0, c0] * (1 - fr) * (1 - fc)
            + t[r0 + 1, c0] * fr * (1 - fc)
            + t[r0, c0 + 1] * (1 - fr) * fc
            + t[r0 + 1, c0 + 1] * fr * fc
        )


_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "int8": "i1", "uint8": "u1",
    "short": "i2", "ushort": "u2", "int16": "i2", "uint16": "u2",
    "int": "i4", "uint": "u4", "int32": "i4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path) -> PointCloud:
    """Read x,y,z and optional red,green,blue vertex properties."""
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = None
        n_vertices = 0
        properties = []  # (name, dtype) in file order, vertex element only
        in_vertex_element = False
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: unexpected end of header")
            tokens = line.decode("ascii", "replace").strip().split()
            if not tokens:
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                in_vertex_element = tokens[1] == "vertex"
                if in_vertex_element:
                    n_vertices = int(tokens[2])
            elif tokens[0] == "property" and in_vertex_element:
                if tokens[1] == "list":
                    raise ValueError(f"{path}: list property on vertices is unsupported")
                properties.append((tokens[2], _PLY_TYPES[tokens[1]]))
            elif tokens[0] == "end_header":
                break

        names = [name for name, _ in properties]
        if fmt == "ascii":
            rows = []
            for _ in range(n_vertices):
                rows.append(fh.readline().split()[: len(properties)])
            raw = np.array(rows, dtype=np.float64)
            data = {name: raw[:, i] for i, (name, _) in enumerate(properties)}
            scale8 = {name: False for name in names}
            for i, (name, dt) in enumerate(properties):
                scale8[name] = dt == "u1"
        else:
            endian = "<" if fmt == "binary_little_endian" else ">"
            dtype = np.dtype([(name, endian + dt) for name, dt in properties])
            raw = np.frombuffer(fh.read(dtype.itemsize * n_vertices), dtype=dtype, count=n_vertices)
            data = {name: raw[name].astype(np.float64) for name in names}
            scale8 = {name: dt == "u1" for name, dt in properties}

    positions = np.stack([data["x"], data["y"], data["z"]], axis=1)
    colors = None
    if all(k in data for k in ("red", "green", "blue")):
        colors = np.stack([data["red"], data["green"], data["blue"]], axis=1)
        if scale8["red"]:
            colors = colors / 255.0
        colors = np.clip(colors, 0.0, 1.0)
    return PointCloud(positions, colors)


def write_ply(path, cloud: PointCloud, binary: bool = True) -> None:
    path = Path(path)
    has_color = cloud.colors is not None
    header = ["ply", "format binary_little_endian 1.0" if binary else "format ascii 1.0"]
    header.append(f"element vertex {len(cloud)}")
    header += ["property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        pos = cloud.positions.astype("<f4")
        col = np.rint(cloud.colors * 255).astype("u1") if has_color else None
        if binary:
            if has_color:
                for i in range(len(cloud)):
                    fh.write(struct.pack("<fff3B", *pos[i], *col[i]))
            else:
                fh.write(pos.tobytes())
        else:
            for i in range(len(cloud)):
                line = f"{pos[i,0]:.8g} {pos[i,1]:.8g} {pos[i,2]:.8g}"
                if has_color:
                    line += f" {col[i,0]} {col[i,1]} {col[i,2]}"
                fh.write((line + "\n").encode("ascii"))


def read_obj(path):
    """Read an OBJ. Returns (TriangleMesh, corner_uv or None, texture or None).

    The texture comes from the MTL's map_Kd if both files resolve. OBJ's
    bottom-up v coordinate is flipped to this package's top-down convention.
    """
    path = Path(path)
    vertices, uvs, faces, face_uvs = [], [], [], []
    mtl_file = None
    for line in path.read_text().splitlines():
        tokens = line.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        if tokens[0] == "v":
            vertices.append([float(x) for x in tokens[1:4]])
        elif tokens[0] == "vt":
            u, v = float(tokens[1]), float(tokens[2])
            uvs.append([u, 1.0 - v])
        elif tokens[0] == "mtllib":
            mtl_file = tokens[1]
        elif tokens[0] == "f":
            if len(tokens) != 4:
                raise ValueError(f"{path}: only triangular faces are supported")
            vi, ti = [], []
            for tok in tokens[1:]:
                parts = tok.split("/")
                vi.append(int(parts[0]) - 1)
                if len(parts) > 1 and parts[1]:
                    ti.append(int(parts[1]) - 1)
            faces.append(vi)
            if len(ti) == 3:
                face_uvs.append(ti)

    mesh = TriangleMesh(np.array(vertices, dtype=np.float64), np.array(faces, dtype=np.int64))
    corner_uv = None
    if face_uvs and len(face_uvs) == len(faces):
        uvs = np.array(uvs, dtype=np.float64)
        corner_uv = uvs[np.array(face_uvs, dtype=np.int64)]

    texture = None
    if mtl_file is not None:
        mtl_path = path.parent / mtl_file
        if mtl_path.exists():
            for line in mtl_path.read_text().splitlines():
                tokens = line.split()
                if tokens and tokens[0] == "map_Kd":
                    tex_path = path.parent / tokens[-1]
                    if tex_path.exists():
                        texture = read_texture(tex_path)
    return mesh, corner_uv, texture


def write_obj(path, mesh: TriangleMesh, corner_uv=None, texture=None, texture_name=None) -> None:
    """Write an OBJ, optionally with vt records and an MTL + PNG texture."""
    path = Path(path)
    lines = []
    mtl_path = None
    if texture is not None:
        texture_name = texture_name or (path.stem + ".png")
        mtl_path = path.with_suffix(".mtl")
        lines.append(f"mtllib {mtl_path.name}")
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}")
    if corner_uv is not None:
        corner_uv = np.asarray(corner_uv, dtype=np.float64)
        flat = corner_uv.reshape(-1, 2)
        unique_uv, inverse = np.unique(flat.round(9), axis=0, return_inverse=True)
        for u, v in unique_uv:
            lines.append(f"vt {u:.8f} {1.0 - v:.8f}")
        uv_index = inverse.reshape(-1, 3)
        if texture is not None:
            lines.append("usemtl material0")
        for f, t in zip(mesh.faces, uv_index):
            lines.append(f"f {f[0]+1}/{t[0]+1} {f[1]+1}/{t[1]+1} {f[2]+1}/{t[2]+1}")
    else:
        for f in mesh.faces:
            lines.append(f"f {f[0]+1} {f[1]+1} {f[2]+1}")
    path.write_text("\n".join(lines) + "\n")
    if texture is not None:
        mtl_path.write_text(
            "newmtl material0\nKa 1.0 1.0 1.0\nKd 1.0 1.0 1.0\n" f"map_Kd {texture_name}\n"
        )
        write_texture(path.parent / texture_name, texture)


def read_texture(path) -> np.ndarray:
    """PNG/JPG to (H, W, 3) float in [0, 1]."""
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return img / 255.0


def write_texture(path, image: np.ndarray) -> None:
    """(H, W, 3) uint8 or float in [0, 1] to PNG."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(image).save(path, format="PNG")
