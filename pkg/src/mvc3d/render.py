"""OFF meshes, procedural primitives and a Phong-shaded z-buffer rasterizer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .views import View, ViewSet, view_filename, write_ppm

RING_VIEWS = 36
RING_STEP = 10.0
RING_ELEVATION = 30.0


class OffParseError(ValueError):
    pass


@dataclass
class Mesh:
    vertices: np.ndarray  # [n, 3]
    faces: np.ndarray  # [m, 3] triangle indices
    normals: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.isfinite(self.vertices).all():
            raise ValueError("mesh has non-finite vertex coordinates")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        cross = self._cross()
        area2 = np.linalg.norm(cross, axis=1)
        keep = area2 > 1e-12
        if not keep.all():
            self.faces, cross, area2 = self.faces[keep], cross[keep], area2[keep]
        self.normals = cross / area2[:, None] if len(self.faces) else np.zeros((0, 3))

    def _cross(self) -> np.ndarray:
        if not len(self.faces):
            return np.zeros((0, 3))
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return np.cross(b - a, c - a)

    @classmethod
    def from_polygons(cls, vertices, polygons: Sequence[Sequence[int]]) -> "Mesh":
        """Fan-triangulate polygons (``[i0, i1, …]``) and drop degenerate triangles."""
        tris = [(p[0], p[k], p[k + 1]) for p in polygons for k in range(1, len(p) - 1)]
        return cls(vertices, np.array(tris, dtype=np.int64).reshape(-1, 3))

    @property
    def empty(self) -> bool:
        return len(self.faces) == 0

    def transformed(self, matrix: np.ndarray, offset=(0.0, 0.0, 0.0)) -> "Mesh":
        return Mesh(self.vertices @ np.asarray(matrix).T + np.asarray(offset), self.faces.copy())

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.vertices, axis=1).max()) if len(self.vertices) else 0.0


def rotation_z(degrees: float) -> np.ndarray:
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_x(degrees: float) -> np.ndarray:
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


# --------------------------------------------------------------------------
# OFF files
# --------------------------------------------------------------------------


def _off_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def parse_off(text: str, source: str = "<string>") -> Mesh:
    lines = _off_lines(text)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise OffParseError(f"{source}: empty file, expected OFF header") from None
    if not header.startswith("OFF"):
        raise OffParseError(f"{source}:{lineno}: expected 'OFF' header, got {header[:20]!r}")
    rest = header[3:].split()  # some files put the counts on the header line
    if not rest:
        try:
            lineno, counts_line = next(lines)
        except StopIteration:
            raise OffParseError(f"{source}:{lineno}: missing vertex/face counts") from None
        rest = counts_line.split()
    try:
        n_vert, n_face = int(rest[0]), int(rest[1])
    except (ValueError, IndexError):
        raise OffParseError(f"{source}:{lineno}: malformed counts line {' '.join(rest)!r}") from None

    verts = np.empty((n_vert, 3))
    for i in range(n_vert):
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise OffParseError(f"{source}: file ends after {i} of {n_vert} vertices") from None
        parts = line.split()
        try:
            verts[i] = [float(p) for p in parts[:3]]
        except ValueError:
            raise OffParseError(f"{source}:{lineno}: bad vertex {line!r}") from None
        if len(parts) < 3:
            raise OffParseError(f"{source}:{lineno}: vertex needs 3 coordinates")

    polys = []
    for i in range(n_face):
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise OffParseError(f"{source}: file ends after {i} of {n_face} faces") from None
        try:
            parts = [int(p) for p in line.split()]
        except ValueError:
            raise OffParseError(f"{source}:{lineno}: bad face {line!r}") from None
        if not parts or len(parts) < parts[0] + 1 or parts[0] < 3:
            raise OffParseError(f"{source}:{lineno}: face vertex count does not match indices")
        idx = parts[1 : parts[0] + 1]
        bad = [j for j in idx if j < 0 or j >= n_vert]
        if bad:
            raise OffParseError(f"{source}:{lineno}: vertex index {bad[0]} out of range [0, {n_vert})")
        polys.append(idx)
    return Mesh.from_polygons(verts, polys)


def load_off(path) -> Mesh:
    path = Path(path)
    return parse_off(path.read_text(), str(path))


def write_off(mesh: Mesh, path) -> None:
    lines = ["OFF", f"{len(mesh.vertices)} {len(mesh.faces)} 0"]
    lines += [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    lines += ["3 " + " ".join(str(int(i)) for i in f) for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def normalize_mesh(mesh: Mesh) -> Mesh:
    """Center the bounding box at the origin and scale its largest half-extent to 1."""
    if not len(mesh.vertices):
        raise ValueError("cannot normalize an empty mesh")
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    half = float((hi - lo).max()) / 2.0
    if half <= 0:
        raise ValueError("mesh has zero extent")
    return Mesh((mesh.vertices - (lo + hi) / 2.0) / half, mesh.faces.copy())


# --------------------------------------------------------------------------
# Primitives (z-up)
# --------------------------------------------------------------------------


def box_mesh(sx: float = 1.0, sy: float = 1.0, sz: float = 1.0) -> Mesh:
    v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)
    v *= np.array([sx, sy, sz])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    return Mesh.from_polygons(v, quads)


def _revolve(profile: Sequence[tuple[float, float]], segments: int) -> Mesh:
    """Surface of revolution about z from ``(radius, z)`` samples (top to bottom)."""
    verts, faces = [], []
    ring_ids = []
    for r, z in profile:
        if r == 0.0:
            ring_ids.append([len(verts)] * segments)
            verts.append((0.0, 0.0, z))
            continue
        ids = []
        for k in range(segments):
            t = 2 * math.pi * k / segments
            ids.append(len(verts))
            verts.append((r * math.cos(t), r * math.sin(t), z))
        ring_ids.append(ids)
    for a, b in zip(ring_ids[:-1], ring_ids[1:]):
        for k in range(segments):
            k2 = (k + 1) % segments
            faces.append((a[k], b[k], b[k2]))
            faces.append((a[k], b[k2], a[k2]))
    return Mesh(np.array(verts), np.array(faces))


def sphere_mesh(segments: int = 36, rings: int = 18) -> Mesh:
    profile = [(math.sin(math.pi * i / rings), math.cos(math.pi * i / rings)) for i in range(rings + 1)]
    profile[0], profile[-1] = (0.0, 1.0), (0.0, -1.0)
    return _revolve(profile, segments)


def cylinder_mesh(segments: int = 36, radius: float = 1.0, height: float = 2.0) -> Mesh:
    h = height / 2
    return _revolve([(0.0, h), (radius, h), (radius, -h), (0.0, -h)], segments)


def cone_mesh(segments: int = 36, radius: float = 1.0, height: float = 2.0) -> Mesh:
    h = height / 2
    return _revolve([(0.0, h), (radius, -h), (0.0, -h)], segments)


def torus_mesh(segments: int = 36, tube_segments: int = 12, major: float = 1.0, minor: float = 0.35) -> Mesh:
    verts, faces = [], []
    for i in range(segments):
        u = 2 * math.pi * i / segments
        for j in range(tube_segments):
            v = 2 * math.pi * j / tube_segments
            r = major + minor * math.cos(v)
            verts.append((r * math.cos(u), r * math.sin(u), minor * math.sin(v)))
    for i in range(segments):
        for j in range(tube_segments):
            a = i * tube_segments + j
            b = ((i + 1) % segments) * tube_segments + j
            c = ((i + 1) % segments) * tube_segments + (j + 1) % tube_segments
            d = i * tube_segments + (j + 1) % tube_segments
            faces += [(a, b, c), (a, c, d)]
    return Mesh(np.array(verts), np.array(faces))


PRIMITIVES = {"box": box_mesh, "sphere": sphere_mesh, "cylinder": cylinder_mesh, "cone": cone_mesh, "torus": torus_mesh}


# --------------------------------------------------------------------------
# Camera, material, rasterizer
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Camera:
    """Orbit camera looking at the origin with z up.

    ``distance`` is in multiples of the mesh's bounding radius.
    """

    azimuth: float = 0.0
    elevation: float = RING_ELEVATION
    distance: float = 4.0
    fov: float = 40.0

    def __post_init__(self):
        if self.distance <= 0:
            raise ValueError("camera distance must be positive")
        if not -90.0 < self.elevation < 90.0:
            raise ValueError("elevation must lie in (-90, 90)")

    def frame(self, radius: float) -> tuple[np.ndarray, np.ndarray]:
        """Camera position and the world-to-view rotation (rows: right, up, forward)."""
        th, ph = math.radians(self.azimuth), math.radians(self.elevation)
        d = self.distance * radius
        pos = d * np.array([math.cos(ph) * math.cos(th), math.cos(ph) * math.sin(th), math.sin(ph)])
        fwd = -pos / np.linalg.norm(pos)
        right = np.cross(fwd, [0.0, 0.0, 1.0])
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return pos, np.stack([right, up, fwd])


@dataclass(frozen=True)
class PhongMaterial:
    ambient: float = 0.15
    diffuse: float = 0.65
    specular: float = 0.15
    shininess: float = 16.0
    ambient_intensity: float = 1.0
    diffuse_intensity: float = 1.0
    specular_intensity: float = 1.0

    def __post_init__(self):
        for name in ("ambient", "diffuse", "specular"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} coefficient must be in [0, 1]")
        if self.shininess <= 0:
            raise ValueError("shininess must be positive")

    def shade(self, n_dot_l: np.ndarray, r_dot_v: np.ndarray) -> np.ndarray:
        i = (
            self.ambient * self.ambient_intensity
            + self.diffuse * np.maximum(0.0, n_dot_l) * self.diffuse_intensity
            + self.specular * np.maximum(0.0, r_dot_v) ** self.shininess * self.specular_intensity
        )
        return np.clip(i, 0.0, 1.0)


BACKGROUND = 1.0
NEAR = 1e-3


def render_view(
    mesh: Mesh,
    cam: Camera = Camera(),
    mat: PhongMaterial = PhongMaterial(),
    size: int = 112,
    background: float = BACKGROUND,
    radius: float | None = None,
) -> np.ndarray:
    """Rasterize ``mesh`` into a ``[3, size, size]`` image in [0, 1].

    Flat shading with a directional light along the viewing axis; the
    nearest surface wins per pixel (ties go to the lower face index).
    """
    img = np.full((size, size), float(background))
    if mesh.empty:
        return np.repeat(img[None], 3, axis=0)
    radius = mesh.bounding_radius() if radius is None else radius
    pos, rot = cam.frame(radius)
    view = (mesh.vertices - pos) @ rot.T  # x right, y up, z depth
    tri = view[mesh.faces]  # [T, 3, 3]
    z = tri[:, :, 2]
    keep = (z > NEAR).all(axis=1)

    focal = 1.0 / math.tan(math.radians(cam.fov) / 2)
    sx = (focal * tri[:, :, 0] / np.where(keep[:, None], z, 1.0) + 1.0) * (size / 2)
    sy = (1.0 - focal * tri[:, :, 1] / np.where(keep[:, None], z, 1.0)) * (size / 2)
    area = (sx[:, 1] - sx[:, 0]) * (sy[:, 2] - sy[:, 0]) - (sx[:, 2] - sx[:, 0]) * (sy[:, 1] - sy[:, 0])
    keep &= np.abs(area) > 1e-12

    x0 = np.clip(np.ceil(sx.min(axis=1) - 0.5), 0, size).astype(np.int64)
    x1 = np.clip(np.floor(sx.max(axis=1) - 0.5), -1, size - 1).astype(np.int64)
    y0 = np.clip(np.ceil(sy.min(axis=1) - 0.5), 0, size).astype(np.int64)
    y1 = np.clip(np.floor(sy.max(axis=1) - 0.5), -1, size - 1).astype(np.int64)
    w = np.where(keep, np.maximum(0, x1 - x0 + 1), 0)
    h = np.where(keep, np.maximum(0, y1 - y0 + 1), 0)
    counts = w * h
    total = int(counts.sum())
    if total == 0:
        return np.repeat(img[None], 3, axis=0)

    # One fragment per (triangle, bounding-box pixel).
    fid = np.repeat(np.arange(len(counts)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    px = x0[fid] + local % w[fid]
    py = y0[fid] + local // w[fid]
    cx, cy = px + 0.5, py + 0.5
    X, Y = sx[fid], sy[fid]

    def edge(i, j):
        return (X[:, j] - X[:, i]) * (cy - Y[:, i]) - (Y[:, j] - Y[:, i]) * (cx - X[:, i])

    a = area[fid]
    b0, b1, b2 = edge(1, 2) / a, edge(2, 0) / a, edge(0, 1) / a
    inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
    fid, px, py = fid[inside], px[inside], py[inside]
    Z = z[fid]
    inv_depth = b0[inside] / Z[:, 0] + b1[inside] / Z[:, 1] + b2[inside] / Z[:, 2]

    pix = py * size + px
    order = np.lexsort((fid, -inv_depth, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win_pix, win_face = pix_sorted[first], fid[order][first]

    # Headlight: light and eye both along -forward.
    to_eye = -rot[2]
    n = mesh.normals
    n_dot_e = n @ to_eye
    n = np.where(n_dot_e[:, None] < 0, -n, n)  # two-sided
    n_dot_l = np.abs(n_dot_e)
    r_dot_v = 2.0 * n_dot_l * n_dot_l - 1.0
    face_intensity = mat.shade(n_dot_l, r_dot_v)

    flat = img.reshape(-1)
    flat[win_pix] = face_intensity[win_face]
    return np.repeat(img[None], 3, axis=0)


def check_rig(n_views: int, theta_step: float) -> None:
    if n_views < 1 or not math.isclose(n_views * theta_step, 360.0):
        raise ValueError(f"ring must close: {n_views} views x {theta_step} deg != 360 deg")


def ring_azimuths(n_views: int = RING_VIEWS, theta_step: float = RING_STEP) -> list[float]:
    check_rig(n_views, theta_step)
    return [k * theta_step for k in range(n_views)]


def render_ring(
    mesh: Mesh,
    n_views: int = RING_VIEWS,
    theta_step: float = RING_STEP,
    phi: float = RING_ELEVATION,
    mat: PhongMaterial = PhongMaterial(),
    out_dir=None,
    size: int = 112,
    object_id: str = "object",
    category: str = "unknown",
    camera: Camera = Camera(),
    source: str = "rendered",
) -> ViewSet:
    """Render the azimuth ring at constant elevation and distance.

    With ``out_dir`` each view is written as ``view_<az>_<el>.ppm`` and the
    ViewSet refers to those files; otherwise images are kept in memory.
    """
    azimuths = ring_azimuths(n_views, theta_step)
    radius = mesh.bounding_radius()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    views = []
    for az in azimuths:
        cam = Camera(az, phi, camera.distance, camera.fov)
        img = render_view(mesh, cam, mat, size, radius=radius).transpose(1, 2, 0)
        if out is not None:
            path = out / view_filename(az, phi)
            write_ppm(path, img)
            views.append(View(az, phi, str(path)))
        else:
            views.append(View(az, phi, None, img))
    return ViewSet(object_id, category, views, source)
