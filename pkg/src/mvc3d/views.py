"""View metadata and image files shared by the renderer and dataset code."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SOURCES = ("rendered", "external", "synthetic")


@dataclass(frozen=True)
class View:
    azimuth: float
    elevation: float
    path: str | None = None
    # In-memory image [H, W, 3] in [0, 1]; takes precedence over ``path``.
    image: np.ndarray | None = field(default=None, compare=False, repr=False)

    def load(self, root: Path | None = None) -> np.ndarray:
        if self.image is not None:
            return self.image
        if self.path is None:
            raise ValueError("view has neither image data nor a path")
        p = Path(self.path)
        if root is not None and not p.is_absolute():
            p = Path(root) / p
        return read_image(p)


@dataclass
class ViewSet:
    object_id: str
    category: str
    views: list[View]
    source: str = "rendered"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        for ring in self.rings().values():
            az = [ring_view.azimuth for ring_view in ring]
            if any(a < 0 or a >= 360 for a in az):
                raise ValueError(f"{self.object_id}: azimuths must lie in [0, 360)")
            if any(b <= a for a, b in zip(az, az[1:])):
                raise ValueError(f"{self.object_id}: azimuths must be strictly increasing within a ring")

    def rings(self) -> dict[float, list[View]]:
        """Views grouped by elevation, in stored order."""
        out: dict[float, list[View]] = {}
        for v in self.views:
            out.setdefault(v.elevation, []).append(v)
        return out


def view_filename(azimuth: float, elevation: float) -> str:
    return f"view_{int(round(azimuth)):03d}_{int(round(elevation))}.ppm"


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6, maxval 255. ``img`` is ``[H, W, 3]`` floats in [0, 1] or uint8."""
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an [H, W, 3] image, got {arr.shape}")
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # a single whitespace byte precedes the raster


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file into ``[H, W, 3]`` floats in [0, 1]."""
    buf = Path(path).read_bytes()
    tokens, pos = _ppm_tokens(buf, 4)
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval <= 0 or maxval > 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    raw = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raw.reshape(h, w, 3).astype(np.float64) / maxval


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
