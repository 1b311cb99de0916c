"""Multi-view corpora: manifests, contiguous view selection, image cubes
and a procedural synthetic corpus."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from .views import View, ViewSet, read_image

MANIFEST_SCHEMA_VERSION = 1
SYNTH_FAMILY = ("box", "sphere", "cylinder", "cone", "torus")

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "name", "classes", "objects"],
    "properties": {
        "schema_version": {"const": MANIFEST_SCHEMA_VERSION},
        "name": {"type": "string"},
        "classes": {"type": "array", "items": {"type": "string"}, "minItems": 1, "uniqueItems": True},
        "objects": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["object_id", "category", "split", "views"],
                "properties": {
                    "object_id": {"type": "string", "minLength": 1},
                    "category": {"type": "string"},
                    "split": {"type": "string"},
                    "source": {"enum": ["rendered", "external", "synthetic"]},
                    "views": {
                        "type": "array",
                        "minItems": 1,
                        "items": {
                            "type": "object",
                            "required": ["azimuth", "elevation", "path"],
                            "properties": {
                                "azimuth": {"type": "number"},
                                "elevation": {"type": "number"},
                                "path": {"type": "string"},
                            },
                        },
                    },
                },
            },
        },
    },
}


class ManifestError(ValueError):
    pass


def worker_count() -> int:
    """Thread cap from ``MVC3D_THREADS`` (default: CPU count)."""
    env = os.environ.get("MVC3D_THREADS")
    n = int(env) if env else (os.cpu_count() or 1)
    return max(1, n)


@dataclass
class Entry:
    split: str
    viewset: ViewSet

    @property
    def object_id(self) -> str:
        return self.viewset.object_id

    @property
    def category(self) -> str:
        return self.viewset.category


@dataclass
class Manifest:
    name: str
    classes: list[str]
    entries: list[Entry]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        known = set(self.classes)
        for e in self.entries:
            if e.category not in known:
                raise ManifestError(f"object {e.object_id!r} has category {e.category!r} missing from class list")
        self.entries.sort(key=lambda e: e.object_id)

    def split(self, tag: str) -> list[Entry]:
        return [e for e in self.entries if e.split == tag]

    def split_sizes(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out[e.split] = out.get(e.split, 0) + 1
        return dict(sorted(out.items()))

    def label(self, entry: Entry) -> int:
        return self.classes.index(entry.category)

    def to_dict(self) -> dict:
        objects = []
        for e in self.entries:
            vs = e.viewset
            objects.append(
                {
                    "object_id": vs.object_id,
                    "category": vs.category,
                    "split": e.split,
                    "source": vs.source,
                    "views": [{"azimuth": v.azimuth, "elevation": v.elevation, "path": v.path} for v in vs.views],
                }
            )
        return {"schema_version": MANIFEST_SCHEMA_VERSION, "name": self.name, "classes": list(self.classes), "objects": objects}

    def write(self, path) -> None:
        """Canonical JSON (sorted keys, two-space indent). View paths are stored as given."""
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")


def load_manifest(path, check_files: bool = True) -> Manifest:
    """Parse and validate a manifest; relative view paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from None
    try:
        jsonschema.validate(doc, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ManifestError(f"{path}: schema violation at {where}: {exc.message}") from None
    root = path.parent
    entries = []
    for obj in doc["objects"]:
        views = [View(float(v["azimuth"]), float(v["elevation"]), v["path"]) for v in obj["views"]]
        if check_files:
            for v in views:
                p = Path(v.path)
                p = p if p.is_absolute() else root / p
                if not p.exists():
                    raise ManifestError(f"{path}: object {obj['object_id']!r} references missing image {p}")
        try:
            vs = ViewSet(obj["object_id"], obj["category"], views, obj.get("source", "rendered"))
        except ValueError as exc:
            raise ManifestError(f"{path}: {exc}") from None
        entries.append(Entry(obj["split"], vs))
    return Manifest(doc["name"], list(doc["classes"]), entries, root)


# --------------------------------------------------------------------------
# Views and cubes
# --------------------------------------------------------------------------


def ring_stride(ring: Sequence[View]) -> float:
    return 360.0 / len(ring)


def select_contiguous_views(
    vs: ViewSet,
    n: int,
    interval_deg: float,
    start_index: int = 0,
    direction: int = 1,
    elevation: float | None = None,
) -> list[View]:
    """``n`` ring views starting at ``start_index``, ``interval_deg`` apart.

    The arc may wrap past 0 deg. ``direction=-1`` walks the ring the other
    way. Multi-ring view sets need ``elevation`` to pick a ring.
    """
    rings = vs.rings()
    if elevation is None:
        if len(rings) != 1:
            raise ValueError(f"{vs.object_id}: {len(rings)} elevation rings, pass elevation=")
        ring = next(iter(rings.values()))
    else:
        ring = rings.get(float(elevation))
        if ring is None:
            raise ValueError(f"{vs.object_id}: no ring at elevation {elevation}")
    if direction not in (1, -1):
        raise ValueError("direction must be +1 or -1")
    stride = ring_stride(ring)
    step = interval_deg / stride
    if step < 1 or not math.isclose(step, round(step)):
        raise ValueError(f"interval {interval_deg} deg is not a multiple of the ring stride {stride:g} deg")
    step = int(round(step))
    if n < 1 or n * step > len(ring):
        raise ValueError(f"{n} views at {interval_deg} deg need {n * step} ring slots, ring has {len(ring)}")
    return [ring[(start_index + direction * i * step) % len(ring)] for i in range(n)]


@dataclass
class ImageCube:
    data: np.ndarray  # [3, N, H, W] in [0, 1]
    views: list[View]

    @property
    def n_views(self) -> int:
        return self.data.shape[1]

    def view(self, j: int) -> np.ndarray:
        return self.data[:, j].transpose(1, 2, 0)


def _nearest_resize(img: np.ndarray, hw: int) -> np.ndarray:
    h, w = img.shape[:2]
    rows = (np.arange(hw) * h) // hw
    cols = (np.arange(hw) * w) // hw
    return img[rows][:, cols]


def stack_to_cube(views: Sequence[View], target_hw: int = 112, strict: bool = True, root=None) -> ImageCube:
    """Stack view images (RGB, [0, 1]) into a ``[3, N, H, W]`` cube in view order.

    ``strict=False`` (external images) resizes with nearest neighbour;
    strict mode rejects any image that is not ``target_hw`` square.
    """
    if not views:
        raise ValueError("no views to stack")
    imgs = []
    for v in views:
        img = np.asarray(v.load(root), dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"view at azimuth {v.azimuth} is not an RGB image: {img.shape}")
        if img.shape[:2] != (target_hw, target_hw):
            if strict:
                raise ValueError(f"view at azimuth {v.azimuth} is {img.shape[1]}x{img.shape[0]}, expected {target_hw}x{target_hw}")
            img = _nearest_resize(img, target_hw)
        if img.min() < 0 or img.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        imgs.append(img)
    data = np.stack(imgs).transpose(3, 0, 1, 2).copy()
    return ImageCube(data, list(views))


def load_cubes(
    manifest: Manifest,
    split: str | None,
    n_views: int,
    interval_deg: float,
    start_index: int = 0,
    image_size: int = 112,
    strict: bool = True,
    elevation: float | None = None,
) -> tuple[list[np.ndarray], list[int], list[str]]:
    """Cubes, integer labels and object ids for one split (all objects when ``split`` is None)."""
    entries = manifest.entries if split is None else manifest.split(split)
    cubes, labels, ids = [], [], []
    for e in entries:
        views = select_contiguous_views(e.viewset, n_views, interval_deg, start_index, elevation=elevation)
        cubes.append(stack_to_cube(views, image_size, strict, manifest.root).data)
        labels.append(manifest.label(e))
        ids.append(e.object_id)
    return cubes, labels, ids


# --------------------------------------------------------------------------
# Synthetic corpus
# --------------------------------------------------------------------------


def _jittered_mesh(kind: str, rng: np.random.Generator):
    from .render import PRIMITIVES, normalize_mesh, rotation_x, rotation_z

    base = PRIMITIVES[kind]()
    aspect = np.diag([rng.uniform(0.75, 1.25), rng.uniform(0.75, 1.25), rng.uniform(0.7, 1.3)])
    scale = rng.uniform(0.5, 2.0)
    rot = rotation_z(rng.uniform(0.0, 360.0)) @ rotation_x(rng.uniform(-15.0, 15.0))
    return normalize_mesh(base.transformed(scale * rot @ aspect))


def synth_generate(
    out_dir,
    n_classes: int = 4,
    instances: int = 20,
    seed: int = 0,
    image_size: int = 112,
    n_views: int = 36,
    theta_step: float = 10.0,
    phi: float = 30.0,
    test_fraction: float = 0.2,
) -> Manifest:
    """Render a seeded corpus of jittered primitives and write ``manifest.json``.

    Classes are the first ``n_classes`` of box, sphere, cylinder, cone,
    torus. Each class is split into train/test at ``1 - test_fraction``.
    """
    from .render import PhongMaterial, check_rig, render_ring

    if not 2 <= n_classes <= len(SYNTH_FAMILY):
        raise ValueError(f"need between 2 and {len(SYNTH_FAMILY)} classes, got {n_classes}")
    if instances < 2:
        raise ValueError("need at least two instances per class")
    check_rig(n_views, theta_step)
    root = Path(out_dir)
    classes = list(SYNTH_FAMILY[:n_classes])
    jobs = []
    for ci, kind in enumerate(classes):
        rng = np.random.default_rng([seed, ci])
        n_test = max(1, int(round(instances * test_fraction)))
        test_ids = set(rng.permutation(instances)[:n_test].tolist())
        for k in range(instances):
            split = "test" if k in test_ids else "train"
            jobs.append((ci, kind, k, split))

    def run(job):
        ci, kind, k, split = job
        rng = np.random.default_rng([seed, ci, k])
        mesh = _jittered_mesh(kind, rng)
        oid = f"{kind}_{k:04d}"
        obj_dir = root / kind / split / oid
        vs = render_ring(mesh, n_views, theta_step, phi, PhongMaterial(), obj_dir, image_size, oid, kind, source="synthetic")
        rel = [View(v.azimuth, v.elevation, Path(v.path).relative_to(root).as_posix()) for v in vs.views]
        return Entry(split, ViewSet(oid, kind, rel, "synthetic"))

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        entries = list(pool.map(run, jobs))
    manifest = Manifest(f"synthetic-{n_classes}x{instances}-seed{seed}", classes, entries, root)
    root.mkdir(parents=True, exist_ok=True)
    manifest.write(root / "manifest.json")
    return manifest


def class_separability(manifest: Manifest, n_probe: int = 10, view_index: int = 0, seed: int = 0) -> tuple[float, float]:
    """(mean intra-class, mean inter-class) pixel MSE over ``n_probe`` objects per class."""
    rng = np.random.default_rng(seed)
    per_class = {}
    for c in manifest.classes:
        members = [e for e in manifest.entries if e.category == c]
        pick = rng.permutation(len(members))[:n_probe]
        per_class[c] = [members[i].viewset.views[view_index].load(manifest.root) for i in pick]
    intra, inter = [], []
    names = list(per_class)
    for i, a in enumerate(names):
        imgs = per_class[a]
        for x in range(len(imgs)):
            for y in range(x + 1, len(imgs)):
                intra.append(np.mean((imgs[x] - imgs[y]) ** 2))
        for b in names[i + 1 :]:
            for p in imgs:
                for q in per_class[b]:
                    inter.append(np.mean((p - q) ** 2))
    return float(np.mean(intra)), float(np.mean(inter))
