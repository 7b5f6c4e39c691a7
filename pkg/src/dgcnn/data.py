"""Point-cloud ingestion, mesh sampling, normalization and synthetic datasets."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, ParameterError, ParseError


@dataclass
class LabeledCloud:
    points: np.ndarray
    class_label: int | None = None
    point_labels: np.ndarray | None = None
    category: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2:
            raise DataError(f"points must be [n, F], got {self.points.shape}")
        if self.point_labels is not None:
            self.point_labels = np.asarray(self.point_labels, dtype=np.int64)
            if self.point_labels.shape != (self.points.shape[0],):
                raise DataError(f"{self.point_labels.shape[0]} point labels for {self.points.shape[0]} points")

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass
class Dataset:
    clouds: list[LabeledCloud]
    split: str = "train"
    metadata: dict = field(default_factory=dict)
    class_names: list[str] = field(default_factory=list)
    part_sets: dict[int, list[int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.clouds)

    def __getitem__(self, i: int) -> LabeledCloud:
        return self.clouds[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.class_label for c in self.clouds], dtype=np.int64)

    def subset(self, indices: Sequence[int], split: str | None = None) -> "Dataset":
        return Dataset([self.clouds[i] for i in indices], split or self.split, dict(self.metadata),
                       list(self.class_names), dict(self.part_sets))


# ----------------------------------------------------------------------------
# file formats


def load_off_mesh(path) -> tuple[np.ndarray, np.ndarray]:
    """Vertices ``[V, 3]`` and triangles ``[T, 3]``; polygons are fan-triangulated.

    Accepts the common variant where the counts follow ``OFF`` on the same line.
    """
    path = str(path)
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.read().splitlines()
    lines = [(i + 1, ln.split("#", 1)[0].strip()) for i, ln in enumerate(raw)]
    lines = [(no, ln) for no, ln in lines if ln]
    if not lines or not lines[0][1].startswith("OFF"):
        raise ParseError("missing OFF header", line=lines[0][0] if lines else 1, path=path)
    head_no, head = lines[0]
    rest = lines[1:]
    tail = head[3:].split()
    if tail:
        counts_no, counts = head_no, tail
    else:
        if not rest:
            raise ParseError("missing counts line", line=head_no + 1, path=path)
        counts_no, counts = rest[0][0], rest[0][1].split()
        rest = rest[1:]
    try:
        nv, nf = int(counts[0]), int(counts[1])
    except (IndexError, ValueError):
        raise ParseError("counts line must hold vertex and face counts", line=counts_no, path=path) from None
    if len(rest) < nv + nf:
        missing_at = rest[-1][0] + 1 if rest else counts_no + 1
        raise ParseError(f"file ends early: expected {nv} vertices and {nf} faces", line=missing_at, path=path)
    verts = np.empty((nv, 3))
    for i in range(nv):
        no, ln = rest[i]
        parts = ln.split()
        try:
            verts[i] = [float(v) for v in parts[:3]]
        except ValueError:
            raise ParseError("bad vertex coordinates", line=no, path=path) from None
        if len(parts) < 3:
            raise ParseError("vertex needs three coordinates", line=no, path=path)
    tris = []
    for i in range(nf):
        no, ln = rest[nv + i]
        try:
            parts = [int(v) for v in ln.split()]
        except ValueError:
            raise ParseError("bad face indices", line=no, path=path) from None
        if not parts or parts[0] < 3 or len(parts) < parts[0] + 1:
            raise ParseError("face needs a vertex count >= 3 followed by that many indices", line=no, path=path)
        poly = parts[1 : parts[0] + 1]
        if min(poly) < 0 or max(poly) >= nv:
            raise ParseError(f"face index out of range [0, {nv})", line=no, path=path)
        for j in range(1, len(poly) - 1):
            tris.append((poly[0], poly[j], poly[j + 1]))
    return verts, np.array(tris, dtype=np.int64).reshape(-1, 3)


def write_off_mesh(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"OFF\n{len(vertices)} {len(faces)} 0\n")
        for v in vertices:
            fh.write(" ".join(repr(float(c)) for c in v) + "\n")
        for f in faces:
            fh.write(f"{len(f)} " + " ".join(str(int(i)) for i in f) + "\n")


def load_xyz(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Whitespace-delimited ``x y z [label]`` rows."""
    rows, labels = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for no, ln in enumerate(fh, start=1):
            ln = ln.split("#", 1)[0].strip()
            if not ln:
                continue
            parts = ln.split()
            if len(parts) not in (3, 4):
                raise ParseError(f"expected 3 or 4 columns, got {len(parts)}", line=no, path=str(path))
            try:
                rows.append([float(v) for v in parts[:3]])
                if len(parts) == 4:
                    labels.append(int(parts[3]))
            except ValueError:
                raise ParseError("non-numeric field", line=no, path=str(path)) from None
    if labels and len(labels) != len(rows):
        raise ParseError("labels present on some rows only", path=str(path))
    return np.array(rows).reshape(-1, 3), (np.array(labels, dtype=np.int64) if labels else None)


# ----------------------------------------------------------------------------
# sampling and normalization


def triangle_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_mesh(vertices, faces, n: int, rng: np.random.Generator, return_faces: bool = False):
    """``n`` points uniform over the surface: area-weighted face choice, then barycentric."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    areas = triangle_areas(vertices, faces) if len(faces) else np.zeros(0)
    total = areas.sum()
    if not total > 0:
        raise DataError("mesh has no face with positive area")
    chosen = rng.choice(len(faces), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    fold = u + v > 1.0
    u[fold], v[fold] = 1.0 - u[fold], 1.0 - v[fold]
    a, b, c = (vertices[faces[chosen, i]] for i in range(3))
    pts = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    return (pts, chosen) if return_faces else pts


def normalize_unit_sphere(points) -> tuple[np.ndarray, np.ndarray, float]:
    """Center at the centroid and scale so the farthest point has norm 1."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise DataError(f"need a non-empty [n, 3] cloud, got shape {pts.shape}")
    center = pts.mean(axis=0)
    centered = pts - center
    radius = float(np.sqrt((centered * centered).sum(axis=1)).max())
    if not radius > 0:
        raise DataError("all points coincide; cannot normalize scale")
    out = centered / radius
    # Division can leave the farthest norm an ulp away from 1; rescale that once more.
    far = float(np.sqrt((out * out).sum(axis=1)).max())
    if far != 1.0:
        out = out / far
    return out, center, radius


# ----------------------------------------------------------------------------
# synthetic generators


def _unit_vectors(n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube_mesh() -> tuple[np.ndarray, np.ndarray]:
    verts = np.array([[x, y, z] for x in (-1.0, 1.0) for y in (-1.0, 1.0) for z in (-1.0, 1.0)])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = [(q[0], q[i], q[i + 1]) for q in quads for i in (1, 2)]
    return verts, np.array(faces)


def gen_sphere(n: int, rng: np.random.Generator, noise: float = 0.0) -> np.ndarray:
    pts = _unit_vectors(n, rng)
    return pts + noise * rng.normal(size=pts.shape) if noise else pts


def gen_cube(n: int, rng: np.random.Generator, noise: float = 0.0) -> np.ndarray:
    verts, faces = _cube_mesh()
    pts = sample_mesh(verts, faces, n, rng)
    return pts + noise * rng.normal(size=pts.shape) if noise else pts


def gen_cylinder(n: int, rng: np.random.Generator, noise: float = 0.0) -> np.ndarray:
    """Closed cylinder, radius 1 and height 2, sampled uniformly by area."""
    side_area, cap_area = 2 * np.pi * 2.0, np.pi
    on_side = rng.random(n) < side_area / (side_area + 2 * cap_area)
    theta = rng.uniform(0, 2 * np.pi, n)
    r = np.where(on_side, 1.0, np.sqrt(rng.random(n)))
    z = np.where(on_side, rng.uniform(-1, 1, n), np.where(rng.random(n) < 0.5, -1.0, 1.0))
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    return pts + noise * rng.normal(size=pts.shape) if noise else pts


def gen_plane(n: int, rng: np.random.Generator, noise: float = 0.0) -> np.ndarray:
    pts = np.column_stack([rng.uniform(-1, 1, (n, 2)), np.zeros(n)])
    return pts + noise * rng.normal(size=pts.shape) if noise else pts


def _smooth_field(dirs: np.ndarray, rng: np.random.Generator, frequency: float, terms: int = 8) -> np.ndarray:
    w = _unit_vectors(terms, rng) * frequency
    phase = rng.uniform(0, 2 * np.pi, terms)
    return np.cos(dirs @ w.T + phase).sum(axis=1)


def _textured_sphere(n: int, rng: np.random.Generator, amplitude: float, frequency: float,
                     scramble: float) -> np.ndarray:
    """Sphere whose radii come from one shared multiset, placed by field rank.

    Both texture classes draw the same kind of radius multiset and the same
    low-frequency field; only ``scramble`` (white noise added before ranking)
    differs. Per-point radius statistics are therefore identical, and the
    classes differ in how similar neighboring radii are.
    """
    dirs = _unit_vectors(n, rng)
    radii = np.sort(1.0 + amplitude * np.clip(rng.normal(size=n), -2.5, 2.5))
    field_ = _smooth_field(dirs, rng, frequency)
    field_ = field_ / (field_.std() + 1e-12)
    if scramble:
        field_ = field_ + scramble * rng.normal(size=n)
    ranks = np.argsort(np.argsort(field_, kind="stable"), kind="stable")
    return dirs * radii[ranks][:, None]


GENERATORS = ("sphere", "cube", "cylinder", "plane", "smooth_sphere", "bumpy_sphere")


@dataclass
class SynthSpec:
    """Synthetic dataset recipe; ``classes`` lists generator names in label order."""

    classes: tuple[str, ...] = ("cube", "cylinder", "smooth_sphere", "bumpy_sphere")
    train_per_class: int = 100
    test_per_class: int = 25
    points: int = 256
    noise: float = 0.01
    texture_amplitude: float = 0.08
    texture_frequency: float = 3.0
    texture_scramble: float = 3.0

    def __post_init__(self):
        self.classes = tuple(self.classes)
        bad = [c for c in self.classes if c not in GENERATORS]
        if bad:
            raise ParameterError(f"unknown generator(s) {bad}; known: {list(GENERATORS)}")
        if len(set(self.classes)) != len(self.classes):
            raise ParameterError("duplicate generator names")
        if {"smooth_sphere", "bumpy_sphere"} <= set(self.classes):
            if self.texture_amplitude <= 0 or self.texture_scramble <= 0:
                raise ParameterError("smooth and bumpy spheres coincide without texture amplitude and scramble")
        if self.points < 1 or self.train_per_class < 0 or self.test_per_class < 0:
            raise ParameterError("counts must be non-negative and points positive")

    @classmethod
    def from_dict(cls, values: dict) -> "SynthSpec":
        return cls(**values)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        return d


def generate_cloud(name: str, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.points
    if name == "sphere":
        return gen_sphere(n, rng, spec.noise)
    if name == "cube":
        return gen_cube(n, rng, spec.noise)
    if name == "cylinder":
        return gen_cylinder(n, rng, spec.noise)
    if name == "plane":
        return gen_plane(n, rng, spec.noise)
    if name in ("smooth_sphere", "bumpy_sphere"):
        scramble = spec.texture_scramble if name == "bumpy_sphere" else 0.0
        pts = _textured_sphere(n, rng, spec.texture_amplitude, spec.texture_frequency, scramble)
        return pts + spec.noise * rng.normal(size=pts.shape) if spec.noise else pts
    raise ParameterError(f"unknown generator {name!r}")


def synth_dataset(spec: SynthSpec, rng: np.random.Generator, split: str = "train") -> Dataset:
    """Normalized clouds, ``per_class`` of each generator, in shuffled order."""
    per_class = spec.train_per_class if split == "train" else spec.test_per_class
    clouds = []
    for label, name in enumerate(spec.classes):
        for _ in range(per_class):
            pts, _, _ = normalize_unit_sphere(generate_cloud(name, spec, rng))
            clouds.append(LabeledCloud(pts, class_label=label))
    order = rng.permutation(len(clouds))
    meta = {"generator": "synthetic", "spec": spec.to_dict()}
    return Dataset([clouds[i] for i in order], split, meta, list(spec.classes))


def synth_splits(spec: SynthSpec, seed: int) -> dict[str, Dataset]:
    """Train and test splits from independent child streams of ``seed``."""
    train_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    out = {"train": synth_dataset(spec, train_rng, "train"), "test": synth_dataset(spec, test_rng, "test")}
    for ds in out.values():
        ds.metadata["seed"] = seed
    return out


def split_train_val(ds: Dataset, train_fraction: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Disjoint random train/validation subsets (e.g. the 80/20 split used to pick k)."""
    if not 0 < train_fraction < 1:
        raise ParameterError("train_fraction must lie in (0, 1)")
    order = rng.permutation(len(ds))
    cut = int(round(train_fraction * len(ds)))
    return ds.subset(sorted(order[:cut]), "train"), ds.subset(sorted(order[cut:]), "val")


# ----------------------------------------------------------------------------
# synthetic part segmentation

# category -> (generator, part labels); labels are global across categories.
PART_CATEGORIES = {0: ("cube", [0, 1]), 1: ("cylinder", [2, 3])}


def synth_part_cloud(category: int, n: int, rng: np.random.Generator, noise: float = 0.01) -> LabeledCloud:
    """Cube (top/bottom faces vs sides) or cylinder (caps vs lateral surface)."""
    gen, parts = PART_CATEGORIES[category]
    pts = gen_cube(n, rng) if gen == "cube" else gen_cylinder(n, rng)
    on_caps = np.isclose(np.abs(pts[:, 2]), 1.0)
    labels = np.where(on_caps, parts[0], parts[1])
    if noise:
        pts = pts + noise * rng.normal(size=pts.shape)
    pts, _, _ = normalize_unit_sphere(pts)
    return LabeledCloud(pts, point_labels=labels, category=category)


def synth_part_dataset(per_category: int, n: int, rng: np.random.Generator, split: str = "train",
                       noise: float = 0.01) -> Dataset:
    clouds = [synth_part_cloud(c, n, rng, noise) for c in PART_CATEGORIES for _ in range(per_category)]
    order = rng.permutation(len(clouds))
    part_sets = {c: list(p) for c, (_, p) in PART_CATEGORIES.items()}
    return Dataset([clouds[i] for i in order], split, {"generator": "synthetic-parts"},
                   [g for g, _ in PART_CATEGORIES.values()], part_sets)


# ----------------------------------------------------------------------------
# manifests


def load_manifest(path, points: int | None = None) -> dict[str, Dataset]:
    """Datasets per split from a JSON manifest.

    ``{"seed": 0, "points": 1024, "classes": [...], "part_sets": {"0": [0, 1]},
    "clouds": [{"path": "a.off", "label": 0, "split": "train", "category": 0}]}``.
    Paths are relative to the manifest. OFF meshes are sampled and normalized;
    XYZ files are used as given (normalized).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        spec = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno, path=str(path)) from None
    seed = int(spec.get("seed", 0))
    n = int(points or spec.get("points", 1024))
    rng = np.random.default_rng(seed)
    part_sets = {int(k): list(v) for k, v in spec.get("part_sets", {}).items()}
    splits: dict[str, list[LabeledCloud]] = {}
    seen: dict[str, str] = {}
    for entry in spec.get("clouds", []):
        f = (path.parent / entry["path"]).resolve()
        split = entry.get("split", "train")
        if seen.setdefault(str(f), split) != split:
            raise DataError(f"{f} appears in splits {seen[str(f)]!r} and {split!r}")
        if not f.is_file():
            raise FileNotFoundError(f"cloud file not found: {f}")
        if f.suffix.lower() == ".off":
            v, t = load_off_mesh(f)
            pts, labels = sample_mesh(v, t, n, rng), None
        else:
            pts, labels = load_xyz(f)
        pts, _, _ = normalize_unit_sphere(pts)
        splits.setdefault(split, []).append(
            LabeledCloud(pts, entry.get("label"), labels, entry.get("category"))
        )
    meta = {"manifest": str(path), "seed": seed}
    return {s: Dataset(c, s, dict(meta), list(spec.get("classes", [])), dict(part_sets)) for s, c in splits.items()}


# ----------------------------------------------------------------------------
# feature-space distance export


def feature_distances(features: np.ndarray, source_index: int) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    if not 0 <= source_index < f.shape[0]:
        raise ParameterError(f"source index {source_index} out of range [0, {f.shape[0]})")
    diff = f - f[source_index]
    return np.sqrt((diff * diff).sum(axis=1))


def export_feature_distances(model, cloud: LabeledCloud, source_index: int, layer: str) -> np.ndarray:
    """Distances from one point to all points in the feature space of ``layer``.

    ``layer`` is ``"input"``, ``"transform"`` (models with a spatial
    transformer) or ``"edgeconv<l>"`` with ``l`` counting stages from 1.
    """
    pts = cloud.points
    if not 0 <= source_index < pts.shape[0]:
        raise ParameterError(f"source index {source_index} out of range [0, {pts.shape[0]})")
    if layer == "input":
        return feature_distances(pts, source_index)
    trace: dict = {}
    if hasattr(model, "convs") and hasattr(model.cfg, "num_part_labels"):
        cat = None
        if model.cfg.category_vector_width:
            cat = np.zeros(model.cfg.category_vector_width)
            if cloud.category is not None:
                cat[cloud.category] = 1.0
        model(pts, cat, training=False, trace=trace)
    else:
        model(pts, training=False, trace=trace)
    if layer == "transform":
        if "transform" not in trace:
            raise ParameterError("model has no spatial transformer")
        return feature_distances(trace["transform"][0], source_index)
    if layer.startswith("edgeconv"):
        try:
            stage = int(layer[len("edgeconv"):])
        except ValueError:
            stage = -1
        feats = trace["features"]
        if not 1 <= stage <= len(feats):
            raise ParameterError(f"layer {layer!r}: stages run from edgeconv1 to edgeconv{len(feats)}")
        return feature_distances(feats[stage - 1][0], source_index)
    raise ParameterError(f"unknown layer {layer!r}")


def write_distance_csv(path, points: np.ndarray, distances: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "x", "y", "z", "distance"])
        for i, (p, d) in enumerate(zip(points, distances)):
            w.writerow([i, repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), repr(float(d))])
