"""Point clouds: OFF/XYZ parsing, surface sampling, and a synthetic shape corpus."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from afsrl.errors import CorpusError, ParseError

SHAPES = ("sphere", "cube", "cylinder", "torus")
MIN_SYNTHETIC_POINTS = 16


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (n, 3) float64
    label: int | None = None
    part_labels: np.ndarray | None = None  # (n,) int64
    faces: np.ndarray | None = None  # (m, 3) int64 indices into points, mesh input only

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        if self.part_labels is not None:
            parts = np.asarray(self.part_labels, dtype=np.int64).reshape(-1)
            if parts.shape[0] != pts.shape[0]:
                raise ValueError(
                    f"part_labels length {parts.shape[0]} != number of points {pts.shape[0]}"
                )
            object.__setattr__(self, "part_labels", parts)
        if self.faces is not None:
            object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))

    def __len__(self) -> int:
        return self.points.shape[0]

    def take(self, idx: np.ndarray) -> "PointCloud":
        """Sub-cloud with points (and part labels) at ``idx``, mesh faces dropped."""
        parts = None if self.part_labels is None else self.part_labels[idx]
        return PointCloud(self.points[idx], self.label, parts)


@dataclass
class Dataset:
    clouds: list[PointCloud]
    class_names: list[str]
    train_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        n = len(self.clouds)
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.test_idx = np.asarray(self.test_idx, dtype=np.int64)
        for name, idx in (("train", self.train_idx), ("test", self.test_idx)):
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise ValueError(f"{name} split index out of bounds for {n} clouds")
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise ValueError("train and test splits overlap")

    def __len__(self) -> int:
        return len(self.clouds)

    @property
    def labels(self) -> np.ndarray:
        return np.array([-1 if c.label is None else c.label for c in self.clouds], dtype=np.int64)

    def subset(self, idx) -> list[PointCloud]:
        return [self.clouds[i] for i in idx]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for c in self.clouds:
            h.update(np.ascontiguousarray(c.points).tobytes())
            h.update(str(c.label).encode())
            if c.part_labels is not None:
                h.update(c.part_labels.tobytes())
        return h.hexdigest()


def stratified_split(labels: np.ndarray, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        n_test = int(round(test_fraction * idx.size))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


# --- normalization -------------------------------------------------------

def normalize_unit_box(points: np.ndarray) -> np.ndarray:
    """Center the bounding box at the origin and scale the longest side to 1."""
    lo, hi = points.min(axis=0), points.max(axis=0)
    extent = float((hi - lo).max())
    if extent == 0.0:
        return points - (lo + hi) / 2
    out = (points - (lo + hi) / 2) / extent
    # pin the longest axis exactly onto +-0.5 despite rounding
    axis = int(np.argmax(hi - lo))
    out[np.argmin(points[:, axis]), axis] = -0.5
    out[np.argmax(points[:, axis]), axis] = 0.5
    return out


# --- parsing -------------------------------------------------------------

def _text_lines(data: bytes | str) -> list[tuple[int, str]]:
    text = data.decode("utf-8", errors="strict") if isinstance(data, (bytes, bytearray)) else data
    out = []
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            out.append((no, line))
    return out


def _floats(tokens: Sequence[str], line: int) -> list[float]:
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"non-numeric value in {' '.join(tokens)!r}", line) from None
    if not all(math.isfinite(v) for v in vals):
        raise ParseError("non-finite coordinate", line)
    return vals


def _ints(tokens: Sequence[str], line: int) -> list[int]:
    try:
        return [int(t) for t in tokens]
    except ValueError:
        raise ParseError(f"expected integers, got {' '.join(tokens)!r}", line) from None


def parse_off(data: bytes | str) -> PointCloud:
    """Parse an OFF mesh. Polygon faces are fan-triangulated."""
    lines = _text_lines(data)
    if not lines:
        raise ParseError("empty input", 1)
    no, head = lines[0]
    if not head.startswith("OFF"):
        raise ParseError(f"missing OFF header, got {head[:20]!r}", no)
    rest = head[3:].strip()
    pos = 1
    if rest:  # fused "OFF1 2 3" variant
        counts_line, counts_tokens = no, rest.split()
    else:
        if len(lines) < 2:
            raise ParseError("missing counts line", no + 1)
        counts_line, counts_tokens = lines[1][0], lines[1][1].split()
        pos = 2
    if len(counts_tokens) < 2:
        raise ParseError("counts line needs vertex and face counts", counts_line)
    counts = _ints(counts_tokens[:3], counts_line)
    n_vert, n_face = counts[0], counts[1]
    if n_vert < 0 or n_face < 0:
        raise ParseError("negative counts", counts_line)
    if n_vert == 0:
        raise ParseError("OFF file declares no vertices (empty cloud)", counts_line)
    if len(lines) - pos < n_vert + n_face:
        last = lines[-1][0]
        raise ParseError(
            f"declared {n_vert} vertices and {n_face} faces but only {len(lines) - pos} data lines",
            last,
        )
    verts = np.empty((n_vert, 3))
    for i in range(n_vert):
        ln, line = lines[pos + i]
        toks = line.split()
        if len(toks) < 3:
            raise ParseError(f"vertex needs 3 coordinates, got {len(toks)}", ln)
        verts[i] = _floats(toks[:3], ln)
    pos += n_vert
    tris = []
    for i in range(n_face):
        ln, line = lines[pos + i]
        raw = line.split()
        (k,) = _ints(raw[:1], ln)
        if len(raw) < k + 1:
            raise ParseError("face vertex count does not match its index list", ln)
        idx = _ints(raw[1 : k + 1], ln)  # trailing color fields ignored
        if k < 3:
            raise ParseError(f"face needs at least 3 vertices, got {k}", ln)
        if min(idx) < 0 or max(idx) >= n_vert:
            raise ParseError("face index out of range", ln)
        for j in range(1, k - 1):
            tris.append((idx[0], idx[j], idx[j + 1]))
    faces = np.array(tris, dtype=np.int64).reshape(-1, 3) if tris else None
    return PointCloud(verts, faces=faces)


def parse_xyz(data: bytes | str) -> PointCloud:
    rows, parts = [], []
    for row_index, (ln, line) in enumerate(_text_lines(data)):
        toks = line.split()
        if len(toks) not in (3, 4):
            raise ParseError(f"row {row_index} has {len(toks)} fields, expected 3 or 4", ln)
        rows.append(_floats(toks[:3], ln))
        if len(toks) == 4:
            parts.append(_ints(toks[3:], ln)[0])
    if not rows:
        raise ParseError("no points in XYZ input", 1)
    if parts and len(parts) != len(rows):
        raise ParseError("part labels present on some rows but not all", None)
    return PointCloud(np.array(rows), part_labels=np.array(parts) if parts else None)


def format_xyz(cloud: PointCloud) -> str:
    out = []
    for i, p in enumerate(cloud.points):
        cols = [repr(float(v)) for v in p]
        if cloud.part_labels is not None:
            cols.append(str(int(cloud.part_labels[i])))
        out.append(" ".join(cols))
    return "\n".join(out) + "\n"


def load_cloud(path: str | Path) -> PointCloud:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix.lower() == ".off":
        return parse_off(raw)
    return parse_xyz(raw)


# --- sampling ------------------------------------------------------------

def triangle_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_surface(cloud: PointCloud, n: int, rng: np.random.Generator) -> PointCloud:
    """Draw ``n`` points: area-weighted over faces if present, else from the vertices."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(cloud) == 0:
        raise ValueError("cannot sample from empty geometry")
    if cloud.faces is not None and len(cloud.faces):
        areas = triangle_areas(cloud.points, cloud.faces)
        total = areas.sum()
        if total <= 0:
            raise ValueError("mesh has zero surface area")
        face = rng.choice(len(areas), size=n, p=areas / total)
        u, v = rng.random(n), rng.random(n)
        flip = u + v > 1
        u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
        tri = cloud.faces[face]
        a, b, c = (cloud.points[tri[:, i]] for i in range(3))
        pts = a + u[:, None] * (b - a) + v[:, None] * (c - a)
        return PointCloud(pts, cloud.label)
    replace = n > len(cloud)
    idx = rng.choice(len(cloud), size=n, replace=replace)
    return cloud.take(idx)


# --- synthetic shapes ----------------------------------------------------

def _sphere(n, rng):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return 0.5 * v, np.zeros(n, dtype=np.int64)


def _cube(n, rng):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-0.5, 0.5, size=(n, 2))
    pts = np.empty((n, 3))
    axis, sign = face // 2, np.where(face % 2 == 0, -0.5, 0.5)
    for ax in range(3):
        m = axis == ax
        others = [i for i in range(3) if i != ax]
        pts[m, ax] = sign[m]
        pts[np.ix_(m, others)] = uv[m]
    return pts, face.astype(np.int64)


def _cylinder(n, rng, radius=0.5, height=1.0):
    # parts: 0 side, 1 top cap, 2 bottom cap, chosen in proportion to area
    areas = np.array([2 * np.pi * radius * height, np.pi * radius**2, np.pi * radius**2])
    part = rng.choice(3, size=n, p=areas / areas.sum())
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    side = part == 0
    pts[side, 0] = radius * np.cos(theta[side])
    pts[side, 1] = radius * np.sin(theta[side])
    pts[side, 2] = rng.uniform(-height / 2, height / 2, size=side.sum())
    cap = ~side
    r = radius * np.sqrt(rng.random(cap.sum()))
    pts[cap, 0] = r * np.cos(theta[cap])
    pts[cap, 1] = r * np.sin(theta[cap])
    pts[cap, 2] = np.where(part[cap] == 1, height / 2, -height / 2)
    return pts, part.astype(np.int64)


def _torus(n, rng, major=0.35, minor=0.15):
    # rejection sampling for the area element (R + r cos v)
    u = np.empty(0)
    v = np.empty(0)
    while u.size < n:
        m = 2 * (n - u.size) + 8
        cu = rng.uniform(0, 2 * np.pi, size=m)
        cv = rng.uniform(0, 2 * np.pi, size=m)
        keep = rng.random(m) * (major + minor) <= major + minor * np.cos(cv)
        u = np.concatenate([u, cu[keep]])
        v = np.concatenate([v, cv[keep]])
    u, v = u[:n], v[:n]
    ring = major + minor * np.cos(v)
    pts = np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)
    # parts: 0 outer half of the tube, 1 inner half
    part = (np.cos(v) < 0).astype(np.int64)
    return pts, part


_GENERATORS = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder, "torus": _torus}


def generate_synthetic(shape: str, n_points: int, noise: float, seed: int, label: int | None = None) -> PointCloud:
    """Uniform surface sample of a primitive, jittered and normalized to the unit box.

    Part labels: cube faces 0-5, cylinder side/top/bottom, torus outer/inner,
    sphere a single part.
    """
    if shape not in _GENERATORS:
        raise ValueError(f"unknown shape {shape!r}; choose from {', '.join(SHAPES)}")
    if n_points < MIN_SYNTHETIC_POINTS:
        raise ValueError(f"n_points must be >= {MIN_SYNTHETIC_POINTS}, got {n_points}")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    rng = np.random.default_rng(seed)
    # primitives are built inside the analytic unit box; only jitter needs a rescale
    pts, parts = _GENERATORS[shape](n_points, rng)
    if noise > 0:
        pts = normalize_unit_box(pts + noise * rng.normal(size=pts.shape))
    return PointCloud(pts, label, parts)


# --- corpus manifest -----------------------------------------------------

@dataclass(frozen=True)
class ManifestRow:
    class_id: int
    seed: int
    n_points: int
    noise: float


def write_manifest(rows: Sequence[ManifestRow], class_names: Sequence[str], path: str | Path) -> None:
    lines = ["# classes: " + ",".join(class_names)]
    lines += [f"{r.class_id}\t{r.seed}\t{r.n_points}\t{r.noise!r}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> tuple[list[ManifestRow], list[str]]:
    rows, names = [], list(SHAPES)
    for no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        if raw.startswith("# classes:"):
            names = [s.strip() for s in raw.split(":", 1)[1].split(",") if s.strip()]
            continue
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        toks = line.split("\t")
        if len(toks) != 4:
            raise ParseError(f"manifest row needs 4 tab-separated fields, got {len(toks)}", no)
        cid, seed, npts = _ints(toks[:3], no)
        (noise,) = _floats(toks[3:], no)
        if not 0 <= cid < len(names):
            raise ParseError(f"class id {cid} outside 0..{len(names) - 1}", no)
        rows.append(ManifestRow(cid, seed, npts, noise))
    return rows, names


def build_corpus(class_names: Sequence[str], per_class: int, n_points: int, noise: float, seed: int) -> list[ManifestRow]:
    seq = np.random.SeedSequence(seed)
    seeds = seq.generate_state(len(class_names) * per_class, dtype=np.uint32)
    return [
        ManifestRow(c, int(seeds[c * per_class + i]), n_points, noise)
        for c in range(len(class_names))
        for i in range(per_class)
    ]


def materialize(rows: Sequence[ManifestRow], class_names: Sequence[str], test_fraction: float = 0.25, split_seed: int = 0) -> Dataset:
    clouds = [generate_synthetic(class_names[r.class_id], r.n_points, r.noise, r.seed, r.class_id) for r in rows]
    labels = np.array([r.class_id for r in rows])
    train, test = stratified_split(labels, test_fraction, split_seed)
    return Dataset(clouds, list(class_names), train, test)


def synthetic_dataset(per_class: int = 50, n_points: int = 256, noise: float = 0.02, seed: int = 0,
                      classes: Sequence[str] = SHAPES, test_fraction: float = 0.25) -> Dataset:
    rows = build_corpus(classes, per_class, n_points, noise, seed)
    return materialize(rows, classes, test_fraction, seed)


# --- corpora on disk -----------------------------------------------------

MANIFEST_FILE = "manifest.tsv"
SPLIT_FILE = "split.txt"
CLOUD_SUFFIXES = (".off", ".xyz", ".pts", ".txt")


def write_split_meta(path: str | Path, test_fraction: float, split_seed: int) -> None:
    Path(path).write_text(f"test_fraction={test_fraction!r}\nsplit_seed={split_seed}\n")


def read_split_meta(path: str | Path) -> tuple[float, int]:
    kv = dict(line.split("=", 1) for line in Path(path).read_text().split() if "=" in line)
    try:
        return float(kv["test_fraction"]), int(kv["split_seed"])
    except (KeyError, ValueError) as exc:
        raise CorpusError(f"{path}: bad split file ({exc})") from exc


def load_directory(root: str | Path, test_fraction: float = 0.25, split_seed: int = 0,
                   n_points: int = 1024, seed: int = 0) -> Dataset:
    """One subdirectory per class, one cloud file per object.

    Meshes are surface-sampled to ``n_points`` and fitted to the unit box;
    point files are used as given.
    """
    root = Path(root)
    classes = sorted(d.name for d in root.iterdir() if d.is_dir() and _cloud_files(d))
    if not classes:
        raise CorpusError(f"{root}: no class subdirectories with {'/'.join(CLOUD_SUFFIXES)} files")
    rng = np.random.default_rng(seed)
    clouds = []
    for label, name in enumerate(classes):
        for f in _cloud_files(root / name):
            try:
                c = load_cloud(f)
            except ParseError as exc:
                raise ParseError(f"{f}: {exc}", exc.line) from exc
            if c.faces is not None and len(c.faces):
                c = sample_surface(c, n_points, rng)
                c = PointCloud(normalize_unit_box(c.points), label, c.part_labels)
            else:
                c = PointCloud(c.points, label, c.part_labels)
            clouds.append(c)
    labels = np.array([c.label for c in clouds])
    train, test = stratified_split(labels, test_fraction, split_seed)
    return Dataset(clouds, classes, train, test)


def _cloud_files(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in CLOUD_SUFFIXES)


def load_corpus(path: str | Path, n_points: int = 1024) -> Dataset:
    """A generated corpus (manifest + split file) or a directory of class folders."""
    path = Path(path)
    if not path.is_dir():
        raise CorpusError(f"corpus directory {path} does not exist")
    if (path / MANIFEST_FILE).exists():
        rows, names = read_manifest(path / MANIFEST_FILE)
        if not rows:
            raise CorpusError(f"{path / MANIFEST_FILE}: no clouds listed")
        frac, split_seed = read_split_meta(path / SPLIT_FILE) if (path / SPLIT_FILE).exists() else (0.25, 0)
        return materialize(rows, names, frac, split_seed)
    return load_directory(path, n_points=n_points)
