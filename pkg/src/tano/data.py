"""Synthetic multi-domain few-shot data: generation, storage, sampling.

Class identity is procedural shape geometry (20 kinds of 16x16 masks with
jittered position/scale/rotation); domain identity is rendering style
(foreground palette, background, noise, polarity). Images live on disk as
a JSON manifest plus one binary blob per (domain, class).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .rng import make_rng

IMAGE_SIZE = 16
MAGIC = b"TANO"
FORMAT_VERSION = 1           # float32 payload (datasets)
FORMAT_VERSION_F64 = 2       # float64 payload (checkpoints)

SHAPE_KINDS = (
    "circle", "ring", "square", "square_outline", "diamond",
    "triangle_up", "triangle_down", "plus", "x_cross", "hbars",
    "vbars", "checker", "half_left", "half_top", "dot_grid",
    "l_shape", "t_shape", "h_shape", "u_shape", "frame_dot",
)

SPLIT_BASE, SPLIT_VAL, SPLIT_NOVEL = "base", "val", "novel"
# 5-way episodes must be samplable from every split, so each gets >= 5 classes
DEFAULT_SPLIT_SIZES = (10, 5, 5)


@dataclass
class DomainSpec:
    """Rendering recipe for one synthetic domain."""

    domain_id: int
    name: str
    fg_color: tuple          # per-channel foreground mean
    bg_color: tuple          # per-channel background mean
    color_scale: float       # per-image color jitter std
    bg_style: str            # flat | gradient | checker
    noise: str               # gaussian | salt_pepper
    noise_level: float
    invert: bool = False     # swap foreground/background roles
    gain_jitter: float = 0.2  # per-image brightness jitter (uniform half-width)
    distractor_style: str = "none"   # none | dashes | stripes | dots | patches
    distractor_color: tuple = (0.0, 0.0, 0.0)
    distractor_level: float = 0.0    # opacity of distractor pixels


def default_domain_specs():
    """Four domains pairwise separable by channel moments.

    Domain 2's palette is polarity-inverted and bright (dark shapes on a
    bright field), which poisons pooled global statistics and makes it
    maximally unlike its neighbors. Domain 4's palette sits between
    domains 1 and 3, so it serves as the held-out target in
    leave-one-out runs.

    Each domain also carries clutter drawn in *another* domain's signal
    color (e.g. dashes in domain 2's bright palette on the crimson
    domain). A per-domain normalizer can learn to suppress that color;
    a shared one cannot, because the same color is signal elsewhere.
    """
    return [
        DomainSpec(1, "crimson-flat", (0.85, 0.20, 0.18), (0.10, 0.08, 0.08),
                   0.05, "flat", "gaussian", 0.03,
                   distractor_style="dashes",
                   distractor_color=(0.78, 0.90, 0.78), distractor_level=1.0),
        DomainSpec(2, "inverted-bright", (0.42, 0.50, 0.42), (0.78, 0.90, 0.78),
                   0.04, "flat", "gaussian", 0.07,
                   distractor_style="patches",
                   distractor_color=(0.18, 0.30, 0.88), distractor_level=1.0),
        DomainSpec(3, "azure-checker", (0.14, 0.22, 0.58), (0.08, 0.12, 0.22),
                   0.05, "checker", "salt_pepper", 0.02,
                   distractor_style="dots",
                   distractor_color=(0.55, 0.20, 0.60), distractor_level=1.0),
        DomainSpec(4, "violet-gradient", (0.55, 0.20, 0.60), (0.15, 0.10, 0.20),
                   0.05, "gradient", "gaussian", 0.04,
                   distractor_style="stripes",
                   distractor_color=(0.78, 0.90, 0.78), distractor_level=1.0),
    ]


# ---------------------------------------------------------------------------
# shape rendering

def class_scale(class_id):
    """Deterministic base size for one class (part of its geometry).

    Classes spread over [0.45, 0.9] so shape area is itself a class cue;
    episode pools therefore carry class-dependent statistics that a
    population average does not.
    """
    return 0.45 + 0.45 * ((class_id * 7) % 20) / 19.0


def _shape_mask(kind, rng, base_scale=None):
    """Boolean 16x16 mask with jittered center, scale, and rotation."""
    cx, cy = rng.uniform(-0.15, 0.15, size=2)
    if base_scale is None:
        scale = rng.uniform(0.55, 0.8)
    else:
        scale = base_scale + rng.uniform(-0.06, 0.06)
    angle = rng.uniform(-0.3, 0.3)
    ys, xs = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    x = (xs - (IMAGE_SIZE - 1) / 2) / (IMAGE_SIZE / 2) - cx
    y = (ys - (IMAGE_SIZE - 1) / 2) / (IMAGE_SIZE / 2) - cy
    ca, sa = np.cos(angle), np.sin(angle)
    xr = (ca * x - sa * y) / scale
    yr = (sa * x + ca * y) / scale
    ax, ay = np.abs(xr), np.abs(yr)
    rad = np.sqrt(xr ** 2 + yr ** 2)
    inside = np.maximum(ax, ay) <= 1.0

    if kind == "circle":
        return rad <= 0.85
    if kind == "ring":
        return (rad <= 0.95) & (rad >= 0.5)
    if kind == "square":
        return np.maximum(ax, ay) <= 0.75
    if kind == "square_outline":
        m = np.maximum(ax, ay)
        return (m <= 0.9) & (m >= 0.5)
    if kind == "diamond":
        return ax + ay <= 1.0
    if kind == "triangle_up":
        return (yr <= 0.8) & (ax <= (0.8 - yr) * 0.6)
    if kind == "triangle_down":
        return (yr >= -0.8) & (ax <= (0.8 + yr) * 0.6)
    if kind == "plus":
        return inside & ((ax <= 0.3) | (ay <= 0.3))
    if kind == "x_cross":
        return inside & ((np.abs(xr - yr) <= 0.35) | (np.abs(xr + yr) <= 0.35))
    if kind == "hbars":
        return inside & (np.floor((yr + 1.0) * 2.0).astype(int) % 2 == 0)
    if kind == "vbars":
        return inside & (np.floor((xr + 1.0) * 2.0).astype(int) % 2 == 0)
    if kind == "checker":
        return inside & ((np.floor((xr + 1.0) * 2.0) + np.floor((yr + 1.0) * 2.0))
                         .astype(int) % 2 == 0)
    if kind == "half_left":
        return inside & (xr <= 0.0)
    if kind == "half_top":
        return inside & (yr <= 0.0)
    if kind == "dot_grid":
        gx = (xr + 1.0) % 1.0 - 0.5
        gy = (yr + 1.0) % 1.0 - 0.5
        return inside & (np.sqrt(gx ** 2 + gy ** 2) <= 0.3)
    if kind == "l_shape":
        return inside & ((ax <= 1.0) & (xr <= -0.4) | (yr >= 0.4))
    if kind == "t_shape":
        return inside & ((yr <= -0.4) | (ax <= 0.3))
    if kind == "h_shape":
        return inside & ((ax >= 0.5) | (ay <= 0.25))
    if kind == "u_shape":
        return inside & ((ax >= 0.5) | (yr >= 0.4))
    if kind == "frame_dot":
        m = np.maximum(ax, ay)
        return ((m <= 1.0) & (m >= 0.7)) | (rad <= 0.3)
    raise ValidationError(f"unknown shape kind {kind!r}")


def _background(spec, rng):
    img = np.empty((3, IMAGE_SIZE, IMAGE_SIZE))
    base = np.asarray(spec.bg_color).reshape(3, 1, 1)
    if spec.bg_style == "flat":
        img[:] = base
    elif spec.bg_style == "gradient":
        ramp = np.linspace(0.0, 1.0, IMAGE_SIZE).reshape(1, IMAGE_SIZE, 1)
        img[:] = base * (0.6 + 0.9 * ramp)
    elif spec.bg_style == "checker":
        ys, xs = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
        cells = ((xs // 4 + ys // 4) % 2).astype(np.float64)
        img[:] = base * (0.7 + 0.8 * cells)
    else:
        raise ValidationError(f"unknown background style {spec.bg_style!r}")
    return img


def _distractor_mask(style, rng):
    """Boolean 16x16 mask of class-independent clutter."""
    m = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    if style == "none":
        return m
    if style == "dashes":
        for _ in range(4):
            r = rng.integers(0, IMAGE_SIZE)
            c = rng.integers(0, IMAGE_SIZE - 4)
            m[r, c:c + rng.integers(4, 9)] = True
    elif style == "stripes":
        r = rng.integers(0, IMAGE_SIZE)
        m[r, :] = True
    elif style == "dots":
        for _ in range(6):
            r, c = rng.integers(0, IMAGE_SIZE - 1, size=2)
            m[r:r + 2, c:c + 2] = True
    elif style == "patches":
        for _ in range(3):
            r = rng.integers(0, IMAGE_SIZE - 4)
            c = rng.integers(0, IMAGE_SIZE - 5)
            m[r:r + rng.integers(3, 5), c:c + rng.integers(4, 6)] = True
    else:
        raise ValidationError(f"unknown distractor style {style!r}")
    return m


def render_image(spec, shape_kind, rng, base_scale=None):
    """One 3x16x16 float image in [0, 1] for (domain spec, shape class)."""
    mask = _shape_mask(shape_kind, rng, base_scale=base_scale)
    img = _background(spec, rng)
    img = img + rng.normal(0.0, spec.color_scale, size=3).reshape(3, 1, 1)
    fg = np.asarray(spec.fg_color) + rng.normal(0.0, spec.color_scale, size=3)
    img[:, mask] = np.clip(fg, 0.0, 1.0).reshape(3, 1)
    if spec.distractor_level > 0.0:
        # clutter never overlaps the shape, so classes stay legible
        dm = _distractor_mask(spec.distractor_style, rng) & ~mask
        dc = np.asarray(spec.distractor_color) \
            + rng.normal(0.0, spec.color_scale, size=3)
        a = spec.distractor_level
        img[:, dm] = (1.0 - a) * img[:, dm] \
            + a * np.clip(dc, 0.0, 1.0).reshape(3, 1)
    if spec.invert:
        img = 1.0 - np.clip(img, 0.0, 1.0)
    # per-image exposure so within-domain statistics are not degenerate
    img = img * rng.uniform(1.0 - spec.gain_jitter, 1.0 + spec.gain_jitter)
    if spec.noise == "gaussian":
        level = np.broadcast_to(np.asarray(spec.noise_level, dtype=np.float64),
                                (3,)).reshape(3, 1, 1)
        img = img + rng.normal(0.0, 1.0, size=img.shape) * level
    elif spec.noise == "salt_pepper":
        flips = rng.random(img.shape[1:]) < spec.noise_level
        img[:, flips] = rng.random((3, int(flips.sum())))
    else:
        raise ValidationError(f"unknown noise model {spec.noise!r}")
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# dataset container

@dataclass
class ClassInfo:
    class_id: int
    shape_kind: str
    split: str


@dataclass
class DatasetManifest:
    domains: list
    classes: list
    images_per_class: int
    seed: int
    format_version: int = FORMAT_VERSION

    def classes_in_split(self, split):
        return [c for c in self.classes if c.split == split]


@dataclass
class Dataset:
    manifest: DatasetManifest
    images: dict      # (domain_id, class_id) -> float32 (n, 3, 16, 16)

    @property
    def domain_ids(self):
        return [d.domain_id for d in self.manifest.domains]

    def restricted_to(self, domain_ids):
        """View containing only the given domains (shares image arrays)."""
        specs = [d for d in self.manifest.domains if d.domain_id in domain_ids]
        if len(specs) != len(domain_ids):
            missing = set(domain_ids) - {d.domain_id for d in specs}
            raise ValidationError(f"domains not in dataset: {sorted(missing)}")
        manifest = DatasetManifest(
            domains=specs, classes=self.manifest.classes,
            images_per_class=self.manifest.images_per_class,
            seed=self.manifest.seed)
        images = {k: v for k, v in self.images.items() if k[0] in domain_ids}
        return Dataset(manifest=manifest, images=images)


def generate_synthetic_domains(specs=None, num_classes=20, images_per_class=50,
                               seed=0, split_sizes=DEFAULT_SPLIT_SIZES):
    """Render the full (domain x class) image grid, reproducibly from seed."""
    specs = default_domain_specs() if specs is None else specs
    if num_classes > len(SHAPE_KINDS):
        raise ValidationError(
            f"only {len(SHAPE_KINDS)} shape kinds available, "
            f"requested {num_classes} classes")
    if sum(split_sizes) != num_classes:
        raise ValidationError(
            f"split sizes {split_sizes} do not sum to {num_classes}")
    classes = []
    bounds = np.cumsum((0,) + tuple(split_sizes))
    names = (SPLIT_BASE, SPLIT_VAL, SPLIT_NOVEL)
    for c in range(num_classes):
        split = names[int(np.searchsorted(bounds, c, side="right")) - 1]
        classes.append(ClassInfo(class_id=c, shape_kind=SHAPE_KINDS[c], split=split))
    images = {}
    for spec in specs:
        for cls in classes:
            rng = make_rng(seed, spec.domain_id, cls.class_id)
            stack = np.stack([render_image(
                spec, cls.shape_kind, rng,
                base_scale=class_scale(cls.class_id))
                for _ in range(images_per_class)])
            images[(spec.domain_id, cls.class_id)] = stack.astype(np.float32)
    manifest = DatasetManifest(domains=list(specs), classes=classes,
                               images_per_class=images_per_class, seed=seed)
    return Dataset(manifest=manifest, images=images)


# ---------------------------------------------------------------------------
# on-disk format

def write_blob(path, array, version=FORMAT_VERSION):
    """Write a (count, C, H, W) array as a TANO blob."""
    arr = np.asarray(array)
    if arr.ndim != 4:
        raise ValidationError(f"blob arrays are 4D, got shape {arr.shape}")
    count, c, h, w = arr.shape
    dtype = "<f4" if version == FORMAT_VERSION else "<f8"
    payload = np.ascontiguousarray(arr, dtype=dtype).tobytes()
    header = MAGIC + struct.pack("<IIIII", version, count, c, h, w)
    Path(path).write_bytes(header + payload)


def read_blob(path):
    raw = Path(path).read_bytes()
    if len(raw) < 24:
        raise FormatError(f"{path}: truncated header, only {len(raw)} bytes")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at byte offset 0")
    version, count, c, h, w = struct.unpack("<IIIII", raw[4:24])
    if version not in (FORMAT_VERSION, FORMAT_VERSION_F64):
        raise FormatError(f"{path}: unknown format version {version} at byte offset 4")
    itemsize = 4 if version == FORMAT_VERSION else 8
    expected = 24 + count * c * h * w * itemsize
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload truncated at byte offset {len(raw)}, "
            f"expected {expected} bytes")
    dtype = "<f4" if version == FORMAT_VERSION else "<f8"
    data = np.frombuffer(raw[24:], dtype=dtype).reshape(count, c, h, w)
    return data.copy()


def _spec_to_dict(spec):
    return {"domain_id": spec.domain_id, "name": spec.name,
            "fg_color": list(spec.fg_color), "bg_color": list(spec.bg_color),
            "color_scale": spec.color_scale, "bg_style": spec.bg_style,
            "noise": spec.noise, "noise_level": spec.noise_level,
            "invert": spec.invert, "gain_jitter": spec.gain_jitter,
            "distractor_style": spec.distractor_style,
            "distractor_color": list(spec.distractor_color),
            "distractor_level": spec.distractor_level}


def _spec_from_dict(d):
    return DomainSpec(domain_id=d["domain_id"], name=d["name"],
                      fg_color=tuple(d["fg_color"]), bg_color=tuple(d["bg_color"]),
                      color_scale=d["color_scale"], bg_style=d["bg_style"],
                      noise=d["noise"], noise_level=d["noise_level"],
                      invert=d["invert"], gain_jitter=d["gain_jitter"],
                      distractor_style=d["distractor_style"],
                      distractor_color=tuple(d["distractor_color"]),
                      distractor_level=d["distractor_level"])


def write_dataset(dataset, path):
    root = Path(path)
    (root / "blobs").mkdir(parents=True, exist_ok=True)
    m = dataset.manifest
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": m.seed,
        "images_per_class": m.images_per_class,
        "domains": [_spec_to_dict(d) for d in m.domains],
        "classes": [{"class_id": c.class_id, "shape_kind": c.shape_kind,
                     "split": c.split} for c in m.classes],
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    for (dom, cls), arr in sorted(dataset.images.items()):
        write_blob(root / "blobs" / f"d{dom}_c{cls}.tano", arr)


def read_dataset(path):
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{manifest_path} not found")
    try:
        m = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if m.get("format_version") != FORMAT_VERSION:
        raise FormatError(
            f"{manifest_path}: unsupported format_version {m.get('format_version')}")
    classes = [ClassInfo(**c) for c in m["classes"]]
    specs = [_spec_from_dict(d) for d in m["domains"]]
    manifest = DatasetManifest(domains=specs, classes=classes,
                               images_per_class=m["images_per_class"],
                               seed=m["seed"])
    images = {}
    for spec in specs:
        for cls in classes:
            blob = root / "blobs" / f"d{spec.domain_id}_c{cls.class_id}.tano"
            if not blob.exists():
                raise FormatError(f"{blob} missing from dataset")
            images[(spec.domain_id, cls.class_id)] = read_blob(blob).astype(np.float32)
    return Dataset(manifest=manifest, images=images)


# ---------------------------------------------------------------------------
# episode sampling

@dataclass
class Episode:
    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    domain_id: int
    n_way: int
    n_shot: int
    n_query: int
    class_ids: np.ndarray = None
    pseudo_domain_id: int | None = None


def episode_rng(seed, index):
    """Splittable per-episode generator: reproducible from (seed, index)."""
    return make_rng(seed, index)


def sample_episode(dataset, split, protocol, n_way, n_shot, n_query, rng,
                   domains=None):
    """Draw one N-way K-shot task from a single admissible domain.

    ``domains`` restricts the candidate domain ids (e.g. the seen set for
    meta-training under the out-of-domain protocol, or the held-out
    singleton at meta-test).
    """
    if protocol not in ("standard", "intra", "out"):
        raise ValidationError(f"unknown protocol {protocol!r}")
    classes = dataset.manifest.classes_in_split(split)
    if len(classes) < n_way:
        raise ValidationError(
            f"split {split!r} has {len(classes)} classes, need {n_way}")
    candidates = list(domains) if domains is not None else dataset.domain_ids
    domain = int(candidates[rng.integers(len(candidates))])
    chosen = rng.choice(len(classes), size=n_way, replace=False)
    sup_x, sup_y, qry_x, qry_y = [], [], [], []
    class_ids = []
    for label, ci in enumerate(chosen):
        cls = classes[int(ci)]
        class_ids.append(cls.class_id)
        pool = dataset.images[(domain, cls.class_id)]
        if pool.shape[0] < n_shot + n_query:
            raise ValidationError(
                f"class {cls.class_id} in domain {domain} has {pool.shape[0]} "
                f"images, need {n_shot + n_query}")
        idx = rng.choice(pool.shape[0], size=n_shot + n_query, replace=False)
        sup_x.append(pool[idx[:n_shot]])
        qry_x.append(pool[idx[n_shot:]])
        sup_y.extend([label] * n_shot)
        qry_y.extend([label] * n_query)
    return Episode(
        support_images=np.concatenate(sup_x).astype(np.float64),
        support_labels=np.asarray(sup_y),
        query_images=np.concatenate(qry_x).astype(np.float64),
        query_labels=np.asarray(qry_y),
        domain_id=domain, n_way=n_way, n_shot=n_shot, n_query=n_query,
        class_ids=np.asarray(class_ids))


# ---------------------------------------------------------------------------
# k-means pseudo domain labels

def _kmeans_once(x, k, rng, max_iter=100):
    n = x.shape[0]
    # k-means++ seeding
    centroids = [x[rng.integers(n)]]
    for _ in range(k - 1):
        d2 = np.min([((x - c) ** 2).sum(axis=1) for c in centroids], axis=0)
        total = d2.sum()
        if total <= 0:
            centroids.append(x[rng.integers(n)])
            continue
        centroids.append(x[rng.choice(n, p=d2 / total)])
    centroids = np.stack(centroids)
    labels = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        for c in range(k):
            members = new_labels == c
            if members.any():
                centroids[c] = x[members].mean(axis=0)
            else:
                # re-seed an empty cluster at the farthest point
                far = d2.min(axis=1).argmax()
                centroids[c] = x[far]
                new_labels[far] = c
        if (new_labels == labels).all():
            labels = new_labels
            break
        labels = new_labels
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    inertia = d2[np.arange(n), labels].sum()
    return labels, centroids, inertia


def kmeans_pseudo_labels(task_features, k, seed, restarts=10):
    """Lloyd's algorithm with k-means++ seeding, best of ``restarts`` runs."""
    x = np.asarray(task_features, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"task features must be 2D, got shape {x.shape}")
    if x.shape[0] < k:
        raise ValidationError(f"{x.shape[0]} tasks cannot form {k} clusters")
    best = None
    for r in range(restarts):
        rng = make_rng(seed, r)
        labels, centroids, inertia = _kmeans_once(x, k, rng)
        if best is None or inertia < best[2]:
            best = (labels, centroids, inertia)
    return best[0], best[1]


def assign_task_pseudo_label(task_feature, centroids):
    """Nearest centroid; ties resolve to the lowest cluster index."""
    f = np.asarray(task_feature, dtype=np.float64).reshape(-1)
    d2 = ((centroids - f) ** 2).sum(axis=1)
    return int(d2.argmin())
