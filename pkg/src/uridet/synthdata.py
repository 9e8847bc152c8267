"""Seeded synthetic microscopy scenes with box annotations.

Stylized sediment particles (parametric shapes with texture, not
photorealism) rendered over a noisy bright-field background. Seven target
classes plus never-targeted noise blobs; small round cells appear at
high-power magnification, large epithelial cells and elongated low-contrast
casts at low power. Boxes are computed from the rendered particle mask, so
they are tight by construction.

Annotation files are versioned JSON; dataset builds derive one rng per image
from ``(seed, index)`` so any image regenerates identically on its own.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image, ImageFilter

from uridet import CLASS_IDS, ID_TO_NAME, NOISE_CLASS, NOISE_CLASS_ID
from uridet.boxcore import GroundTruth, iou_matrix

SCHEMA_VERSION = 1
MAX_PLACE_RETRIES = 40


class PlacementError(RuntimeError):
    pass


class SchemaVersionError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class ClassProfile:
    name: str
    shape: str  # disk | ring | polygon | rod | ellipse
    size_range: tuple  # (min, max) longest dimension, pixels
    color: tuple  # base RGB
    count_range: tuple  # (min, max) instances per image, inclusive
    magnification: str  # high | low
    color_jitter: float = 10.0
    alpha: float = 1.0
    aspect: float = 1.0  # length:width for rods; >= 3 keeps casts elongated

    def __post_init__(self):
        if self.size_range[0] <= 0 or self.size_range[1] < self.size_range[0]:
            raise ValueError(f"{self.name}: bad size range {self.size_range}")
        if self.count_range[0] < 0 or self.count_range[1] < self.count_range[0]:
            raise ValueError(f"{self.name}: bad count range {self.count_range}")
        if self.shape not in ("disk", "ring", "polygon", "rod", "ellipse"):
            raise ValueError(f"{self.name}: unknown shape {self.shape!r}")
        if self.magnification not in ("high", "low"):
            raise ValueError(f"{self.name}: unknown magnification {self.magnification!r}")


@dataclass(frozen=True)
class SceneSpec:
    width: int = 800
    height: int = 600
    background_level: tuple = (226.0, 229.0, 233.0)
    background_wobble: float = 8.0  # low-frequency shading amplitude
    pixel_noise: float = 3.0
    profiles: tuple = ()
    noise_count: tuple = (0, 6)
    max_overlap_iou: float = 0.3
    blur_sigma: float = 0.0
    magnification_mode: str = "mixed"  # mixed | high | low
    seed: int = 0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if self.magnification_mode not in ("mixed", "high", "low"):
            raise ValueError(f"unknown magnification mode {self.magnification_mode!r}")
        object.__setattr__(self, "profiles", tuple(self.profiles))


@dataclass
class AnnotationRecord:
    image_id: str
    file: str
    magnification: str
    objects: list  # of GroundTruth (noise entries use NOISE_CLASS_ID)

    def target_objects(self):
        return [g for g in self.objects if g.class_id != NOISE_CLASS_ID]


def default_profiles():
    """The standard 7-class particle mix."""
    return (
        ClassProfile("eryth", "disk", (10, 22), (186, 92, 92), (0, 6), "high"),
        ClassProfile("leuko", "ring", (12, 24), (208, 206, 196), (0, 4), "high"),
        ClassProfile("epith", "ellipse", (60, 140), (198, 168, 122), (0, 2), "low"),
        ClassProfile("cryst", "polygon", (18, 48), (118, 148, 212), (0, 3), "high"),
        ClassProfile(
            "cast", "rod", (70, 180), (214, 214, 206), (0, 2), "low", alpha=0.5, aspect=4.0
        ),
        ClassProfile("mycete", "ellipse", (8, 18), (150, 186, 150), (0, 5), "high"),
        ClassProfile("epithn", "disk", (8, 20), (96, 76, 118), (0, 3), "high"),
    )


def preset_scene_spec(name: str) -> SceneSpec:
    """Named dataset presets used by tests and the ablation matrices."""
    if name == "standard":
        return SceneSpec(profiles=default_profiles())
    if name == "easy":
        # high-contrast, well-separated particles on a small canvas
        profiles = (
            ClassProfile("eryth", "disk", (16, 30), (200, 60, 60), (1, 2), "high", 6.0),
            ClassProfile("leuko", "ring", (18, 34), (235, 235, 225), (0, 2), "high", 6.0),
            ClassProfile("cryst", "polygon", (20, 38), (70, 110, 220), (0, 2), "high", 6.0),
        )
        return SceneSpec(
            width=128,
            height=128,
            background_wobble=4.0,
            pixel_noise=2.0,
            profiles=profiles,
            noise_count=(0, 2),
            max_overlap_iou=0.05,
            magnification_mode="high",
        )
    if name == "tiny-particles":
        # everything small: exercises the small-anchor ablation axis
        profiles = (
            ClassProfile("eryth", "disk", (7, 13), (200, 60, 60), (2, 4), "high", 6.0),
            ClassProfile("cryst", "polygon", (26, 44), (70, 110, 220), (0, 1), "high", 6.0),
        )
        return SceneSpec(
            width=128,
            height=128,
            background_wobble=4.0,
            pixel_noise=2.0,
            profiles=profiles,
            noise_count=(0, 2),
            max_overlap_iou=0.05,
            magnification_mode="high",
        )
    if name == "casts":
        # small elongated low-contrast rods: the hard-class ablation axis
        profiles = (
            ClassProfile(
                "cast", "rod", (26, 44), (196, 200, 190), (1, 3), "low", 5.0, alpha=0.75, aspect=3.5
            ),
            ClassProfile("epith", "ellipse", (40, 64), (198, 168, 122), (0, 1), "low", 6.0),
        )
        return SceneSpec(
            width=128,
            height=128,
            background_wobble=4.0,
            pixel_noise=2.0,
            profiles=profiles,
            noise_count=(0, 2),
            max_overlap_iou=0.05,
            magnification_mode="low",
        )
    raise ValueError(f"unknown scene preset {name!r}")


# ---------------------------------------------------------------------------
# rendering


def _render_background(spec: SceneSpec, rng):
    h, w = spec.height, spec.width
    img = np.empty((h, w, 3))
    img[...] = np.asarray(spec.background_level)
    if spec.background_wobble > 0:
        coarse = rng.normal(0.0, spec.background_wobble, size=(5, 5))
        ys = np.linspace(0, 4, h)
        xs = np.linspace(0, 4, w)
        y0 = np.floor(ys).astype(int).clip(0, 3)
        x0 = np.floor(xs).astype(int).clip(0, 3)
        fy = (ys - y0)[:, None]
        fx = (xs - x0)[None, :]
        wob = (
            coarse[y0][:, x0] * (1 - fy) * (1 - fx)
            + coarse[y0 + 1][:, x0] * fy * (1 - fx)
            + coarse[y0][:, x0 + 1] * (1 - fy) * fx
            + coarse[y0 + 1][:, x0 + 1] * fy * fx
        )
        img += wob[:, :, None]
    if spec.pixel_noise > 0:
        img += rng.normal(0.0, spec.pixel_noise, size=(h, w, 3))
    return img


def _local_grid(size):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    return np.meshgrid(r, r)  # xx, yy


def _convex_hull(px, py):
    """Monotone-chain hull, counterclockwise vertex order."""
    pts = sorted(zip(px, py))
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def _rot(xx, yy, theta):
    c, s = np.cos(theta), np.sin(theta)
    return c * xx + s * yy, -s * xx + c * yy


def _particle_mask_and_shade(profile: ClassProfile, size, rng):
    """Boolean mask plus per-pixel brightness modulation on a local patch."""
    theta = rng.uniform(0.0, np.pi)
    if profile.shape == "rod":
        length = size
        width = max(size / profile.aspect, 2.5)
        patch = int(np.ceil(length)) + 4
        xx, yy = _local_grid(patch)
        xr, yr = _rot(xx, yy, theta)
        half = length / 2.0 - width / 2.0
        dx = np.abs(xr) - half
        d = np.sqrt(np.clip(dx, 0.0, None) ** 2 + yr**2)
        mask = d <= width / 2.0
        shade = 1.0 - 0.15 * (d / (width / 2.0 + 1e-9))
    elif profile.shape == "disk":
        patch = int(np.ceil(size)) + 4
        xx, yy = _local_grid(patch)
        r = np.sqrt(xx**2 + yy**2) / (size / 2.0)
        mask = r <= 1.0
        shade = 0.78 + 0.30 * r  # dimple: darker center, brighter rim
    elif profile.shape == "ring":
        patch = int(np.ceil(size)) + 4
        xx, yy = _local_grid(patch)
        r = np.sqrt(xx**2 + yy**2) / (size / 2.0)
        mask = r <= 1.0
        grain = rng.normal(0.0, 0.05, size=mask.shape)
        shade = np.where(r > 0.62, 0.82, 1.02) + grain
    elif profile.shape == "ellipse":
        patch = int(np.ceil(size)) + 4
        minor = rng.uniform(0.55, 0.85)
        xx, yy = _local_grid(patch)
        xr, yr = _rot(xx, yy, theta)
        r = np.sqrt((xr / (size / 2.0)) ** 2 + (yr / (minor * size / 2.0)) ** 2)
        mask = r <= 1.0
        shade = np.ones_like(r)
        nucleus = np.sqrt((xr - size * 0.08) ** 2 + yr**2) <= size * 0.14
        shade = np.where(nucleus, 0.6, shade) - 0.1 * r
    elif profile.shape == "polygon":
        patch = int(np.ceil(size)) + 4
        k = int(rng.integers(5, 9))
        angles = rng.uniform(0.0, 2 * np.pi, size=k)
        radii = rng.uniform(0.55, 1.0, size=k) * size / 2.0
        hull = _convex_hull(radii * np.cos(angles), radii * np.sin(angles))
        xx, yy = _local_grid(patch)
        mask = np.ones_like(xx, dtype=bool)
        for i in range(len(hull)):
            x1, y1 = hull[i]
            x2, y2 = hull[(i + 1) % len(hull)]
            mask &= (x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1) >= 0.0
        r = np.sqrt(xx**2 + yy**2) / (size / 2.0)
        shade = 1.05 - 0.2 * r
    else:  # pragma: no cover - guarded by ClassProfile validation
        raise AssertionError(profile.shape)
    return mask, shade


def _blend_particle(img, mask, shade, color, alpha, top, left):
    h, w = mask.shape
    region = img[top : top + h, left : left + w]
    a = (alpha * mask)[:, :, None]
    colored = np.asarray(color)[None, None, :] * shade[:, :, None]
    region[...] = region * (1.0 - a) + colored * a


def _mask_bbox(mask, top, left):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return np.array(
        [left + cols[0], top + rows[0], left + cols[-1] + 1, top + rows[-1] + 1],
        dtype=np.float64,
    )


def generate_scene(spec: SceneSpec, rng, return_masks=False):
    """Render one scene; returns ``(image uint8, AnnotationRecord)``.

    Placement is rejection-sampled so placed particle boxes overlap pairwise
    at IoU <= ``max_overlap_iou``; an impossible demand raises
    :class:`PlacementError` after bounded retries per particle.
    """
    if spec.magnification_mode == "mixed":
        magnification = "high" if rng.random() < 0.5 else "low"
    else:
        magnification = spec.magnification_mode
    img = _render_background(spec, rng)
    placed_boxes = np.zeros((0, 4))
    objects = []
    masks = []

    for profile in spec.profiles:
        if profile.magnification != magnification:
            continue
        count = int(rng.integers(profile.count_range[0], profile.count_range[1] + 1))
        for _ in range(count):
            for attempt in range(MAX_PLACE_RETRIES):
                size = rng.uniform(*profile.size_range)
                mask, shade = _particle_mask_and_shade(profile, size, rng)
                ph, pw = mask.shape
                if not mask.any() or ph + 2 > spec.height or pw + 2 > spec.width:
                    continue
                top = int(rng.integers(1, spec.height - ph - 1 + 1))
                left = int(rng.integers(1, spec.width - pw - 1 + 1))
                box = _mask_bbox(mask, top, left)
                if len(placed_boxes) and np.any(
                    iou_matrix(box, placed_boxes)[0] > spec.max_overlap_iou
                ):
                    continue
                color = np.asarray(profile.color, dtype=np.float64)
                color = color + rng.normal(0.0, profile.color_jitter, size=3)
                _blend_particle(img, mask, shade, color, profile.alpha, top, left)
                placed_boxes = np.vstack([placed_boxes, box])
                objects.append(GroundTruth(box=box, class_id=CLASS_IDS[profile.name]))
                if return_masks:
                    full = np.zeros((spec.height, spec.width), dtype=bool)
                    full[top : top + ph, left : left + pw] = mask
                    masks.append(full)
                break
            else:
                raise PlacementError(
                    f"could not place a {profile.name!r} particle within "
                    f"{MAX_PLACE_RETRIES} attempts (overlap cap {spec.max_overlap_iou})"
                )

    # noise blobs: rendered and annotated, but never a detection target
    n_noise = int(rng.integers(spec.noise_count[0], spec.noise_count[1] + 1))
    for _ in range(n_noise):
        size = rng.uniform(3.0, 9.0)
        patch = int(np.ceil(size)) + 4
        xx, yy = _local_grid(patch)
        r = np.sqrt(xx**2 + yy**2) / (size / 2.0)
        mask = r <= 1.0
        if patch + 2 > spec.height or patch + 2 > spec.width:
            continue
        top = int(rng.integers(1, spec.height - patch - 1 + 1))
        left = int(rng.integers(1, spec.width - patch - 1 + 1))
        level = np.asarray(spec.background_level) * rng.uniform(0.72, 0.9)
        _blend_particle(img, mask, 1.0 - 0.2 * r, level, 0.6, top, left)
        objects.append(GroundTruth(box=_mask_bbox(mask, top, left), class_id=NOISE_CLASS_ID))

    out = np.clip(np.round(img), 0, 255).astype(np.uint8)
    if spec.blur_sigma > 0:
        out = np.asarray(
            Image.fromarray(out).filter(ImageFilter.GaussianBlur(spec.blur_sigma)),
            dtype=np.uint8,
        )
    record = AnnotationRecord(image_id="", file="", magnification=magnification, objects=objects)
    if return_masks:
        return out, record, masks
    return out, record


# ---------------------------------------------------------------------------
# dataset protocol


def image_rng(seed, index):
    """Independent per-image generator so builds are order-independent."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(index)])))


def build_dataset(spec: SceneSpec, n_images: int, seed: int, out_dir):
    """Render ``n_images`` scenes to ``out_dir``; returns the manifest dict."""
    out_dir = os.fspath(out_dir)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    records = []
    entries = []
    for i in range(n_images):
        rng = image_rng(seed, i)
        image, record = generate_scene(spec, rng)
        image_id = f"img_{i:05d}"
        rel = os.path.join("images", f"{image_id}.png")
        Image.fromarray(image).save(os.path.join(out_dir, rel))
        record.image_id = image_id
        record.file = rel
        records.append(record)
        with open(os.path.join(out_dir, rel), "rb") as f:
            digest = hashlib.sha256(f.read()).hexdigest()
        entries.append({"id": image_id, "file": rel, "sha256": digest})
    save_annotations(records, os.path.join(out_dir, "annotations.json"))
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": int(seed),
        "n_images": int(n_images),
        "annotations": "annotations.json",
        "images": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def filter_noise_only(records):
    """Drop records annotated with nothing but noise (or nothing at all)."""
    return [r for r in records if r.target_objects()]


def split(records, test_fraction=1 / 20, train_fraction_of_trainval=5 / 6, seed=0):
    """Seeded shuffle into (train, val, test).

    The test count truncates ``n * test_fraction`` (a 5,376-record set holds
    exactly 268 test records at 1/20); the train count rounds
    ``|trainval| * fraction`` to the nearest integer.
    """
    if not 0.0 < test_fraction < 1.0 or not 0.0 < train_fraction_of_trainval < 1.0:
        raise SplitError("fractions must lie in (0, 1)")
    n = len(records)
    if n < 3:
        raise SplitError(f"need at least 3 records to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(n * test_fraction)
    trainval = order[n_test:]
    n_train = int(len(trainval) * train_fraction_of_trainval + 0.5)
    test = [records[i] for i in order[:n_test]]
    train = [records[i] for i in trainval[:n_train]]
    val = [records[i] for i in trainval[n_train:]]
    return train, val, test


def save_annotations(records, path):
    images = []
    for r in records:
        images.append(
            {
                "id": r.image_id,
                "file": r.file,
                "magnification": r.magnification,
                "objects": [
                    {"class": ID_TO_NAME[g.class_id], "bbox": [float(v) for v in g.box]}
                    for g in r.objects
                ],
            }
        )
    payload = {"schema_version": SCHEMA_VERSION, "images": images}
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)


def load_annotations(path):
    with open(path) as f:
        payload = json.load(f)
    version = payload.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{path}: unsupported annotation schema version {version!r} "
            f"(expected {SCHEMA_VERSION})"
        )
    records = []
    for im in payload["images"]:
        objects = [
            GroundTruth(
                box=np.asarray(o["bbox"], dtype=np.float64), class_id=CLASS_IDS[o["class"]]
            )
            for o in im["objects"]
        ]
        records.append(
            AnnotationRecord(
                image_id=im["id"],
                file=im["file"],
                magnification=im["magnification"],
                objects=objects,
            )
        )
    return records


def load_dataset(dataset_dir):
    """Load (record, image) pairs for every image in a built dataset."""
    dataset_dir = os.fspath(dataset_dir)
    with open(os.path.join(dataset_dir, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"unsupported manifest schema version {manifest.get('schema_version')!r}"
        )
    records = load_annotations(os.path.join(dataset_dir, manifest["annotations"]))
    pairs = []
    for r in records:
        image = np.asarray(Image.open(os.path.join(dataset_dir, r.file)), dtype=np.uint8)
        pairs.append((r, image))
    return pairs


def training_samples(pairs):
    """(image, target gts) tuples for the training loops; noise dropped."""
    return [(image, r.target_objects()) for r, image in pairs]
