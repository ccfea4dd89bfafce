"""Seeded synthetic assembly-progress dataset.

Each class shows a product "case" plus a cumulative set of part glyphs:
step k contains the case and the first k-1 parts, so consecutive steps
differ by exactly one glyph. The third part is deliberately tiny
(under 2% of the image area) so one adjacent pair is genuinely hard to
tell apart. Test splits additionally contain occluded images labeled as
errors, standing in for a hand or tool blocking the camera.

Rendering is a pure function of (spec, step, instance_seed): jitter is
drawn from a stream that does not depend on the step, so two renders of
the same instance at consecutive steps are pixel-identical outside the
added glyph. Images are quantized to the 8-bit grid before return,
which makes in-memory pixels equal to what a PNG round trip loads.
"""

from __future__ import annotations

import csv
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .labels import ERROR_LABEL, LabeledImage, step_label

SPLITS = ("train", "val", "test")
_SPLIT_CODE = {"train": 0, "val": 1, "test": 2}
_ERROR_SLOT = 99  # class slot reserved for occluded error images
_NOISE_SIGMA = 0.02
_COVER_ALPHA = 0.45
_PART_JIGGLE_PX = 1.5

# Part glyph table: (name, kind, geometry in units of the image side, color).
# Rectangles are (x0, y0, x1, y1); discs are (cx, cy, radius). Parts are
# drawn in order on top of the case, so adding part k only repaints the
# k-th glyph region. Part 3 ("chip") is the small-appearance-change part.
_CASE_OUTER = (0.14, 0.10, 0.86, 0.92)
_CASE_BORDER = 0.030
_CASE_BORDER_COLOR = (0.72, 0.73, 0.76)
_CASE_FILL = (0.13, 0.14, 0.16)
_PARTS = (
    ("psu", "rect", (0.18, 0.74, 0.44, 0.88), (0.62, 0.63, 0.66)),
    ("board", "rect", (0.30, 0.18, 0.82, 0.66), (0.16, 0.42, 0.24)),
    ("chip", "rect", (0.50, 0.30, 0.57, 0.37), (0.42, 0.52, 0.33)),
    ("cooler", "disc", (0.535, 0.335, 0.060), (0.55, 0.60, 0.63)),
    ("card", "rect", (0.34, 0.50, 0.80, 0.60), (0.22, 0.30, 0.72)),
    ("drive", "rect", (0.18, 0.14, 0.42, 0.26), (0.58, 0.40, 0.22)),
    ("cover", "rect", (0.15, 0.11, 0.85, 0.91), (0.55, 0.58, 0.62)),
)


@dataclass
class JitterSpec:
    """Per-image nuisance ranges; every range must be non-degenerate."""

    translation_px: tuple[float, float] = (-3.0, 3.0)
    brightness: tuple[float, float] = (0.82, 1.18)
    tint: tuple[float, float] = (0.00, 0.10)

    def validate(self) -> None:
        for name, (lo, hi) in (
            ("translation_px", self.translation_px),
            ("brightness", self.brightness),
            ("tint", self.tint),
        ):
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ValueError(f"jitter.{name} must be finite, got {(lo, hi)}")
            if not lo < hi:
                raise ValueError(f"jitter.{name} range must satisfy lo < hi, got {(lo, hi)}")


@dataclass
class OccluderSpec:
    """Occluder shapes drawn over error-class test images."""

    count: tuple[int, int] = (1, 3)
    coverage: tuple[float, float] = (0.30, 0.80)

    def validate(self) -> None:
        if not (1 <= self.count[0] <= self.count[1]):
            raise ValueError(f"occluder.count must satisfy 1 <= lo <= hi, got {self.count}")
        lo, hi = self.coverage
        if not (0.0 < lo < hi < 1.0):
            raise ValueError(f"occluder.coverage must satisfy 0 < lo < hi < 1, got {self.coverage}")


@dataclass
class DatasetSpec:
    n_steps: int = 8
    images_per_split: dict[str, int] = field(
        default_factory=lambda: {"train": 40, "val": 50, "test": 50}
    )
    error_test_images: int = 50
    image_size: int = 64
    jitter: JitterSpec = field(default_factory=JitterSpec)
    occluder: OccluderSpec = field(default_factory=OccluderSpec)
    seed: int = 0

    def validate(self) -> None:
        if self.n_steps < 3:
            raise ValueError(f"n_steps must be >= 3, got {self.n_steps}")
        if self.n_steps > len(_PARTS) + 1:
            raise ValueError(f"n_steps must be <= {len(_PARTS) + 1} (one part per added step)")
        if self.image_size < 32 or self.image_size % 16 != 0:
            raise ValueError(f"image_size must be >= 32 and divisible by 16, got {self.image_size}")
        unknown = set(self.images_per_split) - set(SPLITS)
        if unknown:
            raise ValueError(f"unknown splits {sorted(unknown)}; expected {SPLITS}")
        for split in SPLITS:
            if self.images_per_split.get(split, 0) < 0:
                raise ValueError(f"images_per_split[{split}] must be >= 0")
        if self.error_test_images < 0:
            raise ValueError("error_test_images must be >= 0")
        self.jitter.validate()
        self.occluder.validate()


@dataclass
class ManifestEntry:
    split: str
    id: str
    label: str
    path: str


@dataclass
class DatasetManifest:
    spec: DatasetSpec
    entries: list[ManifestEntry]

    def counts(self) -> dict[tuple[str, str], int]:
        out: dict[tuple[str, str], int] = {}
        for e in self.entries:
            key = (e.split, e.label)
            out[key] = out.get(key, 0) + 1
        return out

    def step_count(self) -> int:
        """Number of distinct step classes present in the entries."""
        from .labels import is_step_label, step_index

        steps = {step_index(e.label) for e in self.entries if is_step_label(e.label)}
        if not steps:
            raise ValueError("manifest contains no step-labeled entries")
        if steps != set(range(1, max(steps) + 1)):
            raise ValueError(f"step labels are not contiguous from 1: {sorted(steps)}")
        return max(steps)

    def verify(self) -> None:
        ids = [e.id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("manifest ids are not unique")
        counts = self.counts()
        for split in SPLITS:
            want = self.spec.images_per_split.get(split, 0)
            for step in range(1, self.spec.n_steps + 1):
                got = counts.get((split, step_label(step)), 0)
                if got != want:
                    raise ValueError(f"{split}/{step_label(step)}: expected {want} images, found {got}")
        for split in ("train", "val"):
            if counts.get((split, ERROR_LABEL), 0):
                raise ValueError(f"error images are only allowed in the test split, found in {split}")
        got_err = counts.get(("test", ERROR_LABEL), 0)
        if got_err != self.spec.error_test_images:
            raise ValueError(f"test/{ERROR_LABEL}: expected {self.spec.error_test_images}, found {got_err}")


def instance_seed(split: str, class_slot: int, index: int) -> int:
    """Stable per-image seed encoding split, class slot and index."""
    return _SPLIT_CODE[split] * 10**9 + class_slot * 10**6 + index


def _rng(spec: DatasetSpec, stream: int, inst: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, stream, inst])))


def _layout(spec: DatasetSpec, inst: int) -> dict:
    """Draw all jitter for one instance; independent of the step."""
    rng = _rng(spec, 0, inst)
    j = spec.jitter
    return {
        "tint": rng.uniform(j.tint[0], j.tint[1], size=3),
        "brightness": float(rng.uniform(j.brightness[0], j.brightness[1])),
        "shift": rng.uniform(j.translation_px[0], j.translation_px[1], size=2),
        "part_jiggle": rng.uniform(-_PART_JIGGLE_PX, _PART_JIGGLE_PX, size=(len(_PARTS), 2)),
        "noise": rng.normal(0.0, _NOISE_SIGMA, size=(spec.image_size, spec.image_size, 3)),
    }


def _rect_px(size, rel, shift):
    x0 = int(round(rel[0] * size + shift[0]))
    y0 = int(round(rel[1] * size + shift[1]))
    x1 = int(round(rel[2] * size + shift[0]))
    y1 = int(round(rel[3] * size + shift[1]))
    return x0, y0, x1, y1


def _fill_rect(canvas, x0, y0, x1, y1, color):
    s = canvas.shape[0]
    x0, x1 = max(0, x0), min(s, x1)
    y0, y1 = max(0, y0), min(s, y1)
    if x0 < x1 and y0 < y1:
        canvas[y0:y1, x0:x1, :] = color


def _rect_mask(size, x0, y0, x1, y1):
    m = np.zeros((size, size), dtype=bool)
    x0, x1 = max(0, x0), min(size, x1)
    y0, y1 = max(0, y0), min(size, y1)
    if x0 < x1 and y0 < y1:
        m[y0:y1, x0:x1] = True
    return m


def _disc_mask(size, cx, cy, radius):
    yy, xx = np.mgrid[0:size, 0:size]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2


def _part_mask(spec: DatasetSpec, part_idx: int, layout: dict) -> np.ndarray:
    size = spec.image_size
    name, kind, geo, _color = _PARTS[part_idx]
    shift = layout["shift"] + layout["part_jiggle"][part_idx]
    if kind == "rect":
        return _rect_mask(size, *_rect_px(size, geo, shift))
    cx = geo[0] * size + shift[0]
    cy = geo[1] * size + shift[1]
    return _disc_mask(size, cx, cy, geo[2] * size)


def _render_base(spec: DatasetSpec, step: int, layout: dict) -> np.ndarray:
    """Canvas with case and the first step-1 parts, before noise/brightness."""
    size = spec.image_size
    canvas = np.empty((size, size, 3), dtype=np.float64)
    canvas[:, :] = np.asarray((0.05, 0.06, 0.08)) + layout["tint"]

    ox0, oy0, ox1, oy1 = _rect_px(size, _CASE_OUTER, layout["shift"])
    b = max(1, int(round(_CASE_BORDER * size)))
    _fill_rect(canvas, ox0, oy0, ox1, oy1, _CASE_BORDER_COLOR)
    _fill_rect(canvas, ox0 + b, oy0 + b, ox1 - b, oy1 - b, _CASE_FILL)

    for p in range(step - 1):
        mask = _part_mask(spec, p, layout)
        color = np.asarray(_PARTS[p][3])
        if _PARTS[p][0] == "cover":
            canvas[mask] = (1.0 - _COVER_ALPHA) * canvas[mask] + _COVER_ALPHA * color
        else:
            canvas[mask] = color
    return canvas


def _finish(canvas: np.ndarray, layout: dict) -> np.ndarray:
    out = np.clip(canvas * layout["brightness"] + layout["noise"], 0.0, 1.0)
    # Snap to the 8-bit grid so render output equals a PNG round trip.
    return (np.round(out * 255.0) / 255.0).astype(np.float32)


def product_region_mask(spec: DatasetSpec, inst: int) -> np.ndarray:
    """Boolean mask of the case bounding box for this instance's jitter."""
    layout = _layout(spec, inst)
    return _rect_mask(spec.image_size, *_rect_px(spec.image_size, _CASE_OUTER, layout["shift"]))


def part_region_mask(spec: DatasetSpec, part_idx: int, inst: int) -> np.ndarray:
    """Boolean mask of one part glyph (0-based index into the part table)."""
    return _part_mask(spec, part_idx, _layout(spec, inst))


def render_step_image(spec: DatasetSpec, step: int, inst: int) -> LabeledImage:
    """Render the product at a given step; pure in (spec, step, inst)."""
    spec.validate()
    if not 1 <= step <= spec.n_steps:
        raise ValueError(f"step must be in 1..{spec.n_steps}, got {step}")
    layout = _layout(spec, inst)
    pixels = _finish(_render_base(spec, step, layout), layout)
    return LabeledImage(pixels, step_label(step), f"s{step:02d}_i{inst}")


def render_occluded_image(spec: DatasetSpec, step: int, inst: int) -> LabeledImage:
    """A step image with 1-3 opaque occluders covering 30-80% of the product.

    Occluder proposals are rejected until the union of their masks covers
    a fraction of the product region inside the configured range; a
    centered single rectangle of mid-range coverage is the deterministic
    last resort. Shapes are clipped to the frame.
    """
    base = render_step_image(spec, step, inst)
    layout = _layout(spec, inst)
    size = spec.image_size
    product = _rect_mask(size, *_rect_px(size, _CASE_OUTER, layout["shift"]))
    product_area = int(product.sum())
    rng = _rng(spec, 1, inst)
    lo, hi = spec.occluder.coverage
    margin = 0.02 * (hi - lo)

    px0, py0, px1, py1 = _rect_px(size, _CASE_OUTER, layout["shift"])
    pw, ph = px1 - px0, py1 - py0

    chosen = None
    for _ in range(64):
        k = int(rng.integers(spec.occluder.count[0], spec.occluder.count[1] + 1))
        shapes = []
        union = np.zeros((size, size), dtype=bool)
        # Aim each shape at roughly an equal share of the target coverage.
        target = rng.uniform(lo + margin, hi - margin)
        for _s in range(k):
            cx = rng.uniform(px0 + 0.15 * pw, px1 - 0.15 * pw)
            cy = rng.uniform(py0 + 0.15 * ph, py1 - 0.15 * ph)
            frac = target / k
            if rng.random() < 0.5:
                w = pw * math.sqrt(frac) * rng.uniform(0.85, 1.35)
                h = ph * math.sqrt(frac) * rng.uniform(0.85, 1.35)
                m = _rect_mask(size, int(cx - w / 2), int(cy - h / 2), int(cx + w / 2), int(cy + h / 2))
                shapes.append(("rect", m))
            else:
                r = math.sqrt(frac * pw * ph / math.pi) * rng.uniform(0.9, 1.3)
                m = _disc_mask(size, cx, cy, r)
                shapes.append(("disc", m))
            union |= m
        frac = (union & product).sum() / product_area
        if lo + margin <= frac <= hi - margin:
            chosen = shapes
            break
    if chosen is None:
        # Guaranteed mid-range coverage: one rectangle centered on the case.
        f = math.sqrt(0.5 * (lo + hi))
        w, h = pw * f, ph * f
        cx, cy = (px0 + px1) / 2, (py0 + py1) / 2
        m = _rect_mask(size, int(cx - w / 2), int(cy - h / 2), int(cx + w / 2), int(cy + h / 2))
        chosen = [("rect", m)]

    pixels = base.pixels.astype(np.float64)
    for _kind, m in chosen:
        color = rng.uniform(0.15, 0.95, size=3)
        color[int(rng.integers(0, 3))] = rng.uniform(0.6, 0.95)
        pixels[m] = color
    pixels = (np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)
    return LabeledImage(pixels, ERROR_LABEL, f"err_s{step:02d}_i{inst}")


def occlusion_fraction(spec: DatasetSpec, step: int, inst: int) -> float:
    """Measured product-region coverage of the occluders for one instance."""
    clean = render_step_image(spec, step, inst)
    occluded = render_occluded_image(spec, step, inst)
    product = product_region_mask(spec, inst)
    changed = np.any(clean.pixels != occluded.pixels, axis=2)
    return float((changed & product).sum() / product.sum())


def _save_png(pixels: np.ndarray, path: Path) -> None:
    arr = np.round(pixels * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image(path: Path | str, label: str, image_id: str) -> LabeledImage:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return LabeledImage(arr, label, image_id)


def generate_dataset(spec: DatasetSpec, root: Path | str) -> DatasetManifest:
    """Write train/val/test splits plus occluded error test images.

    Layout: <root>/<split>/<step_XX|error>/<id>.png with a manifest.csv
    at the root. Reproducible bit for bit for a fixed spec. On failure,
    everything this call created is removed before the error is re-raised.
    """
    spec.validate()
    root = Path(root)
    created_root = not root.exists()
    try:
        root.mkdir(parents=True, exist_ok=True)
        entries: list[ManifestEntry] = []
        for split in SPLITS:
            count = spec.images_per_split.get(split, 0)
            for step in range(1, spec.n_steps + 1):
                sub = root / split / step_label(step)
                sub.mkdir(parents=True, exist_ok=True)
                for i in range(count):
                    inst = instance_seed(split, step, i)
                    img = render_step_image(spec, step, inst)
                    image_id = f"{split}_{step_label(step)}_{i:04d}"
                    rel = f"{split}/{step_label(step)}/{image_id}.png"
                    _save_png(img.pixels, root / rel)
                    entries.append(ManifestEntry(split, image_id, img.label, rel))
        if spec.error_test_images:
            sub = root / "test" / ERROR_LABEL
            sub.mkdir(parents=True, exist_ok=True)
            for i in range(spec.error_test_images):
                step = 1 + i % spec.n_steps
                inst = instance_seed("test", _ERROR_SLOT, i)
                img = render_occluded_image(spec, step, inst)
                image_id = f"test_{ERROR_LABEL}_{i:04d}"
                rel = f"test/{ERROR_LABEL}/{image_id}.png"
                _save_png(img.pixels, root / rel)
                entries.append(ManifestEntry("test", image_id, ERROR_LABEL, rel))
        manifest = DatasetManifest(spec, entries)
        manifest.verify()
        save_manifest(manifest, root / "manifest.csv")
        return manifest
    except BaseException:
        if created_root:
            shutil.rmtree(root, ignore_errors=True)
        else:
            for split in SPLITS:
                shutil.rmtree(root / split, ignore_errors=True)
            (root / "manifest.csv").unlink(missing_ok=True)
        raise


def save_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["split", "id", "label", "path"])
        for e in manifest.entries:
            writer.writerow([e.split, e.id, e.label, e.path])


def load_manifest(root: Path | str, spec: DatasetSpec | None = None) -> DatasetManifest:
    """Read manifest.csv under `root`; `spec` is attached when provided."""
    root = Path(root)
    path = root / "manifest.csv"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.csv under {root}")
    entries = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            entries.append(ManifestEntry(row["split"], row["id"], row["label"], row["path"]))
    return DatasetManifest(spec if spec is not None else DatasetSpec(), entries)


def load_split(root: Path | str, manifest: DatasetManifest, split: str) -> list[LabeledImage]:
    root = Path(root)
    return [
        load_image(root / e.path, e.label, e.id) for e in manifest.entries if e.split == split
    ]
