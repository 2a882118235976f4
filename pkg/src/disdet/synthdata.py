"""Two-domain synthetic shape detection dataset.

Source scenes are clean geometric shapes on a low-frequency value-noise
background. Target scenes are the same renderer followed by a fixed
appearance-shift pipeline (fog, blur, noise, brightness). Everything is a
pure function of (seed, config) so datasets are byte-reproducible.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import DomainShiftParams, SceneConfig
from .errors import DatasetError

SOURCE = 0
TARGET = 1

# Gray level the fog blend pulls pixels toward.
FOG_GRAY = 0.7

CLASS_NAMES = ("rectangle", "ellipse", "triangle")

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class BoxAnnotation:
    class_id: int
    box: tuple[float, float, float, float]  # (x1, y1, x2, y2), pixel coords


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray  # H x W x 3 float32 in [0, 1]
    domain: int
    annotations: tuple[BoxAnnotation, ...]
    id: str


def _value_noise(rng, res: int, grid_n: int) -> np.ndarray:
    """Low-frequency texture: bilinear upsample of a random coarse grid."""
    grid = rng.uniform(0.0, 1.0, size=(grid_n, grid_n))
    t = np.linspace(0.0, grid_n - 1.0, res)
    i0 = np.minimum(np.floor(t).astype(int), grid_n - 2)
    f = t - i0
    rows = grid[i0, :] * (1.0 - f)[:, None] + grid[i0 + 1, :] * f[:, None]
    return rows[:, i0] * (1.0 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def _background(rng, cfg: SceneConfig) -> np.ndarray:
    tex = _value_noise(rng, cfg.resolution, 5) + 0.25 * _value_noise(rng, cfg.resolution, 17)
    tex /= 1.25
    gray = cfg.bg_low + (cfg.bg_high - cfg.bg_low) * tex
    return np.repeat(gray[:, :, None], 3, axis=2).astype(np.float32)


def _shape_mask(class_id: int, box, apex_frac: float, res: int) -> np.ndarray:
    """Boolean mask of the shape inscribed in `box`, pixel-center sampling."""
    x1, y1, x2, y2 = box
    ys = np.arange(res) + 0.5
    xs = np.arange(res) + 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    if class_id == 0:  # rectangle fills its box
        return (xx >= x1) & (xx < x2) & (yy >= y1) & (yy < y2)
    if class_id == 1:  # ellipse inscribed in the box
        cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
        a, b = (x2 - x1) / 2.0, (y2 - y1) / 2.0
        return ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    if class_id == 2:  # triangle: apex on the top edge, base on the bottom
        ax = x1 + apex_frac * (x2 - x1)
        verts = ((ax, y1), (x1, y2), (x2, y2))
        mask = np.ones((res, res), dtype=bool)
        for i in range(3):
            px, py = verts[i]
            qx, qy = verts[(i + 1) % 3]
            # inside = same side as the third vertex for every edge
            rx, ry = verts[(i + 2) % 3]
            cross = (qx - px) * (yy - py) - (qy - py) * (xx - px)
            ref = (qx - px) * (ry - py) - (qy - py) * (rx - px)
            mask &= cross * ref >= 0.0
        return mask
    raise ValueError(f"unknown class_id {class_id}")


def _place_boxes(rng, cfg: SceneConfig, count: int) -> list[tuple[int, int, int, int]]:
    """Sample `count` boxes, rejecting heavy overlap until the cap relaxes."""
    boxes: list[tuple[int, int, int, int]] = []
    margin = 2
    while len(boxes) < count:
        cap = cfg.max_overlap_iou
        for tries in range(400):
            w = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            h = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            x1 = int(rng.integers(margin, cfg.resolution - margin - w + 1))
            y1 = int(rng.integers(margin, cfg.resolution - margin - h + 1))
            cand = (x1, y1, x1 + w, y1 + h)
            if tries >= 200:  # relax so the requested count is always met
                cap = 1.0
            if all(_box_iou(cand, b) <= cap for b in boxes):
                boxes.append(cand)
                break
        else:
            boxes.append(cand)
    return boxes


def _box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def render_scene(seed: int, scene_cfg: SceneConfig) -> tuple[np.ndarray, tuple[BoxAnnotation, ...]]:
    """Render the clean (pre-shift) scene for a seed."""
    scene_cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    pixels = _background(rng, scene_cfg)
    count = int(rng.integers(scene_cfg.min_objects, scene_cfg.max_objects + 1))
    boxes = _place_boxes(rng, scene_cfg, count)
    annos = []
    for box in boxes:
        class_id = int(rng.integers(0, scene_cfg.num_classes))
        apex_frac = float(rng.uniform(0.2, 0.8))
        value = float(rng.uniform(0.55, 0.9))
        tint = rng.uniform(-0.08, 0.08, size=3)
        color = np.clip(value + tint, 0.0, 1.0).astype(np.float32)
        mask = _shape_mask(class_id, box, apex_frac, scene_cfg.resolution)
        pixels[mask] = color
        annos.append(BoxAnnotation(class_id, tuple(float(v) for v in box)))
    return pixels, tuple(annos)


def apply_domain_shift(pixels: np.ndarray, shift: DomainShiftParams, seed: int) -> np.ndarray:
    """Fog blend, box blur, additive Gaussian noise, brightness, then clamp."""
    shift.validate()
    out = pixels.astype(np.float64, copy=True)
    if shift.fog_alpha > 0.0:
        out = (1.0 - shift.fog_alpha) * out + shift.fog_alpha * FOG_GRAY
    if shift.blur_radius > 0:
        k = 2 * int(shift.blur_radius) + 1
        out = ndimage.uniform_filter(out, size=(k, k, 1), mode="nearest")
    if shift.noise_sigma > 0.0:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        out = out + rng.normal(0.0, shift.noise_sigma, size=out.shape)
    if shift.brightness_shift != 0.0:
        out = out + shift.brightness_shift
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def generate_scene(
    seed: int, domain: int, shift: DomainShiftParams, scene_cfg: SceneConfig
) -> ImageSample:
    """Full sample for one seed; target domain runs the shift pipeline."""
    pixels, annos = render_scene(seed, scene_cfg)
    if domain == TARGET:
        pixels = apply_domain_shift(pixels, shift, seed)
        sample_id = f"tgt_{seed:08d}"
    elif domain == SOURCE:
        sample_id = f"src_{seed:08d}"
    else:
        raise ValueError(f"domain must be {SOURCE} or {TARGET}, got {domain}")
    return ImageSample(pixels=pixels, domain=domain, annotations=annos, id=sample_id)


def quantize(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)


def write_dataset(samples, dir_path, meta: dict | None = None) -> dict:
    """Write PNGs plus a JSON manifest; returns the manifest dict."""
    dir_path = Path(dir_path)
    (dir_path / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        rel = f"images/{s.id}.png"
        Image.fromarray(quantize(s.pixels), mode="RGB").save(dir_path / rel)
        entries.append(
            {
                "id": s.id,
                "domain": int(s.domain),
                "image_path": rel,
                "boxes": [
                    {
                        "class": int(a.class_id),
                        "x1": float(a.box[0]),
                        "y1": float(a.box[1]),
                        "x2": float(a.box[2]),
                        "y2": float(a.box[3]),
                    }
                    for a in s.annotations
                ],
            }
        )
    manifest = {"format_version": FORMAT_VERSION, "meta": meta or {}, "samples": entries}
    with open(dir_path / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def load_dataset(dir_path) -> list[ImageSample]:
    """Load a dataset directory; raises DatasetError naming any bad entry."""
    dir_path = Path(dir_path)
    manifest_path = dir_path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetError(f"no {MANIFEST_NAME} in {dir_path}")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"corrupt manifest {manifest_path}: {e}")
    entries = manifest["samples"] if isinstance(manifest, dict) else manifest
    meta = manifest.get("meta", {}) if isinstance(manifest, dict) else {}
    num_classes = meta.get("num_classes")
    samples = []
    for entry in entries:
        img_path = dir_path / entry["image_path"]
        if not img_path.is_file():
            raise DatasetError(f"sample {entry['id']}: missing image file {img_path}")
        try:
            with Image.open(img_path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except OSError as e:
            raise DatasetError(f"sample {entry['id']}: unreadable image {img_path}: {e}")
        h, w = arr.shape[:2]
        annos = []
        for b in entry["boxes"]:
            cls = int(b["class"])
            if cls < 0 or (num_classes is not None and cls >= num_classes):
                raise DatasetError(
                    f"sample {entry['id']}: class {cls} out of range in {manifest_path}"
                )
            box = (float(b["x1"]), float(b["y1"]), float(b["x2"]), float(b["y2"]))
            if not (0 <= box[0] < box[2] <= w and 0 <= box[1] < box[3] <= h):
                raise DatasetError(f"sample {entry['id']}: degenerate box {box}")
            annos.append(BoxAnnotation(cls, box))
        samples.append(
            ImageSample(
                pixels=arr,
                domain=int(entry["domain"]),
                annotations=tuple(annos),
                id=str(entry["id"]),
            )
        )
    return samples


def generate_pair(
    out_dir,
    n_source: int,
    n_target: int,
    seed: int,
    shift: DomainShiftParams,
    scene_cfg: SceneConfig,
) -> tuple[Path, Path]:
    """Generate DIR/source and DIR/target dataset directories."""
    out_dir = Path(out_dir)
    meta_common = {
        "seed": seed,
        "resolution": scene_cfg.resolution,
        "num_classes": scene_cfg.num_classes,
        "scene": dataclasses.asdict(scene_cfg),
    }
    src = [generate_scene(seed + i, SOURCE, shift, scene_cfg) for i in range(n_source)]
    tgt = [
        generate_scene(seed + n_source + j, TARGET, shift, scene_cfg) for j in range(n_target)
    ]
    write_dataset(src, out_dir / "source", meta={**meta_common, "domain": "source"})
    write_dataset(
        tgt,
        out_dir / "target",
        meta={**meta_common, "domain": "target", "shift": dataclasses.asdict(shift)},
    )
    return out_dir / "source", out_dir / "target"
