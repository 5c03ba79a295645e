"""Synthetic captioned scenes with ground-truth region boxes.

Each scene is a 64x64 RGB image of 2-3 solid colored shapes placed on a
jittered grid (so they never overlap), five template captions, and one
(phrase, bounding box) region annotation per object.  No two objects in a
scene share the same (shape, color) pair, so every region phrase points at
exactly one object.

On disk a dataset is a directory::

    manifest.jsonl      one JSON object per scene
    images/NNNNNN.ppm   binary P6 rasters
    vocab.txt           one token per line, line 0 is "<unk>"
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError, ManifestError
from .ppm import read_ppm, write_ppm
from .text import Vocab

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "magenta": (255, 0, 255),
    "cyan": (0, 255, 255),
}

BBox = tuple[int, int, int, int]  # (x_min, y_min, width, height)


@dataclass
class SceneConfig:
    canvas: int = 64
    grid: int = 2            # grid x grid placement cells
    min_objects: int = 2
    max_objects: int = 3
    min_size: int = 22       # large relative to the cell: objects must survive
    max_size: int = 28       # a 16x downsample with their identity intact
    cell_margin: int = 2
    captions_per_scene: int = 5


@dataclass(eq=False)
class SceneObject:
    shape: str
    color: str
    bbox: BBox

    @property
    def phrase(self) -> str:
        return f"a {self.color} {self.shape}"

    def __eq__(self, other) -> bool:
        return (isinstance(other, SceneObject)
                and (self.shape, self.color, tuple(self.bbox))
                == (other.shape, other.color, tuple(other.bbox)))


@dataclass(eq=False)
class Scene:
    scene_id: int
    image: np.ndarray                      # (3, S, S) uint8
    objects: list[SceneObject]
    captions: list[str]
    regions: list[tuple[str, BBox]]        # one (phrase, bbox) per object

    def __eq__(self, other) -> bool:
        return (isinstance(other, Scene)
                and self.scene_id == other.scene_id
                and np.array_equal(self.image, other.image)
                and self.objects == other.objects
                and self.captions == other.captions
                and [(p, tuple(b)) for p, b in self.regions]
                == [(p, tuple(b)) for p, b in other.regions])


@dataclass
class Dataset:
    scenes: list[Scene] = field(default_factory=list)
    vocab: Vocab | None = None

    def regions(self):
        """Flat iterator of (image, phrase, bbox) over all scenes."""
        for scene in self.scenes:
            for phrase, bbox in scene.regions:
                yield scene.image, phrase, bbox


def _shape_mask(shape: str, size: int) -> np.ndarray:
    # Every shape carries its own fill texture; the orientation/frequency
    # signatures keep the four classes separable even after aggressive
    # spatial downsampling.
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "circle":
        c = (size - 1) / 2.0
        return (xx - c) ** 2 + (yy - c) ** 2 <= (size / 2.0) ** 2
    if shape == "square":
        return (yy % 4) < 2  # horizontal stripes
    if shape == "triangle":
        half = (size - 1) / 2.0
        solid = np.abs(xx - half) <= half * (yy + 1) / size  # apex up, base down
        return solid & ((xx % 4) < 2)  # vertical stripes
    if shape == "cross":
        t = max(2, size // 4)
        lo, hi = (size - t) // 2, (size - t) // 2 + t
        return ((yy >= lo) & (yy < hi)) | ((xx >= lo) & (xx < hi))
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(objects: list[SceneObject], canvas: int) -> np.ndarray:
    image = np.zeros((3, canvas, canvas), dtype=np.uint8)
    for obj in objects:
        x, y, w, h = obj.bbox
        mask = _shape_mask(obj.shape, w)
        rgb = COLORS[obj.color]
        for ch in range(3):
            image[ch, y:y + h, x:x + w][mask] = rgb[ch]
    return image


def generate_scene(seed, cfg: SceneConfig = SceneConfig(), scene_id: int = -1) -> Scene:
    """Deterministically build one scene from ``seed`` (an int or tuple of ints)."""
    rng = np.random.default_rng(seed)
    cells = cfg.grid * cfg.grid
    cell_px = cfg.canvas // cfg.grid
    if cfg.max_objects > cells:
        raise GenerationError(f"cannot place {cfg.max_objects} objects on a {cfg.grid}x{cfg.grid} grid")
    if cfg.max_size + 2 * cfg.cell_margin > cell_px:
        raise GenerationError(f"objects of size {cfg.max_size} do not fit in {cell_px}px grid cells")

    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    combos = [(s, c) for s in SHAPES for c in COLORS]
    picks = rng.choice(len(combos), size=n, replace=False)
    cell_ids = rng.choice(cells, size=n, replace=False)

    objects = []
    for combo_idx, cell_idx in zip(picks, cell_ids):
        shape, color = combos[int(combo_idx)]
        size = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        cx = (int(cell_idx) % cfg.grid) * cell_px
        cy = (int(cell_idx) // cfg.grid) * cell_px
        slack = cell_px - size - 2 * cfg.cell_margin
        x = cx + cfg.cell_margin + int(rng.integers(0, slack + 1))
        y = cy + cfg.cell_margin + int(rng.integers(0, slack + 1))
        objects.append(SceneObject(shape, color, (x, y, size, size)))

    captions = caption_objects(objects, rng, cfg.captions_per_scene)
    regions = [(obj.phrase, obj.bbox) for obj in objects]
    return Scene(scene_id, render_scene(objects, cfg.canvas), objects, captions, regions)


def caption_objects(objects: list[SceneObject], rng: np.random.Generator,
                    count: int = 5) -> list[str]:
    """Sample ``count`` template captions over the scene's objects.

    Templates: "a {color} {shape}", "the {shape} is {color}", and the
    two-object conjunction.  When the scene has two or more objects, at
    least one caption mentions two of them.  Captions are distinct as long
    as the template pool allows it.
    """
    singles = [obj.phrase for obj in objects]
    attrs = [f"the {obj.shape} is {obj.color}" for obj in objects]
    pairs = [f"{a.phrase} and {b.phrase}"
             for i, a in enumerate(objects) for j, b in enumerate(objects) if i != j]

    chosen = []
    if pairs:
        chosen.append(pairs[int(rng.integers(0, len(pairs)))])
    pool = [c for c in singles + attrs + pairs if c not in chosen]
    while len(chosen) < count and pool:
        idx = int(rng.integers(0, len(pool)))
        chosen.append(pool.pop(idx))
    full = singles + attrs + pairs
    while len(chosen) < count:  # tiny scenes: repeat once the pool is exhausted
        chosen.append(full[int(rng.integers(0, len(full)))])
    return chosen


def caption_scene(scene: Scene, seed, count: int = 5) -> list[str]:
    """Re-draw captions for an existing scene from a fresh seed."""
    return caption_objects(scene.objects, np.random.default_rng(seed), count)


def build_vocab(scenes: list[Scene]) -> Vocab:
    """Sorted vocabulary of every token appearing in captions and region phrases."""
    tokens: set[str] = set()
    for scene in scenes:
        for text in scene.captions + [p for p, _ in scene.regions]:
            tokens.update(re.findall(r"[a-z0-9]+", text.lower()))
    return Vocab(sorted(tokens))


def generate_dataset(n_scenes: int, seed: int, cfg: SceneConfig = SceneConfig()) -> Dataset:
    """Generate ``n_scenes`` scenes; scene i is keyed by (seed, i), so datasets
    built from different base seeds never share a scene stream."""
    scenes = [generate_scene((seed, i), cfg, scene_id=i) for i in range(n_scenes)]
    return Dataset(scenes, build_vocab(scenes))


def write_dataset(dataset: Dataset, out_dir) -> None:
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    with open(os.path.join(out_dir, "manifest.jsonl"), "w", encoding="utf-8") as fh:
        for scene in dataset.scenes:
            rel = f"images/{scene.scene_id:06d}.ppm"
            write_ppm(os.path.join(out_dir, rel), scene.image)
            record = {
                "id": scene.scene_id,
                "image": rel,
                "captions": scene.captions,
                "regions": [{"phrase": p, "bbox": list(b)} for p, b in scene.regions],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    vocab = dataset.vocab if dataset.vocab is not None else build_vocab(dataset.scenes)
    vocab.to_file(os.path.join(out_dir, "vocab.txt"))


def read_dataset(in_dir) -> Dataset:
    scenes = []
    manifest = os.path.join(in_dir, "manifest.jsonl")
    with open(manifest, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                scene_id = int(record["id"])
                image = read_ppm(os.path.join(in_dir, record["image"]))
                captions = [str(c) for c in record["captions"]]
                regions = [(str(r["phrase"]), tuple(int(v) for v in r["bbox"]))
                           for r in record["regions"]]
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ManifestError(line_no, str(exc)) from None
            objects = [_object_from_region(p, b) for p, b in regions]
            scenes.append(Scene(scene_id, image, objects, captions, regions))
    return Dataset(scenes, Vocab.from_file(os.path.join(in_dir, "vocab.txt")))


def _object_from_region(phrase: str, bbox: BBox) -> SceneObject:
    words = phrase.split()
    if len(words) == 3 and words[1] in COLORS and words[2] in SHAPES:
        return SceneObject(words[2], words[1], bbox)
    raise ValueError(f"region phrase {phrase!r} does not name a color and shape")


def scale_and_crop(image: np.ndarray, out_size: int) -> np.ndarray:
    """Resize so the smaller side equals ``out_size`` then center-crop square.

    Test-time alternative to feeding images at native size; synthetic scenes
    are already square so this is exercised only by its unit test.
    """
    from .localize import bilinear_resize
    _, h, w = image.shape
    scale = out_size / min(h, w)
    new_h, new_w = max(out_size, round(h * scale)), max(out_size, round(w * scale))
    resized = np.stack([bilinear_resize(image[ch].astype(np.float64), new_h, new_w)
                        for ch in range(3)])
    y0 = (new_h - out_size) // 2
    x0 = (new_w - out_size) // 2
    out = resized[:, y0:y0 + out_size, x0:x0 + out_size]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def random_crop_resize(image: np.ndarray, rng: np.random.Generator,
                       out_size: int, min_frac: float = 0.6) -> np.ndarray:
    """Random rectangular crop, resized back to a square of ``out_size``.

    Optional train-time augmentation; off by default for synthetic data.
    """
    from .localize import bilinear_resize
    _, h, w = image.shape
    ch = int(rng.integers(int(h * min_frac), h + 1))
    cw = int(rng.integers(int(w * min_frac), w + 1))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    crop = image[:, y0:y0 + ch, x0:x0 + cw].astype(np.float64)
    out = np.stack([bilinear_resize(crop[c], out_size, out_size) for c in range(3)])
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)
