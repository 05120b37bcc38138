"""Procedural sprite corpus.

A sprite's class fixes its shape; a concept additionally fixes two colors, a
texture and a size, so every reference of one concept shows an identical
sprite pasted at different positions over different backgrounds. Backgrounds
are flat or linear-gradient fields whose base color depends on the scene word
(beach, lawn, street, night).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .imageio import from_u8, load_image, save_image
from .seeding import make_rng
from .text import BACKGROUNDS, CLASSES, VocabularyError

SIZE = 32

SHAPES = {
    "dog": "circle", "cat": "triangle", "car": "bar", "bird": "diamond",
    "house": "square", "tree": "tall", "cup": "ring", "chair": "plus",
}

PALETTE = np.array([
    (230, 30, 30), (250, 140, 0), (250, 230, 20), (150, 255, 0), (0, 220, 230),
    (30, 60, 240), (150, 40, 200), (240, 0, 160), (250, 250, 250), (120, 60, 20),
], dtype=np.float64)

BG_BASE = {
    "beach": (215, 195, 150),
    "lawn": (60, 130, 55),
    "street": (105, 105, 110),
    "night": (20, 25, 60),
}

SCENE_PHRASE = {"beach": "on a beach", "lawn": "on a lawn", "street": "on a street", "night": "at night"}

N_TEXTURES = 4


def shape_mask(shape: str, size: int) -> np.ndarray:
    c = (np.arange(size) + 0.5) / size * 2 - 1
    y, x = np.meshgrid(c, c, indexing="ij")
    r2 = x * x + y * y
    masks = {
        "circle": r2 <= 1.0,
        "triangle": (y >= -0.9) & (np.abs(x) <= (y + 0.9) / 1.9),
        "bar": (np.abs(x) <= 1.0) & (np.abs(y) <= 0.5),
        "diamond": np.abs(x) + np.abs(y) <= 1.0,
        "square": (np.abs(x) <= 0.8) & (np.abs(y) <= 0.8),
        "tall": (x / 0.55) ** 2 + y * y <= 1.0,
        "ring": (r2 <= 1.0) & (r2 >= 0.3),
        "plus": (np.abs(x) <= 0.35) | (np.abs(y) <= 0.35),
    }
    return masks[shape]


def texture(tex: int, size: int) -> np.ndarray:
    """Boolean (size, size) selector for the secondary color."""
    yy, xx = np.mgrid[:size, :size]
    if tex == 0:
        return (yy // 2) % 2 == 1
    if tex == 1:
        return (xx // 2) % 2 == 1
    if tex == 2:
        return ((yy // 3) + (xx // 3)) % 2 == 1
    c = (size - 1) / 2
    return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 4) ** 2


def render_background(scene: str, rng: np.random.Generator) -> np.ndarray:
    base = np.asarray(BG_BASE[scene]) + rng.integers(-12, 13, size=3)
    img = np.broadcast_to(base[:, None, None], (3, SIZE, SIZE)).astype(np.float64)
    if rng.random() < 0.5:
        angle = rng.uniform(0, 2 * np.pi)
        c = np.arange(SIZE) - (SIZE - 1) / 2
        yy, xx = np.meshgrid(c, c, indexing="ij")
        ramp = (np.cos(angle) * xx + np.sin(angle) * yy) / SIZE * 30.0
        img = img + ramp[None]
    return img


def compose(bg: np.ndarray, shape: str, colors, tex: int, size: int, top: int, left: int) -> np.ndarray:
    """Paste a sprite over a background (0..255 floats) and quantize to [-1, 1]."""
    img = bg.copy()
    m = shape_mask(shape, size)
    sel = texture(tex, size)
    c0, c1 = np.asarray(colors[0], dtype=np.float64), np.asarray(colors[1], dtype=np.float64)
    patch = np.where(sel[None], c1[:, None, None], c0[:, None, None])
    region = img[:, top:top + size, left:left + size]
    img[:, top:top + size, left:left + size] = np.where(m[None], patch, region)
    return from_u8(np.clip(np.rint(img), 0, 255).astype(np.uint8))


def _place(rng, size: int) -> tuple[int, int]:
    lo, hi = 2, SIZE - 2 - size
    return int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))


def random_sprite(rng: np.random.Generator, cls: str, scene: str | None = None,
                  size: int | None = None) -> tuple[np.ndarray, str]:
    scene = scene or BACKGROUNDS[rng.integers(len(BACKGROUNDS))]
    pair = rng.choice(len(PALETTE), size=2, replace=False)
    size = size or int(rng.choice([12, 14, 16]))
    tex = int(rng.integers(N_TEXTURES))
    top, left = _place(rng, size)
    img = compose(render_background(scene, rng), SHAPES[cls], PALETTE[pair], tex, size, top, left)
    return img, scene


# -- corpora ----------------------------------------------------------------------

@dataclass
class DatasetManifest:
    version: int = 1
    entries: list[dict] = field(default_factory=list)
    images: list[np.ndarray] = field(default_factory=list, repr=False)

    def pairs(self) -> list[tuple[np.ndarray, str]]:
        return [(img, e["caption"]) for img, e in zip(self.images, self.entries)]

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for img, e in zip(self.images, self.entries):
            save_image(img, out / e["path"])
        path = out / "manifest.json"
        path.write_text(json.dumps({"version": self.version, "entries": self.entries}, indent=1))
        return path

    @classmethod
    def read(cls, path) -> DatasetManifest:
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        meta = json.loads(path.read_text())
        images = [load_image(path.parent / e["path"]) for e in meta["entries"]]
        return cls(meta["version"], meta["entries"], images)


def caption_for(cls: str, scene: str, with_scene: bool) -> str:
    return f"a photo of a {cls} {SCENE_PHRASE[scene]}" if with_scene else f"a photo of a {cls}"


def gen_pretrain_corpus(seed: int, n: int = 512) -> DatasetManifest:
    """``n`` captioned sprites with classes balanced to within one image."""
    if n < 64:
        raise ValueError(f"pretraining corpus needs n >= 64, got {n}")
    rng = make_rng(seed, "pretrain-corpus")
    order = rng.permutation(np.resize(np.arange(len(CLASSES)), n))
    man = DatasetManifest()
    for k in range(n):
        cls = CLASSES[order[k]]
        img, scene = random_sprite(rng, cls)
        cap = caption_for(cls, scene, rng.random() < 0.5)
        man.images.append(img)
        man.entries.append({"path": f"img_{k:05d}.ppm", "caption": cap, "split": "train",
                            "concept": None, "class": cls, "scene": scene})
    return man


@dataclass
class ConceptSpec:
    concept_id: str
    macro_class: str
    colors: tuple[int, int]            # palette indices
    texture: int
    size: int = 14
    reference_count: int = 4

    @property
    def shape(self) -> str:
        return SHAPES[self.macro_class]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> ConceptSpec:
        d = json.loads(text)
        d["colors"] = tuple(d["colors"])
        return cls(**d)


def random_concept_spec(concept_id: str, macro_class: str, seed: int) -> ConceptSpec:
    if macro_class not in SHAPES:
        raise VocabularyError(f"unknown macro class: {macro_class!r}")
    rng = make_rng(seed, "concept-spec", concept_id)
    pair = rng.choice(len(PALETTE), size=2, replace=False)
    return ConceptSpec(concept_id, macro_class, (int(pair[0]), int(pair[1])),
                       int(rng.integers(N_TEXTURES)))


def gen_concept(spec: ConceptSpec, seed: int) -> list[np.ndarray]:
    """Reference images: one fixed sprite over pairwise-distinct scenes and positions."""
    if spec.macro_class not in SHAPES:
        raise VocabularyError(f"unknown macro class: {spec.macro_class!r}")
    rng = make_rng(seed, "concept", spec.concept_id)
    order = rng.permutation(len(BACKGROUNDS))
    colors = PALETTE[list(spec.colors)]
    refs = []
    for k in range(spec.reference_count):
        scene = BACKGROUNDS[order[k % len(BACKGROUNDS)]]
        bg = render_background(scene, rng)
        top, left = _place(rng, spec.size)
        refs.append(compose(bg, spec.shape, colors, spec.texture, spec.size, top, left))
    return refs


def gen_distractors(macro_class: str, seed: int, count: int = 16) -> list[np.ndarray]:
    """Same-class sprites with random identity, used as regularization images."""
    rng = make_rng(seed, "distractors", macro_class)
    return [random_sprite(rng, macro_class)[0] for _ in range(count)]


def probe_sprites(cls: str, count: int = 8, seed: int = 0) -> list[np.ndarray]:
    if cls not in SHAPES:
        raise VocabularyError(f"unknown class: {cls!r}")
    rng = make_rng(seed, "probe", cls)
    return [random_sprite(rng, cls)[0] for _ in range(count)]


def write_concept(spec: ConceptSpec, refs: list[np.ndarray], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "concept.json").write_text(spec.to_json())
    for k, img in enumerate(refs):
        save_image(img, out / f"ref_{k:02d}.ppm")
    return out


def read_concept(concept_dir) -> tuple[ConceptSpec | None, list[np.ndarray]]:
    d = Path(concept_dir)
    spec = ConceptSpec.from_json((d / "concept.json").read_text()) if (d / "concept.json").exists() else None
    refs = [load_image(p) for p in sorted(d.glob("*.ppm"))]
    return spec, refs


# -- identity extraction ----------------------------------------------------------

def _border_plane(img: np.ndarray) -> np.ndarray:
    """Per-channel least-squares plane through the outer pixel ring."""
    c, h, w = img.shape
    yy, xx = np.mgrid[:h, :w]
    ring = np.zeros((h, w), bool)
    ring[0, :] = ring[-1, :] = ring[:, 0] = ring[:, -1] = True
    A = np.stack([np.ones(ring.sum()), yy[ring], xx[ring]], axis=1)
    full = np.stack([np.ones(h * w), yy.ravel(), xx.ravel()], axis=1)
    coef, *_ = np.linalg.lstsq(A, img[:, ring].T, rcond=None)
    return (full @ coef).T.reshape(c, h, w)


def sprite_region(img: np.ndarray, threshold: float = 0.15) -> np.ndarray:
    diff = np.abs(np.asarray(img) - _border_plane(np.asarray(img))).max(axis=0)
    return diff > threshold


def identity_descriptor(img: np.ndarray, bins: int = 4, moment_weight: float = 0.5) -> np.ndarray:
    """Color histogram over the sprite region plus translation-invariant shape moments."""
    img = np.asarray(img, dtype=np.float64)
    region = sprite_region(img)
    n = int(region.sum())
    hist = np.zeros(bins ** 3)
    moments = np.zeros(4)
    if n:
        q = np.clip(((img[:, region] + 1.0) / 2.0 * bins).astype(int), 0, bins - 1)
        codes = (q[0] * bins + q[1]) * bins + q[2]
        hist = np.bincount(codes, minlength=bins ** 3) / n
        yy, xx = np.nonzero(region)
        cy, cx = yy.mean(), xx.mean()
        mu20 = ((yy - cy) ** 2).mean() / n
        mu02 = ((xx - cx) ** 2).mean() / n
        mu11 = ((yy - cy) * (xx - cx)).mean() / n
        moments = np.array([np.sqrt(n) / img.shape[1], 4 * mu20, 4 * mu02, 4 * mu11])
    return np.concatenate([hist, moment_weight * moments])
