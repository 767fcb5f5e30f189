"""Synthetic expressive faces and real-image folder ingestion.

The renderer draws a vector face (head, eyes, brows, mouth) whose expression is
controlled by a class recipe and a scalar intensity in [0, 1]. Because every
rendered image carries its ground-truth intensity, the learned intensity axis
of a trained model can be checked quantitatively.

Pixel arrays are ``H x W x C`` float32 in [-1, 1].
"""
from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

SUPERSAMPLE = 4
MIN_RESOLUTION = 32
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}

GEOMETRY_FIELDS = ("aspect", "eye_spacing", "eye_size", "brow_height", "hue")


@dataclass(frozen=True)
class ExpressionRecipe:
    name: str
    curvature: float  # signed mouth bend per unit intensity; never zero
    openness: float = 0.0
    brow_raise: float = 0.0
    brow_inner_drop: float = 0.0
    mouth_widen: float = 0.0


# Default K=3 uses the first three; K up to 6 mirrors six basic expressions.
RECIPES: tuple[ExpressionRecipe, ...] = (
    ExpressionRecipe("smile", curvature=1.0, mouth_widen=0.05),
    ExpressionRecipe("frown", curvature=-1.0, brow_inner_drop=0.05),
    ExpressionRecipe("surprise", curvature=-0.3, openness=1.0, brow_raise=0.10),
    ExpressionRecipe("anger", curvature=-0.5, brow_inner_drop=0.08, mouth_widen=-0.05),
    ExpressionRecipe("disgust", curvature=-0.6, openness=0.3, brow_raise=-0.03),
    ExpressionRecipe("fear", curvature=-0.2, openness=0.6, brow_raise=0.08, mouth_widen=0.06),
)
CLASS_NAMES = tuple(r.name for r in RECIPES)


class ParamError(ValueError):
    """A face parameter or dataset setting is outside its declared range."""


@dataclass(frozen=True)
class SyntheticFaceParams:
    identity_id: int
    geometry: tuple[float, ...]
    expr_class: int
    intensity: float

    def validate(self, n_classes: int = len(RECIPES)) -> None:
        if len(self.geometry) != len(GEOMETRY_FIELDS):
            raise ParamError(f"geometry must have {len(GEOMETRY_FIELDS)} entries, got {len(self.geometry)}")
        for name, value in zip(GEOMETRY_FIELDS, self.geometry):
            if not (0.0 <= value <= 1.0) or not math.isfinite(value):
                raise ParamError(f"geometry.{name}={value} outside [0, 1]")
        if not (0 <= self.expr_class < min(n_classes, len(RECIPES))):
            raise ParamError(f"expr_class={self.expr_class} outside [0, {min(n_classes, len(RECIPES))})")
        if not (0.0 <= self.intensity <= 1.0) or not math.isfinite(self.intensity):
            raise ParamError(f"intensity={self.intensity} outside [0, 1]")


@dataclass
class LabeledImage:
    pixels: np.ndarray
    label: np.ndarray
    identity_id: int
    intensity: float | None = None

    @property
    def expr_class(self) -> int:
        return int(np.argmax(self.label))


@dataclass(frozen=True)
class DatasetSpec:
    n_identities: int = 20
    images_per_identity_per_class: int = 30
    K: int = 3
    resolution: int = 64
    intensity_range: tuple[float, float] = (0.3, 1.0)
    seed: int = 0
    first_identity: int = 0
    # Selects a fresh intensity stream for the same identities (held-out images).
    variant: int = 0

    def validate(self) -> None:
        for name in ("n_identities", "images_per_identity_per_class", "K"):
            if getattr(self, name) < 1:
                raise ParamError(f"{name} must be >= 1")
        if self.K > len(RECIPES):
            raise ParamError(f"K={self.K} exceeds the {len(RECIPES)} available expression recipes")
        if self.resolution < MIN_RESOLUTION or self.resolution % 32:
            raise ParamError(f"resolution={self.resolution} must be a multiple of 32")
        lo, hi = self.intensity_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ParamError(f"intensity_range={self.intensity_range} must satisfy 0 <= min <= max <= 1")


def one_hot(index: int, K: int) -> np.ndarray:
    y = np.zeros(K, dtype=np.float32)
    y[index] = 1.0
    return y


# ---------------------------------------------------------------------------
# face layout


@dataclass(frozen=True)
class _Layout:
    head_c: tuple[float, float]
    head_r: tuple[float, float]
    skin: tuple[float, float, float]
    eye_x: float
    eye_y: float
    eye_r: tuple[float, float]
    brow_y: float
    brow_half: float
    mouth_y: float
    mouth_half: float


BACKGROUND = (0.78, 0.80, 0.84)
EYE_COLOR = (0.10, 0.10, 0.16)
BROW_COLOR = (0.28, 0.17, 0.10)
LIP_COLOR = (0.62, 0.12, 0.15)
OPENING_COLOR = (0.18, 0.03, 0.06)
BROW_THICK = 0.032
LIP_THICK = 0.04
BEND_SCALE = 0.16


def _layout(geometry: Sequence[float]) -> _Layout:
    aspect, spacing, eye_size, brow_height, hue = geometry
    skin = colorsys.hsv_to_rgb(0.02 + 0.5 * hue, 0.45, 0.92)
    eye_y = -0.18
    return _Layout(
        head_c=(0.0, 0.02),
        head_r=(0.58 - 0.14 * aspect, 0.70 + 0.12 * aspect),
        skin=tuple(skin),
        eye_x=0.16 + 0.12 * spacing,
        eye_y=eye_y,
        eye_r=(0.045 + 0.045 * eye_size, 0.03 + 0.03 * eye_size),
        brow_y=eye_y - (0.16 + 0.08 * brow_height),
        brow_half=0.09,
        mouth_y=0.36 + 0.06 * aspect,
        mouth_half=0.24,
    )


def mouth_curvature(params: SyntheticFaceParams) -> float:
    """Signed mouth bend of the rendered face (positive = corners up)."""
    return RECIPES[params.expr_class].curvature * params.intensity


def _grid(resolution: int, factor: int) -> tuple[np.ndarray, np.ndarray]:
    n = resolution * factor
    t = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    return np.meshgrid(t, t, indexing="xy")


def _segment_dist(u, v, a, b):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    t = np.clip(((u - ax) * dx + (v - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(u - (ax + t * dx), v - (ay + t * dy))


def _paint(canvas: np.ndarray, mask: np.ndarray, color) -> None:
    canvas[mask] = color


def render_face(params: SyntheticFaceParams, resolution: int = 64, K: int | None = None) -> LabeledImage:
    """Render one face deterministically with 4x supersampled anti-aliasing."""
    if resolution < MIN_RESOLUTION:
        raise ParamError(f"resolution={resolution} must be >= {MIN_RESOLUTION}")
    K = len(RECIPES) if K is None else K
    params.validate(K)
    lay = _layout(params.geometry)
    recipe = RECIPES[params.expr_class]
    s = params.intensity
    u, v = _grid(resolution, SUPERSAMPLE)
    canvas = np.empty(u.shape + (3,), dtype=np.float64)
    canvas[:] = BACKGROUND

    (hx, hy), (rx, ry) = lay.head_c, lay.head_r
    _paint(canvas, ((u - hx) / rx) ** 2 + ((v - hy) / ry) ** 2 < 1.0, lay.skin)

    erx, ery = lay.eye_r
    for side in (-1.0, 1.0):
        ex = side * lay.eye_x
        _paint(canvas, ((u - ex) / erx) ** 2 + ((v - lay.eye_y) / ery) ** 2 < 1.0, EYE_COLOR)

    raise_ = recipe.brow_raise * s
    drop = recipe.brow_inner_drop * s
    for side in (-1.0, 1.0):
        inner = (side * (lay.eye_x - lay.brow_half), lay.brow_y - raise_ + drop)
        outer = (side * (lay.eye_x + lay.brow_half), lay.brow_y - raise_)
        _paint(canvas, _segment_dist(u, v, inner, outer) < BROW_THICK, BROW_COLOR)

    bend = BEND_SCALE * recipe.curvature * s
    w = lay.mouth_half + recipe.mouth_widen * s
    centre = lay.mouth_y + bend * (1.0 - np.clip(u / w, -1.0, 1.0) ** 2)
    lips = (np.abs(u) <= w) & (np.abs(v - centre) < LIP_THICK)
    _paint(canvas, lips, LIP_COLOR)
    openness = recipe.openness * s
    if openness > 0.0:
        orx, ory = 0.06 + 0.08 * openness, 0.16 * openness
        oy = lay.mouth_y + 0.5 * bend
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            _paint(canvas, ((u / orx) ** 2 + ((v - oy) / ory) ** 2) < 1.0, OPENING_COLOR)

    f = SUPERSAMPLE
    img = canvas.reshape(resolution, f, resolution, f, 3).mean(axis=(1, 3))
    pixels = (img * 2.0 - 1.0).astype(np.float32)
    return LabeledImage(pixels, one_hot(params.expr_class, K), params.identity_id, float(s))


def expression_region_mask(geometry: Sequence[float], resolution: int) -> np.ndarray:
    """Boolean ``H x W`` mask of every pixel any expression may touch (mouth and brows)."""
    lay = _layout(geometry)
    margin = 2.0 / resolution + 0.02
    u, v = _grid(resolution, 1)
    max_raise = max(max(r.brow_raise for r in RECIPES), 0.0)
    min_raise = min(min(r.brow_raise for r in RECIPES), 0.0)
    max_drop = max(r.brow_inner_drop for r in RECIPES)
    bx0, bx1 = lay.eye_x - lay.brow_half - BROW_THICK - margin, lay.eye_x + lay.brow_half + BROW_THICK + margin
    by0 = lay.brow_y - max_raise - BROW_THICK - margin
    by1 = lay.brow_y - min_raise + max_drop + BROW_THICK + margin
    brows = (np.abs(u) >= bx0) & (np.abs(u) <= bx1) & (v >= by0) & (v <= by1)
    widest = lay.mouth_half + max(r.mouth_widen for r in RECIPES) + margin
    bend = BEND_SCALE * max(abs(r.curvature) for r in RECIPES)
    my0 = lay.mouth_y - bend - LIP_THICK - 0.16 - margin
    my1 = lay.mouth_y + bend + LIP_THICK + 0.16 + margin
    mouth = (np.abs(u) <= max(widest, 0.14 + margin)) & (v >= my0) & (v <= my1)
    return brows | mouth


# ---------------------------------------------------------------------------
# datasets


def identity_geometry(seed: int, identity_id: int) -> tuple[float, ...]:
    rng = np.random.default_rng([seed, identity_id, 0x1D])
    return tuple(float(g) for g in rng.uniform(0.0, 1.0, size=len(GEOMETRY_FIELDS)))


def sample_params(spec: DatasetSpec) -> list[SyntheticFaceParams]:
    spec.validate()
    lo, hi = spec.intensity_range
    out = []
    for ident in range(spec.first_identity, spec.first_identity + spec.n_identities):
        geometry = identity_geometry(spec.seed, ident)
        for k in range(spec.K):
            rng = np.random.default_rng([spec.seed, ident, k, spec.variant, 0x1A])
            for s in rng.uniform(lo, hi, size=spec.images_per_identity_per_class):
                out.append(SyntheticFaceParams(ident, geometry, k, float(s)))
    return out


def sample_dataset(spec: DatasetSpec) -> list[LabeledImage]:
    """Render ``n_identities * K * images_per_identity_per_class`` faces."""
    return [render_face(p, spec.resolution, spec.K) for p in sample_params(spec)]


def as_arrays(dataset: Sequence[LabeledImage]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack a dataset into ``(x[N,C,H,W], class[N], identity[N])``."""
    if not dataset:
        raise ValueError("empty dataset")
    x = np.stack([im.pixels for im in dataset]).transpose(0, 3, 1, 2).astype(np.float32)
    y = np.array([im.expr_class for im in dataset], dtype=np.int64)
    ids = np.array([im.identity_id for im in dataset], dtype=np.int64)
    return np.ascontiguousarray(x), y, ids


def augment_flip(image: LabeledImage, rng: np.random.Generator, force: bool | None = None) -> LabeledImage:
    """Mirror horizontally with probability 0.5 (or exactly when ``force`` is given)."""
    flip = bool(rng.random() < 0.5) if force is None else force
    if not flip:
        return image
    return LabeledImage(image.pixels[:, ::-1].copy(), image.label.copy(), image.identity_id, image.intensity)


def split_by_identity(dataset: Sequence[LabeledImage], test_fraction: float, seed: int):
    if not (0.0 < test_fraction < 1.0):
        raise ValueError(f"test_fraction={test_fraction} must be in (0, 1)")
    ids = sorted({im.identity_id for im in dataset})
    if len(ids) < 2:
        raise ValueError(f"need at least 2 identities to split, found {len(ids)}")
    n_test = min(max(int(round(len(ids) * test_fraction)), 1), len(ids) - 1)
    rng = np.random.default_rng(seed)
    test_ids = {ids[i] for i in rng.permutation(len(ids))[:n_test]}
    train = [im for im in dataset if im.identity_id not in test_ids]
    test = [im for im in dataset if im.identity_id in test_ids]
    return train, test


# ---------------------------------------------------------------------------
# folder ingestion and on-disk datasets


def to_unit_range(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((pixels + 1.0) * 127.5), 0, 255).astype(np.uint8)


def load_image(path: Path, resolution: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            w, h = im.size
            side = min(w, h)
            left, top = (w - side) // 2, (h - side) // 2
            im = im.crop((left, top, left + side, top + side))
            if im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.BILINEAR)
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    return to_unit_range(arr)


def _identity_key(name: str, table: dict[str, int]) -> int:
    if name not in table:
        table[name] = int(name) if name.isdigit() else len(table)
    return table[name]


def ingest_folder(root: str | Path, class_name_map: Mapping[str, int], resolution: int) -> list[LabeledImage]:
    """Read ``<root>/<class>/<identity>/<image>`` into [-1, 1] square arrays."""
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    unknown = [p.name for p in class_dirs if p.name not in class_name_map]
    if unknown:
        raise ValueError(f"unknown class directories: {unknown}")
    K = max(class_name_map.values()) + 1
    ident_table: dict[str, int] = {}
    out = []
    for cdir in class_dirs:
        for idir in sorted(p for p in cdir.iterdir() if p.is_dir()):
            ident = _identity_key(idir.name, ident_table)
            for f in sorted(idir.iterdir()):
                if f.suffix.lower() not in IMAGE_SUFFIXES:
                    continue
                out.append(LabeledImage(load_image(f, resolution), one_hot(class_name_map[cdir.name], K), ident))
    if not out:
        raise ValueError(f"no images found under {root}")
    return out


MANIFEST = "manifest.jsonl"


def save_dataset(dataset: Iterable[LabeledImage], out_dir: str | Path, seed: int | None = None) -> Path:
    """Write PNG files plus a line-delimited manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, im in enumerate(dataset):
        rel = f"images/{i:06d}_id{im.identity_id}_c{im.expr_class}.png"
        Image.fromarray(to_uint8(im.pixels)).save(out_dir / rel)
        rec = {"path": rel, "class": im.expr_class, "identity": im.identity_id,
               "intensity": im.intensity, "seed": seed, "K": int(im.label.shape[0])}
        lines.append(json.dumps(rec))
    manifest = out_dir / MANIFEST
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_dataset(path: str | Path) -> list[LabeledImage]:
    path = Path(path)
    manifest = path / MANIFEST if path.is_dir() else path
    if not manifest.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    out = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        f = manifest.parent / rec["path"]
        with Image.open(f) as im:
            arr = np.asarray(im.convert("RGB"))
        out.append(LabeledImage(to_unit_range(arr), one_hot(rec["class"], rec["K"]),
                                rec["identity"], rec.get("intensity")))
    if not out:
        raise ValueError(f"dataset at {manifest} is empty")
    return out
