"""Applications of a trained model: editing, intensity sweeps, transfer,
random generation, augmentation experiments, retrieval and feature export.

All functions are read-only over the bundle. Images go in and come out as
``H x W x C`` (or ``N x H x W x C``) float arrays in [-1, 1].
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from . import datagen
from .datagen import LabeledImage, to_uint8
from .exprcode import code_from_active, edit_code, make_code, neutral_code, sample_code, sweep_code
from .networks import ModelBundle
from .trainer import train_expression_classifier


class UntrainedBundleError(RuntimeError):
    pass


def _require(bundle: ModelBundle, stage: int, classifier: bool = False) -> None:
    if bundle.stage < stage:
        raise UntrainedBundleError(f"operation needs a bundle trained through stage {stage}, got stage {bundle.stage}")
    if classifier and not bundle.classifier_ready:
        raise UntrainedBundleError("operation needs a trained expression classifier")


def checkpoint_id(bundle: ModelBundle) -> str:
    return bundle.checksum()[:16]


def _nchw(images) -> torch.Tensor:
    a = np.asarray(images, dtype=np.float32)
    if a.ndim == 3:
        a = a[None]
    return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2)))


def _nhwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().numpy().transpose(0, 2, 3, 1).copy()


@torch.no_grad()
def encode(bundle: ModelBundle, images) -> np.ndarray:
    bundle.eval()
    return bundle.encode(_nchw(images)).numpy()


@torch.no_grad()
def decode(bundle: ModelBundle, g, c) -> np.ndarray:
    bundle.eval()
    g = torch.as_tensor(np.atleast_2d(g), dtype=torch.float32)
    c = torch.as_tensor(np.atleast_2d(c), dtype=torch.float32)
    if c.shape[0] == 1 and g.shape[0] > 1:
        c = c.expand(g.shape[0], -1)
    return _nhwc(bundle.decode(g, c))


@torch.no_grad()
def infer_codes(bundle: ModelBundle, images, batch_size: int = 128):
    """Predicted labels and codes: classifier picks the class, Q fills its block.

    The active block is clamped to [0, 1]; inactive blocks are its negation.
    """
    _require(bundle, 1, classifier=True)
    bundle.eval()
    x = _nchw(images)
    labels, codes = [], []
    for b in range(0, len(x), batch_size):
        xb = x[b:b + batch_size]
        yb = bundle.classify_expression(xb).argmax(1)
        _, feats = bundle.disc_image(xb, yb)
        active = bundle.q_predict(feats, yb).clamp(0.0, 1.0)
        labels.append(yb.numpy())
        codes.append(code_from_active(active, yb, bundle.spec.K).numpy())
    return np.concatenate(labels), np.concatenate(codes).astype(np.float64)


# ---------------------------------------------------------------------------
# grids


@dataclass
class ImageGrid:
    cells: list[list[np.ndarray]]
    row_captions: list[str]
    col_captions: list[str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.row_captions) != len(self.cells):
            raise ValueError("one caption per row required")
        if any(len(r) != len(self.col_captions) for r in self.cells):
            raise ValueError("one caption per column required")
        shapes = {c.shape for r in self.cells for c in r}
        if len(shapes) > 1:
            raise ValueError(f"grid cells differ in shape: {shapes}")

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.cells), len(self.col_captions)

    def compose(self, pad: int = 2) -> np.ndarray:
        h, w, ch = self.cells[0][0].shape
        rows, cols = self.shape
        canvas = np.ones((rows * (h + pad) + pad, cols * (w + pad) + pad, ch), dtype=np.float32)
        for i, row in enumerate(self.cells):
            for j, cell in enumerate(row):
                y0, x0 = pad + i * (h + pad), pad + j * (w + pad)
                canvas[y0:y0 + h, x0:x0 + w] = cell
        return canvas

    def save(self, path: str | Path) -> Path:
        """Write the composite PNG and a ``.json`` caption sidecar."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(self.compose())).save(path)
        sidecar = {"rows": self.row_captions, "cols": self.col_captions, "shape": list(self.shape), **self.meta}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
        return path


def _class_name(k: int) -> str:
    return datagen.CLASS_NAMES[k] if k < len(datagen.CLASS_NAMES) else f"class{k}"


def edit_expression(bundle: ModelBundle, images, magnitude: float = 1.0) -> ImageGrid:
    """Column per input; first row is the input, then one row per target class."""
    _require(bundle, 2)
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    g = encode(bundle, images)
    rows = [list(images)]
    for k in range(bundle.spec.K):
        rows.append(list(decode(bundle, g, edit_code(k, bundle.layout, magnitude))))
    return ImageGrid(rows, ["input"] + [_class_name(k) for k in range(bundle.spec.K)],
                     [f"input{i}" for i in range(len(images))], {"checkpoint": checkpoint_id(bundle)})


def sweep_levels(bundle: ModelBundle, target_class: int) -> list[int]:
    """Code elements of a class block ordered from weakest to strongest.

    Uses the order calibrated after training (see :func:`calibrate_sweep_order`)
    and falls back to element order.
    """
    order = bundle.meta.get("sweep_order", {}).get(str(target_class))
    return list(order) if order is not None else list(range(bundle.spec.d))


def intensity_sweep(bundle: ModelBundle, images, target_class: int, magnitude: float = 1.0) -> ImageGrid:
    """Row per input; ``d`` sweep columns (weak to strong) followed by the neutral code."""
    _require(bundle, 2)
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    g = encode(bundle, images)
    levels = sweep_levels(bundle, target_class)
    columns = [decode(bundle, g, sweep_code(target_class, m, bundle.layout, magnitude)) for m in levels]
    columns.append(decode(bundle, g, neutral_code(bundle.layout, magnitude)))
    rows = [[col[i] for col in columns] for i in range(len(images))]
    cols = [f"level{j + 1} (element {m})" for j, m in enumerate(levels)] + ["neutral"]
    return ImageGrid(rows, [f"input{i}" for i in range(len(images))], cols,
                     {"checkpoint": checkpoint_id(bundle), "class": target_class})


@torch.no_grad()
def calibrate_sweep_order(bundle: ModelBundle, images) -> dict[str, list[int]]:
    """Order each class's code elements by how far their sweep image moves toward the full expression.

    For every class and element, the sweep image's offset from the neutral-code
    image is projected onto the offset of the edit-code image, averaged over
    ``images``; elements are sorted by that projection. No labels are used. The
    result is stored in ``bundle.meta["sweep_order"]``.
    """
    _require(bundle, 2)
    g = encode(bundle, images)
    neutral = decode(bundle, g, neutral_code(bundle.layout)).reshape(len(g), -1)
    order = {}
    for k in range(bundle.spec.K):
        full = decode(bundle, g, edit_code(k, bundle.layout)).reshape(len(g), -1) - neutral
        scale = np.maximum((full ** 2).sum(1), 1e-12)
        proj = []
        for m in range(bundle.spec.d):
            step = decode(bundle, g, sweep_code(k, m, bundle.layout)).reshape(len(g), -1) - neutral
            proj.append(float(((step * full).sum(1) / scale).mean()))
        order[str(k)] = [int(m) for m in np.argsort(proj, kind="stable")]
    bundle.meta["sweep_order"] = order
    return order


def transfer_expression(bundle: ModelBundle, x_a, x_b) -> np.ndarray:
    """Identity of ``x_a`` with the expression inferred from ``x_b``."""
    _require(bundle, 2, classifier=True)
    _, c_b = infer_codes(bundle, x_b)
    out = decode(bundle, encode(bundle, x_a), c_b)
    return out[0] if np.asarray(x_a).ndim == 3 else out


def generate_random(bundle: ModelBundle, label: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` images of class ``label`` from uniform identity noise and sampled codes."""
    _require(bundle, 1)
    K = bundle.spec.K
    z = rng.uniform(-1.0, 1.0, size=(n, bundle.spec.n_z))
    y = np.tile(datagen.one_hot(label, K), (n, 1))
    c = sample_code(y, rng, bundle.layout)
    return decode(bundle, z, c)


def generate_subjects(bundle: ModelBundle, n_subjects: int, rng: np.random.Generator) -> ImageGrid:
    """Column per random subject, row per class; identity noise and code noise shared per column."""
    _require(bundle, 1)
    K = bundle.spec.K
    z = rng.uniform(-1.0, 1.0, size=(n_subjects, bundle.spec.n_z))
    z_y = rng.uniform(-1.0, 1.0, size=(n_subjects, bundle.spec.d))
    rows = []
    for k in range(K):
        y = np.tile(datagen.one_hot(k, K), (n_subjects, 1))
        rows.append(list(decode(bundle, z, make_code(y, z_y, bundle.layout))))
    return ImageGrid(rows, [_class_name(k) for k in range(K)], [f"subject{i}" for i in range(n_subjects)],
                     {"checkpoint": checkpoint_id(bundle)})


def augmentation_experiment(bundle: ModelBundle, train: Sequence[LabeledImage], test: Sequence[LabeledImage],
                            counts: Sequence[int] = (0, 3000), seed: int = 0, epochs: int = 10,
                            batch_size: int = 32) -> list[dict]:
    """Expression accuracy on the real test split vs number of synthetic training images."""
    _require(bundle, 1)
    K = bundle.spec.K
    x, y, _ = datagen.as_arrays(train)
    xt, yt, _ = datagen.as_arrays(test)
    table = []
    for count in counts:
        extra = None
        if count:
            rng = np.random.default_rng([seed, count, 0xA6])
            per_class = [count // K + (1 if k < count % K else 0) for k in range(K)]
            xs = np.concatenate([generate_random(bundle, k, m, rng) for k, m in enumerate(per_class) if m])
            ys = np.concatenate([np.full(m, k) for k, m in enumerate(per_class) if m])
            extra = (np.ascontiguousarray(xs.transpose(0, 3, 1, 2)), ys.astype(np.int64))
        _, acc = train_expression_classifier(bundle.spec, (x, y), (xt, yt), extra, seed=seed, epochs=epochs,
                                             batch_size=batch_size)
        table.append({"synthetic_images": int(count), "accuracy": float(acc), "n_real": len(train),
                      "n_test": len(test), "checkpoint": checkpoint_id(bundle)})
    return table


# ---------------------------------------------------------------------------
# retrieval and export


@dataclass
class RetrievalResult:
    query: int
    ranked: list[int]
    distances: list[float]
    space: str


def embed(bundle: ModelBundle | None, dataset: Sequence[LabeledImage], space: str) -> np.ndarray:
    if space == "x":
        return np.stack([im.pixels.reshape(-1) for im in dataset]).astype(np.float64)
    if space == "y":
        return np.stack([im.label for im in dataset]).astype(np.float64)
    if space == "c":
        if bundle is None:
            raise ValueError("code-space retrieval needs a bundle")
        return infer_codes(bundle, np.stack([im.pixels for im in dataset]))[1]
    raise ValueError(f"unknown space {space!r}; use 'c', 'y' or 'x'")


def rank_gallery(query_vec: np.ndarray, gallery_vecs: np.ndarray, k: int):
    dist = np.sqrt(((gallery_vecs - query_vec) ** 2).sum(axis=1))
    order = np.argsort(dist, kind="stable")[:k]
    return order, dist[order]


def retrieve(query: LabeledImage, gallery: Sequence[LabeledImage], space: str, k: int = 1,
             bundle: ModelBundle | None = None, exclude_identity: bool = False,
             query_index: int = -1) -> RetrievalResult:
    """Top-``k`` gallery items by Euclidean distance in code, label or pixel space."""
    if not gallery:
        raise ValueError("empty gallery")
    keep = [i for i, g in enumerate(gallery) if not (exclude_identity and g.identity_id == query.identity_id)]
    if not keep:
        raise ValueError("gallery is empty after excluding the query identity")
    vecs = embed(bundle, [query] + [gallery[i] for i in keep], space)
    order, dist = rank_gallery(vecs[0], vecs[1:], k)
    return RetrievalResult(query_index, [keep[i] for i in order], [float(d) for d in dist], space)


def retrieval_accuracy(bundle: ModelBundle | None, dataset: Sequence[LabeledImage], space: str) -> float:
    """Top-1 same-class rate, each query against every image of other identities."""
    vecs = embed(bundle, dataset, space)
    labels = np.array([im.expr_class for im in dataset])
    ids = np.array([im.identity_id for im in dataset])
    hits = []
    for i in range(len(dataset)):
        mask = ids != ids[i]
        idx = np.flatnonzero(mask)
        order, _ = rank_gallery(vecs[i], vecs[idx], 1)
        hits.append(labels[idx[order[0]]] == labels[i])
    return float(np.mean(hits))


def export_features(bundle: ModelBundle, dataset: Sequence[LabeledImage]) -> list[dict]:
    """Per image: identity, class, identity code ``g`` and inferred expression code ``c``."""
    _require(bundle, 2, classifier=True)
    images = np.stack([im.pixels for im in dataset])
    g = encode(bundle, images).astype(np.float64)
    _, c = infer_codes(bundle, images)
    return [{"identity_id": im.identity_id, "class": im.expr_class, "g": g[i], "c": c[i]}
            for i, im in enumerate(dataset)]


def write_features_csv(records: list[dict], path: str | Path, stamp: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_z, n_c = len(records[0]["g"]), len(records[0]["c"])
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["checkpoint", "identity_id", "class"] + [f"g{i}" for i in range(n_z)]
                   + [f"c{i}" for i in range(n_c)])
        for r in records:
            w.writerow([stamp, r["identity_id"], r["class"]] + [repr(float(v)) for v in r["g"]]
                       + [repr(float(v)) for v in r["c"]])
    return path


def write_table_csv(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return path
