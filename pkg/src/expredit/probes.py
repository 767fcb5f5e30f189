"""Independent measurement probes for trained models.

The curvature probe is a small regressor fitted on freshly rendered faces to
predict the renderer's signed mouth curvature. It is trained only on
renderer output, never on model output, so it can score generated images.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.stats import spearmanr

from . import datagen


class CurvatureNet(nn.Module):
    def __init__(self, resolution: int = 64):
        super().__init__()
        self.convs = nn.Sequential(
            nn.Conv2d(3, 16, 5, 2, 2), nn.ReLU(),
            nn.Conv2d(16, 32, 5, 2, 2), nn.ReLU(),
            nn.Conv2d(32, 64, 5, 2, 2), nn.ReLU(),
            nn.Conv2d(64, 64, 5, 2, 2), nn.ReLU(),
        )
        side = resolution // 16
        self.fc = nn.Sequential(nn.Linear(64 * side * side, 64), nn.ReLU(), nn.Linear(64, 1))

    def forward(self, x):
        return self.fc(self.convs(x).flatten(1)).squeeze(1)


def _blur(x: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Per-sample Gaussian blur so the probe tolerates soft generated images."""
    radius = 3
    t = torch.arange(-radius, radius + 1, dtype=x.dtype)
    k = torch.exp(-0.5 * (t[None, :] / sigma[:, None].clamp_min(1e-3)) ** 2)
    k = k / k.sum(1, keepdim=True)
    B, C, H, W = x.shape
    xs = x.reshape(1, B * C, H, W)
    kh = k.repeat_interleave(C, 0)[:, None, None, :]
    kv = k.repeat_interleave(C, 0)[:, None, :, None]
    xs = F.conv2d(F.pad(xs, (radius, radius, 0, 0), mode="replicate"), kh, groups=B * C)
    xs = F.conv2d(F.pad(xs, (0, 0, radius, radius), mode="replicate"), kv, groups=B * C)
    return xs.reshape(B, C, H, W)


def render_curvature_set(n_identities: int, per_cell: int, K: int, resolution: int, seed: int):
    """Faces at intensities uniform in [0, 1] with their ground-truth curvature."""
    spec = datagen.DatasetSpec(n_identities, per_cell, K, resolution, (0.0, 1.0), seed=seed,
                               first_identity=10_000)
    params = datagen.sample_params(spec)
    images = [datagen.render_face(p, resolution, K) for p in params]
    x, _, _ = datagen.as_arrays(images)
    target = np.array([datagen.mouth_curvature(p) for p in params], dtype=np.float32)
    return x, target


def fit_curvature_probe(K: int = 3, resolution: int = 64, n_identities: int = 60, per_cell: int = 12,
                        epochs: int = 15, seed: int = 0) -> CurvatureNet:
    x, target = render_curvature_set(n_identities, per_cell, K, resolution, seed)
    rng = np.random.default_rng([seed, 0xC0])
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = CurvatureNet(resolution)
        opt = torch.optim.Adam(net.parameters(), lr=1e-3)
        for _ in range(epochs):
            net.train()
            order = rng.permutation(len(x))
            for b in range(0, len(x), 32):
                idx = order[b:b + 32]
                xb = torch.from_numpy(x[idx])
                sigma = torch.from_numpy(rng.uniform(0.0, 1.2, len(idx)).astype(np.float32))
                xb = _blur(xb, sigma)
                flips = torch.from_numpy(rng.random(len(idx)) < 0.5)
                xb[flips] = xb[flips].flip(-1)
                loss = F.mse_loss(net(xb), torch.from_numpy(target[idx]))
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
    net.eval()
    return net


@torch.no_grad()
def measure_curvature(net: CurvatureNet, images) -> np.ndarray:
    """Probe curvature for ``N x H x W x C`` (or ``N x C x H x W``) images."""
    a = np.asarray(images, dtype=np.float32)
    if a.ndim == 3:
        a = a[None]
    if a.shape[-1] in (1, 3):
        a = a.transpose(0, 3, 1, 2)
    net.eval()
    return net(torch.from_numpy(np.ascontiguousarray(a))).numpy()


def spearman(a, b) -> float:
    rho = spearmanr(a, b).statistic
    return 0.0 if np.isnan(rho) else float(rho)


def linear_probe_accuracy(train_x, train_y, test_x, test_y, seed: int = 0) -> float:
    """Multinomial logistic regression on standardised features; returns test accuracy."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    model = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000, random_state=seed))
    model.fit(np.asarray(train_x), np.asarray(train_y))
    return float(model.score(np.asarray(test_x), np.asarray(test_y)))


# ---------------------------------------------------------------------------
# model-level measurements


def conditional_control(bundle, classifier, n_per_class: int = 100, seed: int = 0) -> float:
    """Fraction of random generations classified as the requested class."""
    from . import apps
    from .trainer import predict

    rng = np.random.default_rng([seed, 0xCC])
    hits = []
    for k in range(bundle.spec.K):
        images = apps.generate_random(bundle, k, n_per_class, rng)
        hits.append(predict(classifier, np.ascontiguousarray(images.transpose(0, 3, 1, 2))) == k)
    return float(np.concatenate(hits).mean())


def sweep_spearman(bundle, probe: CurvatureNet, dataset, target_class: int = 0) -> list[float]:
    """Per identity: rank correlation between sweep level and probe curvature.

    Uses the first image of each identity in ``dataset`` as the sweep input.
    """
    from . import apps

    first = {}
    for im in dataset:
        first.setdefault(im.identity_id, im)
    images = np.stack([im.pixels for im in first.values()])
    grid = apps.intensity_sweep(bundle, images, target_class)
    d = bundle.spec.d
    levels = np.arange(1, d + 1)
    return [spearman(levels, measure_curvature(probe, np.stack(row[:d]))) for row in grid.cells]


def identity_probe(bundle, train, heldout, seed: int = 0) -> float:
    """Linear identity probe on g(x): fit on ``train``, score on ``heldout``."""
    from . import apps

    g_train = apps.encode(bundle, np.stack([im.pixels for im in train]))
    g_test = apps.encode(bundle, np.stack([im.pixels for im in heldout]))
    return linear_probe_accuracy(g_train, [im.identity_id for im in train], g_test,
                                 [im.identity_id for im in heldout], seed=seed)
