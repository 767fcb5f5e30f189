"""Three-stage incremental training plus auxiliary network pretraining.

Stage 1 (controller learning) trains the decoder, Q and the image
discriminator on random identity codes. Stage 2 (reconstruction) trains the
encoder and decoder to reconstruct inputs while Q keeps a reduced weight.
Stage 3 (refining) trains everything on the full weighted objective with the
identity-code discriminator added.

Each batch runs one discriminator-side update (image/code discriminators and
the Q heads) followed by one generator-side update.
"""
from __future__ import annotations

import json
import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F

from . import datagen
from .config import TrainConfig
from .exprcode import code_from_labels
from .losses import (LossWeights, NonFiniteLossError, adv_img_losses, adv_z_losses, feature_loss, pixel_loss,
                     q_loss, total_loss, tv_loss, weighted_sum)
from .networks import ArchitectureSpec, ConvClassifier, ModelBundle, architecture, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

D_SIDE = ("disc", "q", "dz")
G_SIDE = ("enc", "dec")


class PrerequisiteError(RuntimeError):
    pass


@dataclass(frozen=True)
class StagePlan:
    stage: int
    trainable: tuple[str, ...]
    terms: tuple[str, ...]
    weights: LossWeights
    epochs: int
    batch_size: int
    code_source: str  # "noise" or "encoder"

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.code_source not in ("noise", "encoder"):
            raise ValueError(f"unknown identity-code source {self.code_source!r}")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 32


def stage_plans(cfg: TrainConfig) -> dict[int, StagePlan]:
    e1, e2, e3 = cfg.stage_epochs
    B = cfg.batch_size
    off = dict(pixel=0.0, identity=0.0, q=0.0, adv_img=0.0, adv_z=0.0, tv=0.0, beta=cfg.beta)
    w1 = LossWeights(**{**off, "q": cfg.stage1_q_weight, "adv_img": cfg.stage1_adv_weight})
    w2 = LossWeights(**{**off, "pixel": 1.0, "identity": cfg.lambda_id, "q": cfg.stage2_q_weight})
    w3 = LossWeights(identity=cfg.lambda_id, q=cfg.lambda_q, adv_img=cfg.lambda_adv_img,
                     adv_z=cfg.lambda_adv_z, tv=cfg.lambda_tv, beta=cfg.beta)
    return {
        1: StagePlan(1, ("dec", "q", "disc"), ("q", "adv_img"), w1, e1, B, "noise"),
        2: StagePlan(2, ("enc", "dec", "q"), ("pixel", "id", "q"), w2, e2, B, "encoder"),
        3: StagePlan(3, ("enc", "dec", "q", "disc", "dz"),
                     ("pixel", "id", "q", "adv_img", "adv_z", "tv"), w3, e3, B, "encoder"),
    }


@dataclass
class TrainState:
    stage: int
    data_rng: np.random.Generator
    noise_gen: torch.Generator
    step: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0
    order: np.ndarray | None = None
    opt_states: dict[str, Any] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, stage: int, seed: int) -> "TrainState":
        gen = torch.Generator().manual_seed(seed * 1000 + stage)
        return cls(stage, np.random.default_rng([seed, stage, 0xDA7A]), gen)

    def to_dict(self) -> dict[str, Any]:
        return {
            "stage": self.stage, "step": self.step, "epoch": self.epoch, "batch_in_epoch": self.batch_in_epoch,
            "order": None if self.order is None else self.order.tolist(),
            "data_rng": self.data_rng.bit_generator.state,
            "noise_gen": self.noise_gen.get_state(),
            "opt_states": self.opt_states,
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainState":
        rng = np.random.default_rng()
        rng.bit_generator.state = d["data_rng"]
        gen = torch.Generator()
        gen.set_state(d["noise_gen"])
        order = None if d["order"] is None else np.asarray(d["order"], dtype=np.int64)
        return cls(d["stage"], rng, gen, d["step"], d["epoch"], d["batch_in_epoch"], order,
                   d["opt_states"], list(d["history"]))


def set_deterministic(enabled: bool) -> None:
    torch.use_deterministic_algorithms(enabled)


def _uniform(gen: torch.Generator, *shape) -> torch.Tensor:
    return torch.rand(*shape, generator=gen) * 2.0 - 1.0


def _check(term: str, value: torch.Tensor) -> None:
    if not torch.isfinite(value).all():
        raise NonFiniteLossError(term, float(value.detach()))


class _Optimizers:
    def __init__(self, bundle: ModelBundle, plan: StagePlan, opt: OptimizerConfig):
        kw = dict(lr=opt.lr, betas=(opt.beta1, opt.beta2))
        d_params = [p for g in D_SIDE if g in plan.trainable for p in bundle.group(g).parameters()]
        g_params = [p for g in G_SIDE if g in plan.trainable for p in bundle.group(g).parameters()]
        self.d = torch.optim.Adam(d_params, **kw) if d_params else None
        self.g = torch.optim.Adam(g_params, **kw) if g_params else None

    def state_dict(self):
        return {k: getattr(self, k).state_dict() for k in ("d", "g") if getattr(self, k) is not None}

    def load_state_dict(self, states):
        for k, s in states.items():
            getattr(self, k).load_state_dict(s)


def _prepare(bundle: ModelBundle, plan: StagePlan) -> None:
    for name in ("enc", "dec", "disc", "q", "dz", "classifier", "phi"):
        module = bundle.group(name)
        train = name in plan.trainable
        module.requires_grad_(train)
        module.train(train)


def _step(bundle: ModelBundle, plan: StagePlan, x, y, gen, opts: _Optimizers, q_mode: str) -> dict[str, float]:
    spec = bundle.spec
    B, K = x.shape[0], spec.K
    z_y = _uniform(gen, B, spec.d)
    c = code_from_labels(y, z_y, K)
    if plan.code_source == "noise":
        g = _uniform(gen, B, spec.n_z)
    else:
        g = bundle.encode(x)
    x_hat = bundle.decode(g, c)
    w = plan.weights
    terms = plan.terms
    prior = _uniform(gen, B, spec.n_z) if "adv_z" in terms else None

    def predict_code(feats, labels):
        if q_mode == "full":
            return bundle.q.all_blocks(feats).reshape(B, -1)
        return bundle.q_predict(feats, labels)

    rec: dict[str, float] = {}
    # discriminator side: D_img, Q heads, D_z
    if opts.d is not None:
        parts = []
        fake = x_hat.detach()
        if "adv_img" in terms:
            p_real, _ = bundle.disc_image(x, y)
            p_fake, feats = bundle.disc_image(fake, y)
            d_img, _ = adv_img_losses(p_real, p_fake)
            _check("d_img", d_img)
            rec["d_img"] = float(d_img.detach())
            parts.append(d_img)
        else:
            feats = bundle.disc_image(fake, y)[1]
        if "q" in terms:
            lq = q_loss(predict_code(feats, y), c, y, K)
            _check("q", lq)
            parts.append(w.q * lq)
        if "adv_z" in terms:
            p_prior, p_enc = _disc_z_joint(bundle, prior, g.detach())
            d_z, _ = adv_z_losses(p_prior, p_enc)
            _check("d_z", d_z)
            rec["d_z"] = float(d_z.detach())
            parts.append(d_z)
        opts.d.zero_grad(set_to_none=True)
        sum(parts).backward()
        opts.d.step()

    comps = {}
    if "pixel" in terms:
        comps["pixel"] = pixel_loss(x_hat, x)
    if "id" in terms:
        with torch.no_grad():
            target = bundle.feature_maps(x)
        comps["id"] = feature_loss(bundle.feature_maps(x_hat), target, w.beta)
    if "q" in terms or "adv_img" in terms:
        p_fake, feats = bundle.disc_image(x_hat, y)
        if "adv_img" in terms:
            comps["adv_img"] = adv_img_losses(p_fake.detach(), p_fake)[1]
        if "q" in terms:
            comps["q"] = q_loss(predict_code(feats, y), c, y, K)
    if "adv_z" in terms:
        p_enc = _disc_z_joint(bundle, prior, g)[1]
        comps["adv_z"] = adv_z_losses(p_enc.detach(), p_enc)[1]
    if "tv" in terms:
        comps["tv"] = tv_loss(x_hat)
    for term, value in comps.items():
        _check(term, value)
    report = total_loss(comps, w)
    if opts.g is not None:
        loss = weighted_sum(comps, w)
        opts.g.zero_grad(set_to_none=True)
        loss.backward()
        opts.g.step()
    rec.update({t: report.terms[t] for t in comps})
    rec["total"] = report.total
    return rec


def _disc_z_joint(bundle, prior, g):
    # one batch so D_z's batch norm sees both sources with shared statistics
    p = bundle.disc_z(torch.cat([prior, g]))
    return p[: prior.shape[0]], p[prior.shape[0]:]


def _batch(x, y, idx, flip_mask):
    xb = torch.from_numpy(x[idx])
    if flip_mask is not None and flip_mask.any():
        m = torch.from_numpy(flip_mask)
        xb[m] = xb[m].flip(-1)
    return xb, torch.from_numpy(y[idx])


def train_stage(bundle: ModelBundle, plan: StagePlan, state: TrainState, data, *,
                opt: OptimizerConfig = OptimizerConfig(), out_dir: str | Path | None = None,
                checkpoint_every: int = 0, max_steps: int | None = None, flip: bool = True,
                q_mode: str = "active") -> TrainState:
    """Run (the rest of) one curriculum stage on ``data = (x[N,C,H,W], labels[N])``.

    Stops early after ``max_steps`` steps in total for this stage, leaving the
    state resumable. Loss records go to ``state.history`` and, when
    ``out_dir`` is given, to ``out_dir/losses.jsonl``.
    """
    if plan.stage > 1 and bundle.stage < plan.stage - 1:
        raise PrerequisiteError(f"stage {plan.stage} requires a completed stage {plan.stage - 1} checkpoint "
                                f"(bundle is at stage {bundle.stage})")
    if "id" in plan.terms and not bundle.phi_ready:
        raise PrerequisiteError("identity loss needs a pretrained feature network")
    if state.stage != plan.stage:
        raise ValueError(f"train state belongs to stage {state.stage}, plan is stage {plan.stage}")
    x, y = data
    N = x.shape[0]
    B = min(plan.batch_size, N)
    n_batches = N // B
    if n_batches == 0:
        raise ValueError("dataset smaller than one batch")
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "losses.jsonl", "a")
    _prepare(bundle, plan)
    opts = _Optimizers(bundle, plan, opt)
    if state.opt_states:
        opts.load_state_dict(state.opt_states)
    t0 = time.time()
    try:
        while state.epoch < plan.epochs:
            if state.order is None:
                state.order = state.data_rng.permutation(N)
                state.batch_in_epoch = 0
            while state.batch_in_epoch < n_batches:
                if max_steps is not None and state.step >= max_steps:
                    state.opt_states = opts.state_dict()
                    return state
                idx = state.order[state.batch_in_epoch * B:(state.batch_in_epoch + 1) * B]
                flips = state.data_rng.random(len(idx)) < 0.5 if flip else None
                xb, yb = _batch(x, y, idx, flips)
                rec = _step(bundle, plan, xb, yb, state.noise_gen, opts, q_mode)
                rec = {"step": state.step, "stage": plan.stage, "epoch": state.epoch, **rec}
                state.history.append(rec)
                if log_file is not None:
                    log_file.write(json.dumps(rec) + "\n")
                state.step += 1
                state.batch_in_epoch += 1
                if checkpoint_every and out_dir is not None and state.step % checkpoint_every == 0:
                    state.opt_states = opts.state_dict()
                    save_checkpoint(bundle, out_dir / f"stage{plan.stage}_latest", extra=state.to_dict())
            means = epoch_means(state.history, plan.stage, state.epoch)
            log.info("stage %d epoch %d/%d %.0fs %s", plan.stage, state.epoch + 1, plan.epochs,
                     time.time() - t0, {k: round(v, 4) for k, v in means.items()})
            state.epoch += 1
            state.order = None
    finally:
        if log_file is not None:
            log_file.close()
    state.opt_states = opts.state_dict()
    bundle.stage = plan.stage
    bundle.eval()
    if out_dir is not None:
        save_checkpoint(bundle, out_dir / f"stage{plan.stage}", extra=state.to_dict())
    return state


def epoch_means(history: list[dict], stage: int, epoch: int) -> dict[str, float]:
    rows = [r for r in history if r["stage"] == stage and r["epoch"] == epoch]
    keys = [k for k in rows[0] if k not in ("step", "stage", "epoch")] if rows else []
    return {k: float(np.mean([r[k] for r in rows if k in r])) for k in keys}


# ---------------------------------------------------------------------------
# auxiliary networks


def _fit_classifier(net: ConvClassifier, x, targets, *, epochs, lr, batch_size, seed,
                    val=None, patience=None) -> float:
    """Cross-entropy training; with ``patience``, stop once validation accuracy plateaus."""
    rng = np.random.default_rng([seed, 0xC1A5])
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    best, since_best = -1.0, 0
    acc = float("nan")
    for epoch in range(epochs):
        net.train()
        order = rng.permutation(len(x))
        for b in range(0, len(x), batch_size):
            idx = order[b:b + batch_size]
            xb = torch.from_numpy(x[idx])
            flips = torch.from_numpy(rng.random(len(idx)) < 0.5)
            xb[flips] = xb[flips].flip(-1)
            loss = F.cross_entropy(net(xb), torch.from_numpy(targets[idx]))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        if val is not None:
            acc = accuracy(net, *val)
            log.info("classifier epoch %d val acc %.4f", epoch + 1, acc)
            if patience is not None:
                if acc > best:
                    best, since_best = acc, 0
                else:
                    since_best += 1
                    if since_best >= patience:
                        break
    net.eval()
    return acc


@torch.no_grad()
def predict(net, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    net.eval()
    out = [net(torch.from_numpy(np.ascontiguousarray(x[b:b + batch_size]))).argmax(1).numpy()
           for b in range(0, len(x), batch_size)]
    return np.concatenate(out)


def accuracy(net, x: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean(predict(net, x) == targets))


def pretrain_feature_net(bundle: ModelBundle, x: np.ndarray, identities: np.ndarray, *, seed: int = 0,
                         max_epochs: int = 30, patience: int = 3, lr: float = 1e-3,
                         batch_size: int = 32, val_fraction: float = 0.1) -> float:
    """Train the identity network used by the identity loss; returns validation accuracy.

    Identities are relabelled ``0..n-1`` in sorted order. The network is frozen afterwards.
    """
    ids = np.unique(identities)
    if len(ids) < 2:
        raise ValueError(f"feature network needs at least 2 identities, found {len(ids)}")
    if len(ids) != bundle.spec.n_identities:
        raise ValueError(f"dataset has {len(ids)} identities, architecture expects {bundle.spec.n_identities}")
    targets = np.searchsorted(ids, identities).astype(np.int64)
    rng = np.random.default_rng([seed, 0xF1])
    perm = rng.permutation(len(x))
    n_val = max(1, int(round(len(x) * val_fraction)))
    val, tr = perm[:n_val], perm[n_val:]
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        acc = _fit_classifier(bundle.phi, x[tr], targets[tr], epochs=max_epochs, lr=lr, batch_size=batch_size,
                              seed=seed, val=(x[val], targets[val]), patience=patience)
    bundle.phi.requires_grad_(False)
    bundle.phi.eval()
    bundle.phi_ready = True
    bundle.meta["phi_val_accuracy"] = acc
    return acc


def train_expression_classifier(spec: ArchitectureSpec, train, test, synthetic_extra=None, *, seed: int = 0,
                                epochs: int = 10, lr: float = 1e-3, batch_size: int = 32):
    """Fit an expression classifier on real (+ optional synthetic) images.

    ``train``, ``test`` and ``synthetic_extra`` are ``(x, labels)`` pairs;
    returns ``(classifier, test_accuracy)``.
    """
    x, yl = train
    if len(x) == 0:
        raise ValueError("empty training set")
    n_syn = 0
    if synthetic_extra is not None and len(synthetic_extra[0]):
        n_syn = len(synthetic_extra[0])
        x = np.concatenate([x, synthetic_extra[0]]).astype(np.float32)
        yl = np.concatenate([yl, synthetic_extra[1]])
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = ConvClassifier(spec, spec.K)
        _fit_classifier(net, x, yl.astype(np.int64), epochs=epochs, lr=lr, batch_size=batch_size, seed=seed)
    acc = accuracy(net, *test)
    log.info("expression classifier: %d synthetic images, test accuracy %.4f", n_syn, acc)
    return net, acc


# ---------------------------------------------------------------------------
# full curriculum


def build_datasets(cfg: TrainConfig):
    """Return ``(train, heldout, test)`` lists of labelled images."""
    if cfg.dataset_path:
        data = datagen.load_dataset(cfg.dataset_path)
        train, test = datagen.split_by_identity(data, cfg.test_fraction, cfg.data_seed)
        return train, [], test
    return tuple(datagen.sample_dataset(cfg.dataset_spec(role)) for role in ("train", "heldout", "test"))


def make_bundle(cfg: TrainConfig, n_identities: int) -> ModelBundle:
    spec = architecture(cfg.preset, n_identities=n_identities, generator_batchnorm=cfg.generator_batchnorm)
    return ModelBundle(spec, seed=cfg.seed)


def run_curriculum(cfg: TrainConfig, stages=(1, 2, 3), datasets=None, resume: str | Path | None = None) -> ModelBundle:
    """Pretrain the auxiliary networks, then run the requested stages in order.

    Writes ``pretrained/``, ``stage{k}/`` checkpoints, ``losses.jsonl`` and
    ``manifest.json`` under ``cfg.out_dir``. Starting at stage ``k > 1`` needs
    a ``stage{k-1}`` checkpoint (from ``resume`` or ``out_dir``).
    """
    set_deterministic(cfg.deterministic)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stages = sorted(stages)
    train, heldout, test = datasets if datasets is not None else build_datasets(cfg)
    x, y, ids = datagen.as_arrays(train)
    plans = stage_plans(cfg)
    opt = OptimizerConfig(cfg.lr, cfg.beta1, cfg.beta2, cfg.batch_size)
    manifest_path = out / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    manifest.update({"config": cfg.to_dict(), "config_hash": cfg.digest(), "seed": cfg.seed,
                     "data_seed": cfg.data_seed, "n_train": len(train), "n_test": len(test)})
    manifest.setdefault("checkpoints", {})

    first = stages[0]
    if first == 1:
        bundle = make_bundle(cfg, len(np.unique(ids)))
        pretrain_feature_net(bundle, x, ids, seed=cfg.seed, max_epochs=cfg.phi_max_epochs,
                             patience=cfg.phi_patience, lr=cfg.phi_lr, batch_size=cfg.batch_size)
        if test:
            xt, yt, _ = datagen.as_arrays(test)
            clf, acc = train_expression_classifier(bundle.spec, (x, y), (xt, yt), seed=cfg.seed,
                                                   epochs=cfg.classifier_epochs, lr=cfg.classifier_lr,
                                                   batch_size=cfg.batch_size)
            bundle.classifier.load_state_dict(clf.state_dict())
            bundle.classifier.requires_grad_(False)
            bundle.classifier_ready = True
            bundle.meta["classifier_test_accuracy"] = acc
        save_checkpoint(bundle, out / "pretrained")
        manifest["checkpoints"]["pretrained"] = str(out / "pretrained")
    else:
        prev = Path(resume) if resume is not None else out / f"stage{first - 1}"
        if not (prev / "meta.json").exists():
            raise PrerequisiteError(f"stage {first} requires the stage {first - 1} checkpoint at {prev}")
        bundle = load_checkpoint(prev)
        if bundle.stage < first - 1:
            raise PrerequisiteError(f"checkpoint {prev} is at stage {bundle.stage}; stage {first} needs {first - 1}")

    for k in stages:
        state = TrainState.fresh(k, cfg.seed)
        t0 = time.time()
        state = train_stage(bundle, plans[k], state, (x, y), opt=opt, out_dir=out,
                            checkpoint_every=cfg.checkpoint_every, flip=cfg.flip, q_mode=cfg.q_supervision)
        manifest["checkpoints"][f"stage{k}"] = str(out / f"stage{k}")
        manifest.setdefault("stage_seconds", {})[f"stage{k}"] = time.time() - t0
        manifest["final_checksum"] = bundle.checksum()
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        latest = out / f"stage{k}_latest"
        if latest.exists():
            shutil.rmtree(latest)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return bundle


def read_loss_records(path: str | Path) -> list[dict]:
    path = Path(path)
    f = path / "losses.jsonl" if path.is_dir() else path
    return [json.loads(line) for line in f.read_text().splitlines() if line.strip()]
