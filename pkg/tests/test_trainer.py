import json

import numpy as np
import pytest
import torch

from expredit import datagen, trainer
from expredit.config import load_config
from expredit.losses import NonFiniteLossError
from expredit.networks import GROUPS, ModelBundle, architecture, load_checkpoint
from expredit.trainer import (OptimizerConfig, PrerequisiteError, TrainState, pretrain_feature_net, read_loss_records,
                              run_curriculum, stage_plans, train_expression_classifier, train_stage)

CFG = load_config("tiny")
OPT = OptimizerConfig(batch_size=CFG.batch_size)


@pytest.fixture(scope="module")
def data():
    train, heldout, test = trainer.build_datasets(CFG)
    return datagen.as_arrays(train), datagen.as_arrays(test)


@pytest.fixture(scope="module")
def pretrained(data):
    (x, y, ids), _ = data
    bundle = ModelBundle(architecture("tiny", n_identities=len(np.unique(ids))), seed=0)
    pretrain_feature_net(bundle, x, ids, max_epochs=1, patience=1)
    return bundle


def fresh(pretrained, stage=0):
    b = load_checkpoint_copy(pretrained)
    b.stage = stage
    return b


def load_checkpoint_copy(bundle):
    clone = ModelBundle(bundle.spec, seed=bundle.seed)
    clone.load_state_dict(bundle.state_dict())
    clone.phi_ready, clone.classifier_ready = bundle.phi_ready, bundle.classifier_ready
    clone.phi.requires_grad_(False)
    return clone


def snapshot(bundle):
    return {g: {k: v.clone() for k, v in bundle.group(g).state_dict().items()} for g in GROUPS}


def changed_groups(before, bundle):
    after = snapshot(bundle)
    return {g for g in GROUPS if any(not torch.equal(before[g][k], after[g][k]) for k in before[g])}


def plan(stage, **kw):
    p = stage_plans(CFG)[stage]
    return p if not kw else trainer.StagePlan(**{**p.__dict__, **kw})


@pytest.mark.parametrize("stage,expected", [
    (1, {"dec", "q", "disc"}),
    (2, {"enc", "dec", "q"}),
    (3, {"enc", "dec", "q", "disc", "dz"}),
])
def test_each_stage_updates_only_its_subnetworks(pretrained, data, stage, expected):
    (x, y, _), _ = data
    bundle = fresh(pretrained, stage - 1)
    before = snapshot(bundle)
    train_stage(bundle, plan(stage), TrainState.fresh(stage, 0), (x, y), opt=OPT, max_steps=3)
    assert changed_groups(before, bundle) == expected


def test_stage_one_leaves_encoder_at_initialisation(pretrained, data):
    (x, y, _), _ = data
    bundle = fresh(pretrained)
    init = {k: v.clone() for k, v in bundle.enc.state_dict().items()}
    train_stage(bundle, plan(1), TrainState.fresh(1, 0), (x, y), opt=OPT)
    assert bundle.stage == 1
    for k, v in bundle.enc.state_dict().items():
        assert torch.equal(v, init[k])


def test_feature_net_frozen_through_stage_three(pretrained, data):
    (x, y, _), _ = data
    bundle = fresh(pretrained, 2)
    phi = {k: v.clone() for k, v in bundle.phi.state_dict().items()}
    train_stage(bundle, plan(3), TrainState.fresh(3, 0), (x, y), opt=OPT, max_steps=2)
    assert all(not p.requires_grad for p in bundle.phi.parameters())
    assert all(torch.equal(v, phi[k]) for k, v in bundle.phi.state_dict().items())


def test_resume_reproduces_next_losses(pretrained, data, tmp_path):
    (x, y, _), _ = data
    a = fresh(pretrained, 2)
    full = train_stage(a, plan(3), TrainState.fresh(3, 0), (x, y), opt=OPT, max_steps=6)
    b = fresh(pretrained, 2)
    train_stage(b, plan(3), TrainState.fresh(3, 0), (x, y), opt=OPT, max_steps=4,
                out_dir=tmp_path, checkpoint_every=4)
    restored, state = load_checkpoint(tmp_path / "stage3_latest", with_state=True)
    resumed = train_stage(restored, plan(3), TrainState.from_dict(state), (x, y), opt=OPT, max_steps=6)
    for ref, got in zip(full.history[4:], resumed.history[4:]):
        assert ref.keys() == got.keys()
        for k in ref:
            assert got[k] == pytest.approx(ref[k], rel=1e-5, abs=1e-12)
    assert len(resumed.history) == 6


def test_resume_across_epoch_boundary(pretrained, data, tmp_path):
    (x, y, _), _ = data
    n_batches = len(x) // OPT.batch_size
    p = plan(2, epochs=2)
    a = fresh(pretrained, 1)
    full = train_stage(a, p, TrainState.fresh(2, 0), (x, y), opt=OPT)
    b = fresh(pretrained, 1)
    train_stage(b, p, TrainState.fresh(2, 0), (x, y), opt=OPT, max_steps=n_batches,
                out_dir=tmp_path, checkpoint_every=n_batches)
    restored, state = load_checkpoint(tmp_path / "stage2_latest", with_state=True)
    resumed = train_stage(restored, p, TrainState.from_dict(state), (x, y), opt=OPT)
    assert [r["step"] for r in resumed.history] == [r["step"] for r in full.history]
    assert resumed.history[-1]["total"] == pytest.approx(full.history[-1]["total"], rel=1e-5)
    assert restored.checksum() == a.checksum()


def test_training_is_deterministic(pretrained, data):
    (x, y, _), _ = data
    runs = []
    for _ in range(2):
        b = fresh(pretrained)
        s = train_stage(b, plan(1), TrainState.fresh(1, 5), (x, y), opt=OPT, max_steps=4)
        runs.append((b.checksum(), s.history))
    assert runs[0] == runs[1]


def test_stage_prerequisites(pretrained, data, tmp_path):
    (x, y, _), _ = data
    with pytest.raises(PrerequisiteError):
        train_stage(fresh(pretrained, 0), plan(2), TrainState.fresh(2, 0), (x, y), opt=OPT)
    with pytest.raises(PrerequisiteError):
        train_stage(fresh(pretrained, 1), plan(3), TrainState.fresh(3, 0), (x, y), opt=OPT)
    no_phi = ModelBundle(pretrained.spec)
    no_phi.stage = 1
    with pytest.raises(PrerequisiteError, match="feature network"):
        train_stage(no_phi, plan(2), TrainState.fresh(2, 0), (x, y), opt=OPT)
    with pytest.raises(ValueError):
        train_stage(fresh(pretrained), plan(1), TrainState.fresh(2, 0), (x, y), opt=OPT)
    cfg = load_config("tiny", out_dir=str(tmp_path / "empty"))
    with pytest.raises(PrerequisiteError, match="stage 2"):
        run_curriculum(cfg, stages=(3,))


def test_non_finite_term_aborts_with_name(pretrained, data, monkeypatch):
    (x, y, _), _ = data
    monkeypatch.setattr(trainer, "tv_loss", lambda t: t.sum() * float("nan"))
    with pytest.raises(NonFiniteLossError) as err:
        train_stage(fresh(pretrained, 2), plan(3), TrainState.fresh(3, 0), (x, y), opt=OPT, max_steps=2)
    assert err.value.term == "tv"
    assert "tv" in str(err.value)


def test_nan_input_aborts(pretrained, data):
    (x, y, _), _ = data
    bad = x.copy()
    bad[:] = np.nan
    with pytest.raises(NonFiniteLossError):
        train_stage(fresh(pretrained, 1), plan(2), TrainState.fresh(2, 0), (bad, y), opt=OPT, max_steps=1,
                    flip=False)


def test_expression_classifier(data):
    (x, y, _), (xt, yt, _) = data
    spec = architecture("tiny")
    a, acc_a = train_expression_classifier(spec, (x, y), (xt, yt), seed=3, epochs=1, batch_size=8)
    b, acc_b = train_expression_classifier(spec, (x, y), (xt, yt), seed=3, epochs=1, batch_size=8)
    assert acc_a == acc_b and 0.0 <= acc_a <= 1.0
    for (k, v), (_, w) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(v, w), k
    _, acc_c = train_expression_classifier(spec, (x, y), (xt, yt), (x[:8], y[:8]), seed=3, epochs=1,
                                           batch_size=8)
    assert 0.0 <= acc_c <= 1.0
    with pytest.raises(ValueError):
        train_expression_classifier(spec, (x[:0], y[:0]), (xt, yt))


def test_feature_net_errors(data):
    (x, y, ids), _ = data
    bundle = ModelBundle(architecture("tiny", n_identities=7))
    with pytest.raises(ValueError, match="identities"):
        pretrain_feature_net(bundle, x, ids, max_epochs=1)
    with pytest.raises(ValueError):
        pretrain_feature_net(bundle, x, np.zeros_like(ids), max_epochs=1)


def test_run_curriculum_end_to_end(tmp_path):
    out = tmp_path / "run"
    cfg = load_config("tiny", out_dir=str(out))
    bundle = run_curriculum(cfg, stages=(1, 2))
    assert bundle.stage == 2 and bundle.phi_ready and bundle.classifier_ready
    for name in ("pretrained", "stage1", "stage2"):
        assert (out / name / "meta.json").exists()
    records = read_loss_records(out)
    assert {r["stage"] for r in records} == {1, 2}
    bundle = run_curriculum(cfg, stages=(3,))
    assert bundle.stage == 3
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["checkpoints"]) == {"pretrained", "stage1", "stage2", "stage3"}
    assert manifest["final_checksum"] == load_checkpoint(out / "stage3").checksum()
    assert manifest["config_hash"] == cfg.digest()
