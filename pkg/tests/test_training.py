import json

import numpy as np
import pytest
import torch

from dtn import training
from dtn.data import ClassOmissionFilter
from dtn.exceptions import TrainingDiverged, UsageError
from dtn.losses import LossWeights
from dtn.networks import GeneratorHead
from dtn.training import (
    Ablation,
    TrainingConfig,
    TrainingLog,
    TransferModel,
    train_classifier,
    train_dtn,
)

from conftest import synthetic_split


def params(net):
    return [p.detach().clone() for p in net.parameters()]


def same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def strip_wall(records):
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in records]


def test_f_is_never_updated(source_split, target_split, tiny_f, tiny_config):
    before = params(tiny_f)
    train_dtn(source_split, target_split, tiny_f, tiny_config)
    assert same(before, params(tiny_f))


def test_alternation_gates_gradients(source_split, target_split, tiny_f, tiny_config):
    snaps, checks = {}, []

    def hook(stage, step, model):
        if stage == "begin":
            snaps["g"] = params(model.g)
        elif stage == "after_d":
            checks.append(("g frozen in D step", same(snaps["g"], params(model.g))))
            snaps["D"] = params(model.D)
        else:
            checks.append(("D frozen in G step", same(snaps["D"], params(model.D))))
            checks.append(("g moved in G step", not same(snaps["g"], params(model.g))))

    train_dtn(source_split, target_split, tiny_f, tiny_config, hook=hook)
    assert len(checks) == 3 * tiny_config.total_steps
    assert all(ok for _, ok in checks), [name for name, ok in checks if not ok]


def test_determinism(source_split, target_split, tiny_f, tiny_config):
    cfg = tiny_config.replace(total_steps=50)
    a = train_dtn(source_split, target_split, tiny_f, cfg)
    b = train_dtn(source_split, target_split, tiny_f, cfg)
    assert strip_wall(a.log) == strip_wall(b.log)
    assert len(a.log) == 50
    c = train_dtn(source_split, target_split, tiny_f, cfg.replace(seed=1, total_steps=3))
    assert strip_wall(c.log) != strip_wall(a.log[:3])


def test_log_decomposes(source_split, target_split, tiny_f, tiny_config):
    cfg = tiny_config.replace(weights=LossWeights(15, 15, 0.01))
    model = train_dtn(source_split, target_split, tiny_f, cfg)
    w = cfg.effective_weights()
    for rec in model.log:
        expected = rec["l_gang"] + w.alpha * rec["l_const"] + w.beta * rec["l_tid"] + w.gamma * rec["l_tv"]
        assert rec["l_g_total"] == pytest.approx(expected, rel=1e-5)
        assert all(rec[k] >= 0 for k in ("l_d", "l_gang", "l_const", "l_tid", "l_tv"))


@pytest.mark.parametrize("ablation, zeroed", [
    (Ablation.NO_TID, ["l_tid"]),
    (Ablation.NO_CONST, ["l_const"]),
    (Ablation.NO_GAN, ["l_d", "l_gang"]),
])
def test_ablation_removes_terms(source_split, target_split, tiny_f, tiny_config, ablation, zeroed):
    model = train_dtn(source_split, target_split, tiny_f, tiny_config.replace(ablation={ablation}))
    for rec in model.log:
        for key in zeroed:
            assert rec[key] == 0
        assert rec["l_g_total"] > 0


def test_no_gan_leaves_discriminator_untouched(source_split, target_split, tiny_f, tiny_config):
    cfg = tiny_config.replace(ablation={Ablation.NO_GAN}, total_steps=0)
    init = params(train_dtn(source_split, target_split, tiny_f, cfg).D)
    trained = train_dtn(source_split, target_split, tiny_f, cfg.replace(total_steps=3))
    assert same(init, params(trained.D))


def test_no_f_in_g_uses_fresh_encoder(source_split, target_split, tiny_f, tiny_config):
    before = params(tiny_f)
    model = train_dtn(source_split, target_split, tiny_f,
                      tiny_config.replace(ablation={Ablation.NO_F_IN_G}))
    assert model.encoder is not None
    assert same(before, params(tiny_f))
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    with torch.no_grad():
        expected = model.g.eval()(model.encoder.eval().features(x))
    assert torch.equal(model(x), expected)


def test_baseline_and_no_f_in_g_exclusive():
    with pytest.raises(UsageError):
        TrainingConfig(ablation={Ablation.BASELINE, Ablation.NO_F_IN_G})


def test_zero_steps_is_seeded_init(source_split, target_split, tiny_f, tiny_config):
    model = train_dtn(source_split, target_split, tiny_f, tiny_config.replace(total_steps=0))
    torch.manual_seed(tiny_config.seed)
    fresh = GeneratorHead(tiny_f.representation_dim, 1, tiny_config.g_widths)
    assert same(params(fresh), params(model.g))
    assert model.log == []


def test_checkpoint_round_trip(tmp_path, source_split, target_split, tiny_f, tiny_config):
    run = tmp_path / "run"
    model = train_dtn(source_split, target_split, tiny_f, tiny_config.replace(total_steps=5), run_dir=run)
    steps = sorted(p.name for p in run.glob("step_*"))
    assert steps == ["step_00000002", "step_00000004", "step_00000005"]
    assert (run / "latest").resolve().name == "step_00000005"
    manifest = json.loads((run / "latest/manifest.json").read_text())
    assert manifest["step"] == 5 and manifest["config_hash"] == model.config.config_hash()
    loaded = TransferModel.load(run)
    x = torch.rand(4, 3, 32, 32) * 2 - 1
    assert torch.equal(model(x), loaded(x))
    assert loaded.config == model.config
    assert len(TrainingLog.read(run / "train_log.jsonl")) == 5


def test_divergence_guard(monkeypatch, source_split, target_split, tiny_f, tiny_config):
    monkeypatch.setattr(training, "loss_identity", lambda t, g: torch.tensor(float("nan")))
    with pytest.raises(TrainingDiverged) as info:
        train_dtn(source_split, target_split, tiny_f, tiny_config)
    assert info.value.step == 1


def test_baseline_training(source_split, target_split, tiny_f, tiny_config):
    before = params(tiny_f)
    model = train_dtn(source_split, target_split, tiny_f,
                      tiny_config.replace(ablation={Ablation.BASELINE}))
    assert model.g is None and model.baseline is not None
    assert model.D.num_classes == 2
    assert same(before, params(tiny_f))
    f_ptrs = {p.data_ptr() for p in tiny_f.parameters()}
    assert not f_ptrs & {p.data_ptr() for p in model.baseline.parameters()}
    for rec in model.log:
        assert rec["l_g_total"] == pytest.approx(rec["l_gang"] + 15 * rec["l_const"], rel=1e-5)
    out = model(torch.rand(3, 3, 32, 32) * 2 - 1)
    assert out.shape == (3, 1, 32, 32)


def test_reverse_direction_generates_color(source_split, target_split, tiny_f, tiny_config):
    model = train_dtn(target_split, source_split, tiny_f, tiny_config)
    assert model.g.out_channels == 3 and model.D.in_channels == 3
    out = model(torch.rand(2, 1, 32, 32) * 2 - 1)
    assert out.shape == (2, 3, 32, 32)


def test_omission_filters_training_data(monkeypatch, source_split, target_split, tiny_f, tiny_config):
    seen = []
    real = training.make_batches

    def spy(split, *a, **k):
        seen.append(np.unique(split.labels))
        return real(split, *a, **k)

    monkeypatch.setattr(training, "make_batches", spy)
    cfg = tiny_config.replace(omission=ClassOmissionFilter(omit_from_s=3, omit_from_t=5))
    train_dtn(source_split, target_split, tiny_f, cfg)
    assert 3 not in seen[0] and 5 in seen[0]
    assert 5 not in seen[1] and 3 in seen[1]


def test_classifier_learns_small_set():
    split = synthetic_split(32, 3, seed=0)
    cfg = TrainingConfig.supervised(total_steps=60, batch_size=16, f_widths=(8, 8, 8, 16))
    net, records = train_classifier(split, cfg)
    assert not net.training
    assert np.mean([r["loss"] for r in records[-5:]]) < np.mean([r["loss"] for r in records[:5]])


def test_classifier_needs_labels():
    with pytest.raises(UsageError):
        train_classifier(synthetic_split(8, 3, 0, labeled=False), TrainingConfig.supervised())


def test_config_dict_round_trip(tiny_config):
    cfg = tiny_config.replace(ablation={Ablation.NO_TID}, direction="t_to_s",
                              omission=ClassOmissionFilter(3, None, 3))
    again = TrainingConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.config_hash() == cfg.config_hash()


def test_train_f_zero_steps_is_seeded_init():
    from dtn.networks import FeatureNetwork
    from dtn.training import train_f

    cfg = TrainingConfig.supervised(total_steps=0, f_widths=(8, 8, 8, 16), seed=4)
    net, records = train_f(synthetic_split(20, 3, seed=0), cfg)
    torch.manual_seed(4)
    fresh = FeatureNetwork((8, 8, 8, 16))
    assert same(params(fresh), params(net)) and records == []


def test_classifier_same_seed_same_result():
    split = synthetic_split(32, 1, seed=0)
    cfg = TrainingConfig.supervised(total_steps=5, batch_size=8, f_widths=(8, 8, 8, 16))
    a, log_a = training.train_eval_classifier(split, cfg)
    b, log_b = training.train_eval_classifier(split, cfg)
    assert same(params(a), params(b))
    assert strip_wall(log_a) == strip_wall(log_b)


def test_baseline_alpha_zero(source_split, target_split, tiny_f, tiny_config):
    cfg = tiny_config.replace(ablation={Ablation.BASELINE}, weights=LossWeights(alpha=0))
    model = train_dtn(source_split, target_split, tiny_f, cfg)
    assert all(r["l_g_total"] == pytest.approx(r["l_gang"]) for r in model.log)
