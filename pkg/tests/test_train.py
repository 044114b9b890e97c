import configparser
import copy

import numpy as np
import pytest

from peft_forge.errors import FormatError, NumericError, ParameterError
from peft_forge.numerics import SeededRng, finite_difference_grad, gaussian_matrix
from peft_forge.prune import PrunePlan
from peft_forge.train import (
    Dataset, Layer, Optimizer, ToyModel, TrainConfig, attach_masks, build_model, clip_gradients,
    compute_gradients, evaluate_loss, global_norm, make_teacher_task, train_loop, train_step, warmup_lr,
)

REFERENCE_HYPERPARAMETERS = {
    "MAX LENGTH": "400", "MODEL": "LLaVA-NeXT-Video-7B-hf", "USE_QLORA": "True (4-Bit)", "batch_size": "2",
    "lora_r": "64", "lora_alpha": "128.0", "max_epochs": "1", "val_check_interval": "0.2",
    "check_val_every_n_epoch": "1", "gradient_clip_val": "1.0", "accumulate_grad_batches": "1",
    "learning_rate": "0.0001", "num_nodes": "1", "warmup_steps": "50",
}


def desk(**kw):
    base = dict(lora_rank=4, lora_alpha=8.0, learning_rate=1e-3, use_qlora=False)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def task():
    return make_teacher_task(0)


def adapter_state(model):
    return [(ad.a.copy(), ad.b.copy()) for ad in model.adapters()]


def test_defaults_follow_reference_hyperparameters():
    text = TrainConfig().dumps()
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    assert dict(cp["hyperparameters"]) == REFERENCE_HYPERPARAMETERS


def test_config_roundtrip_and_errors():
    cfg = desk(prune_sparsity=0.05, use_qlora=True, qlora_bits=8, lora_targets="0")
    assert TrainConfig.loads(cfg.dumps()) == cfg
    with pytest.raises(FormatError):
        TrainConfig.loads("[hyperparameters]\nbogus = 1\n")
    with pytest.raises(FormatError):
        TrainConfig.loads("[hyperparameters]\nUSE_QLORA = maybe\n")
    with pytest.raises(ParameterError):
        TrainConfig(val_check_interval=0.0)


def test_lr_zero_leaves_adapters_unchanged(task):
    model = build_model(task.bases, desk(learning_rate=0.0))
    before = adapter_state(model)
    loss = train_step(model, task.train.batch([0, 1]), desk(learning_rate=0.0), 10)
    assert loss > 0
    for (a0, b0), ad in zip(before, model.adapters()):
        assert np.array_equal(a0, ad.a) and np.array_equal(b0, ad.b)


def test_clipping_scales_update_by_norm_ratio(task):
    cfg = desk(optimizer="sgd", warmup_steps=0, learning_rate=1.0, gradient_clip_val=1.0, init_stddev=0.5)
    model = build_model(task.bases, cfg)
    for ad in model.adapters():
        ad.b = np.full_like(ad.b, 0.3)
    x, t = task.train.batch(list(range(8)))
    t = t + 40.0
    _, raw = compute_gradients(model, x, t)
    norm = global_norm(raw)
    assert norm > 1.0
    before = adapter_state(model)
    train_step(model, (x, t), cfg, 0)
    for i, ((a0, b0), ad) in enumerate(zip(before, model.adapters())):
        np.testing.assert_allclose(a0 - ad.a, raw[i].grad_a / norm, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(b0 - ad.b, raw[i].grad_b / norm, rtol=1e-12, atol=1e-15)


def test_clip_norm_ten_gives_factor_tenth():
    from peft_forge.lora import AdapterGradients
    grads = {0: AdapterGradients(np.array([[6.0]]), np.array([[8.0]]))}
    clipped, norm = clip_gradients(grads, 1.0)
    assert norm == 10.0
    assert clipped[0].grad_a[0, 0] == pytest.approx(0.6, rel=1e-15)
    assert clipped[0].grad_b[0, 0] == pytest.approx(0.8, rel=1e-15)
    assert global_norm(clipped) == pytest.approx(1.0, rel=1e-15)
    same, _ = clip_gradients(grads, 10.0)
    assert same is grads


def test_unclipped_step_matches_disabled_clipping(task):
    x, t = task.train.batch([3, 4])
    runs = []
    for clip in (1e9, 0.0):
        model = build_model(task.bases, desk(gradient_clip_val=clip))
        train_step(model, (x, t), desk(gradient_clip_val=clip), 60)
        runs.append(adapter_state(model))
    for (a1, b1), (a2, b2) in zip(*runs):
        assert a1.tobytes() == a2.tobytes() and b1.tobytes() == b2.tobytes()


def test_warmup_schedule():
    cfg = TrainConfig()
    assert warmup_lr(cfg, 25) == 0.5 * cfg.learning_rate
    lrs = [warmup_lr(cfg, s) for s in range(80)]
    assert lrs[0] == 0.0
    assert all(a <= b for a, b in zip(lrs, lrs[1:]))
    assert set(lrs[50:]) == {cfg.learning_rate}


def test_negative_step_and_divergence(task):
    model = build_model(task.bases, desk())
    with pytest.raises(ParameterError):
        train_step(model, task.train.batch([0]), desk(), -1)
    x, t = task.train.batch([0])
    with pytest.raises(NumericError, match="step 7"):
        train_step(model, (x, t * np.inf), desk(), 7)


@pytest.mark.parametrize("masked", [False, True])
def test_model_gradients_match_finite_differences(masked):
    rng = SeededRng(8)
    bases = [gaussian_matrix(rng, 5, 4, 0.5), gaussian_matrix(rng, 3, 5, 0.5)]
    model = build_model(bases, desk(lora_rank=2, init_stddev=0.3))
    for ad in model.adapters():
        ad.b = gaussian_matrix(rng, *ad.b.shape, 0.3)
    if masked:
        attach_masks(model, PrunePlan(0.3))
    x, t = gaussian_matrix(rng, 4, 6, 1.0), gaussian_matrix(rng, 3, 6, 1.0)
    _, grads = compute_gradients(model, x, t)
    for i, ad in enumerate(model.adapters()):
        for name in ("a", "b"):
            def f(p, ad=ad, name=name):
                old = getattr(ad, name)
                setattr(ad, name, p)
                try:
                    return compute_gradients(model, x, t)[0]
                finally:
                    setattr(ad, name, old)
            fd = finite_difference_grad(f, getattr(ad, name), 1e-6)
            got = getattr(grads[i], "grad_" + name)
            assert np.max(np.abs(got - fd)) <= 1e-6 * max(1.0, np.max(np.abs(fd)))


def test_train_loop_is_deterministic(task):
    reports = []
    for _ in range(2):
        model = build_model(task.bases, desk())
        reports.append((train_loop(model, task.train, desk(), task.val, max_steps=120).to_dict(),
                        model.adapter_checksums()))
    assert reports[0] == reports[1]


def test_validation_schedule_and_base_freeze(task):
    model = build_model(task.bases, desk())
    before = model.base_checksums()
    report = train_loop(model, task.train, desk(), task.val)
    assert report.steps == 500
    assert report.val_steps == [100, 200, 300, 400, 500]
    assert model.base_checksums() == before
    assert report.trainable_params == 2 * 4 * 32
    assert "wall_time" not in report.to_dict() and "wall_time" in report.to_dict(include_timing=True)


def test_convergence_lora_and_qlora(task):
    finals = {}
    for q in (False, True):
        model = build_model(task.bases, desk(use_qlora=q))
        initial = evaluate_loss(model, task.train)
        train_loop(model, task.train, desk(use_qlora=q), task.val)
        finals[q] = evaluate_loss(model, task.train)
        assert finals[q] <= 0.5 * initial
    assert abs(finals[True] - finals[False]) <= 0.2 * finals[False]


def test_gradient_accumulation_matches_bigger_batch(task):
    small = Dataset(task.train.inputs[:40], task.train.targets[:40])
    states = []
    for bs, acc in ((2, 1), (1, 2)):
        cfg = desk(batch_size=bs, accumulate_grad_batches=acc, optimizer="sgd", learning_rate=0.05)
        model = build_model(task.bases, cfg)
        rep = train_loop(model, small, cfg)
        assert rep.steps == 20
        states.append(adapter_state(model))
    for (a1, b1), (a2, b2) in zip(*states):
        np.testing.assert_allclose(a1, a2, rtol=1e-10, atol=1e-13)
        np.testing.assert_allclose(b1, b2, rtol=1e-10, atol=1e-13)


def test_masked_positions_stay_zero_every_step(task):
    cfg = desk(prune_sparsity=0.1, prune_order="before")
    model = build_model(task.bases, cfg)
    assert all(l.mask is not None for l in model.layers)
    bad = []

    def check(step, m):
        for layer in m.layers:
            w = layer.effective_weight()
            if np.any(w[~layer.mask.mask] != 0.0):
                bad.append(step)

    train_loop(model, task.train, cfg, max_steps=100, on_step=check)
    assert bad == []


def test_evaluate_loss_properties(task):
    teacher = ToyModel([Layer(base=w) for w in task.teacher])
    assert evaluate_loss(teacher, task.train) < 1e-10
    model = build_model(task.bases, desk())
    sums = model.adapter_checksums() + model.base_checksums()
    first = evaluate_loss(model, task.val)
    assert evaluate_loss(model, task.val) == first
    assert model.adapter_checksums() + model.base_checksums() == sums
    full = train_step(copy.deepcopy(model), task.val.batch(list(range(len(task.val)))), desk(learning_rate=0.0), 0)
    assert full == pytest.approx(first, rel=1e-12)
    with pytest.raises(ParameterError):
        evaluate_loss(model, Dataset(np.zeros((0, 16)), np.zeros((0, 16))))


def test_empty_dataset_rejected(task):
    model = build_model(task.bases, desk())
    with pytest.raises(ParameterError):
        train_loop(model, Dataset(np.zeros((0, 16)), np.zeros((0, 16))), desk())


def test_optimizer_kinds():
    with pytest.raises(ParameterError):
        TrainConfig(optimizer="lion")
    assert Optimizer("sgd").kind == "sgd"
