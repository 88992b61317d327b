import numpy as np
import pytest

from slotcon.checkpoint import load_checkpoint
from slotcon.errors import ConfigError, DomainError
from slotcon.geometry import Junction, Shape
from slotcon.losses import TERM_NAMES
from slotcon.synthdata import Dataset, Scene, generate_dataset
from slotcon.trainer import (CHECKPOINT_FILE, METRICS_FILE, StepContext, TrainConfig, accumulate_gradients,
                             batch_frequencies, class_frequencies, inference_frequencies, new_state, stack_views,
                             train, train_step)


def dataset_for(settings, count=6, seed=0):
    return generate_dataset(settings.scene, count, seed, settings.grid)


def context_for(settings, dataset):
    q_id, q_sh = class_frequencies(settings, dataset)
    return StepContext(grid=settings.grid, train=settings.train, loss=settings.loss, augment=settings.augment,
                       q_id=q_id, q_sh=q_sh)


def test_learning_rate_schedule():
    cfg = TrainConfig(epochs=60, lr=1e-3, decay_epochs=(40, 50), decay_factor=0.1)
    assert cfg.lr_at(0) == pytest.approx(1e-3)
    assert cfg.lr_at(39) == pytest.approx(1e-3)
    assert cfg.lr_at(40) == pytest.approx(1e-4)
    assert cfg.lr_at(55) == pytest.approx(1e-5)


@pytest.mark.parametrize("kwargs", [
    {"decay_epochs": (50, 40)},
    {"epochs": 30, "decay_epochs": (40, 50)},
    {"batch_size": 0},
    {"mine_from": "bank"},
    {"dtype": "float16"},
    {"hard_negative_fraction": 0.0},
])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs).validate()


def test_zero_epochs_skip_decay_check():
    TrainConfig(epochs=0, decay_epochs=(40, 50)).validate()


def test_batch_frequencies():
    np.testing.assert_allclose(batch_frequencies(np.array([0, 0, 1]), 2), [0.6, 0.4])
    np.testing.assert_allclose(batch_frequencies(np.array([1, 1]), 2), [0.25, 0.75])


def test_dataset_frequencies_need_both_shapes(make_settings):
    settings = make_settings(loss__q_sh=None)
    only_t = Dataset(settings.grid, [Scene("a", 64, [Junction(10.0, 10.0, 0.0, Shape.T)], [])])
    with pytest.raises(ConfigError) as info:
        class_frequencies(settings, only_t)
    assert info.value.key == "loss.q_sh"


def test_inference_frequencies_skip_empty_class(make_settings):
    settings = make_settings()
    only_t = Dataset(settings.grid, [Scene("a", 64, [Junction(10.0, 10.0, 0.0, Shape.T)], [])])
    q = inference_frequencies(only_t, None, None)
    assert set(q) == {"id"}
    np.testing.assert_allclose(q["id"], [1 / 16, 15 / 16])
    assert set(inference_frequencies(only_t, None, np.array([0.3, 0.7]))) == {"id", "sh"}


def test_zero_weights_leave_parameters(make_settings):
    zero = {f"loss__lambda_{name}": 0.0 for name in TERM_NAMES}
    settings = make_settings(**zero)
    dataset = dataset_for(settings)
    state = new_state(settings)
    before = {name: p.value.copy() for name, p in state.network}
    record = train_step(state, list(enumerate(dataset.scenes[:3])), context_for(settings, dataset))
    assert record.total == 0.0
    for name, p in state.network:
        np.testing.assert_array_equal(p.value, before[name])


def test_terms_recombine_to_total(make_settings):
    settings = make_settings()
    dataset = dataset_for(settings)
    state = new_state(settings)
    record = train_step(state, list(enumerate(dataset.scenes[:3])), context_for(settings, dataset))
    lambdas = settings.loss.lambdas
    assert record.total == pytest.approx(sum(lambdas[name] * record.terms[name] for name in TERM_NAMES))
    assert all(np.isfinite(v) for v in record.terms.values())
    assert state.step == 1


def test_every_component_receives_gradient(make_settings):
    settings = make_settings(train__pool_views=False)
    dataset = dataset_for(settings)
    state = new_state(settings)
    ctx = context_for(settings, dataset)
    detection = stack_views(dataset.scenes[:3], settings.grid)
    accumulate_gradients(state, detection, [detection, detection], ctx)
    for prefix in ("encoder", "proj_id", "proj_sh", "cls_id", "cls_sh", "proto_id", "proto_sh", "reg"):
        assert any(p.grad.any() for name, p in state.network if name.startswith(prefix)), prefix


def test_mining_fills_banks(make_settings):
    settings = make_settings()
    dataset = dataset_for(settings)
    state = new_state(settings)
    record = train_step(state, list(enumerate(dataset.scenes[:3])), context_for(settings, dataset))
    assert record.hard_negatives >= 1
    assert len(state.banks[1]) == min(16, record.hard_negatives)
    assert 0 < len(state.banks[0]) <= 16
    np.testing.assert_array_equal(state.banks[0].steps(), 0)


def test_without_contrastive_branch(make_settings):
    settings = make_settings(train__use_cl=False)
    dataset = dataset_for(settings)
    state = new_state(settings)
    record = train_step(state, list(enumerate(dataset.scenes[:3])), context_for(settings, dataset))
    assert record.terms["cl_sh"] == record.terms["cl_id"] == record.terms["a_id"] == 0.0
    assert len(state.banks[0]) == len(state.banks[1]) == 0


def test_zero_epochs_writes_checkpoint(make_settings, tmp_path):
    settings = make_settings(train__epochs=0)
    path, history = train(settings, dataset_for(settings), tmp_path, quiet=True)
    assert path == tmp_path / CHECKPOINT_FILE
    assert history == []
    ckpt = load_checkpoint(path)
    assert ckpt.epoch == 0
    assert ckpt.class_frequencies["sh"] == pytest.approx([0.2, 0.8])
    assert ckpt.class_frequencies["id"][0] < ckpt.class_frequencies["id"][1]
    assert (tmp_path / METRICS_FILE).read_text().count("\n") == 1


def test_empty_dataset(make_settings, tmp_path):
    settings = make_settings()
    with pytest.raises(DomainError):
        train(settings, Dataset(settings.grid, []), tmp_path, quiet=True)


def test_training_is_deterministic(make_settings, tmp_path):
    settings = make_settings()
    dataset = dataset_for(settings)
    a, hist_a = train(settings, dataset, tmp_path / "a", quiet=True)
    b, hist_b = train(settings, dataset, tmp_path / "b", quiet=True)
    assert hist_a == hist_b
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a" / METRICS_FILE).read_bytes() == (tmp_path / "b" / METRICS_FILE).read_bytes()
    assert [row["epoch"] for row in hist_a] == [1, 2]
    assert "precision" in hist_a[0]


def test_resume_matches_uninterrupted(make_settings, tmp_path):
    full = make_settings(train__decay_epochs=[])
    first = make_settings(train__decay_epochs=[], train__epochs=1)
    dataset = dataset_for(full)
    _, uninterrupted = train(full, dataset, tmp_path / "full", quiet=True)
    ckpt_path, partial = train(first, dataset, tmp_path / "resumed", quiet=True)
    _, resumed = train(full, dataset, tmp_path / "resumed", resume=load_checkpoint(ckpt_path), history=partial,
                       quiet=True)
    assert resumed == uninterrupted
