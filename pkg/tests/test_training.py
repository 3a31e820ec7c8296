import pytest
import torch
from pydantic import ValidationError

from guided_dml.datapipe.main import DatasetSplit
from guided_dml.errors import ConfigurationError, TrainingError
from guided_dml.losses.main import GeminiLossParams, HybridLossParams
from guided_dml.models.main import StudentConfig, TeacherConfig, build_teacher, load_checkpoint, save_checkpoint
from guided_dml.training.main import (
    DistillationTargets,
    RunConfig,
    compute_distillation_targets,
    held_out_triplet_stats,
    loss_curve_frame,
    train_baseline,
    train_student,
    train_teacher,
)
from tests.conftest import TOY_PATCH


@pytest.fixture
def run_cfg():
    return RunConfig(seed=0, max_epochs=4, batch_size=16, triplets_per_epoch=48)


@pytest.fixture(scope="module")
def trained_teacher(toy_split):
    config = TeacherConfig(n_classes=2, embedding_dim=16, patch_size=TOY_PATCH)
    return train_teacher(
        toy_split, config, GeminiLossParams(), RunConfig(seed=0, max_epochs=3, batch_size=16, triplets_per_epoch=48)
    )


def test_epoch_cap():
    with pytest.raises(ValidationError):
        RunConfig(max_epochs=61)


def test_teacher_loss_decreases(toy_split, teacher_config, run_cfg):
    run = train_teacher(toy_split, teacher_config, GeminiLossParams(), run_cfg)

    assert len(run.loss_curve) == 4
    assert run.loss_curve[-1][1] < run.loss_curve[0][1]
    assert 1 <= run.best_epoch <= 4
    assert run.optimizer == {"method": "adam", "learning_rate": 1e-3}


def test_teacher_training_is_reproducible(toy_split, teacher_config):
    cfg = RunConfig(seed=5, max_epochs=2, batch_size=16, triplets_per_epoch=32)
    first = train_teacher(toy_split, teacher_config, GeminiLossParams(), cfg)
    second = train_teacher(toy_split, teacher_config, GeminiLossParams(), cfg)

    assert first.loss_curve == second.loss_curve
    assert all(torch.equal(first.state.parameters[k], second.state.parameters[k]) for k in first.state.parameters)


def test_non_finite_loss_aborts_with_snapshot(mocker, toy_split, teacher_config, tmp_path):
    mocker.patch(
        "guided_dml.training.main.gemini_loss",
        return_value=torch.tensor(float("nan"), requires_grad=True),
    )
    cfg = RunConfig(seed=0, max_epochs=2, batch_size=16, triplets_per_epoch=16, checkpoint_dir=tmp_path)

    with pytest.raises(TrainingError) as error:
        train_teacher(toy_split, teacher_config, GeminiLossParams(), cfg)

    assert error.value.snapshot_dir == tmp_path / "diagnostic"
    assert load_checkpoint(tmp_path / "diagnostic").kind == "teacher"


def test_interrupted_run_resumes(toy_split, teacher_config, tmp_path):
    base = dict(seed=1, batch_size=16, triplets_per_epoch=32)
    fresh = train_teacher(toy_split, teacher_config, GeminiLossParams(), RunConfig(max_epochs=3, **base))

    train_teacher(
        toy_split, teacher_config, GeminiLossParams(), RunConfig(max_epochs=2, checkpoint_dir=tmp_path, **base)
    )
    resumed = train_teacher(
        toy_split, teacher_config, GeminiLossParams(), RunConfig(max_epochs=3, checkpoint_dir=tmp_path, **base)
    )

    assert [epoch for epoch, _ in resumed.loss_curve] == [1, 2, 3]
    assert [value for _, value in resumed.loss_curve] == pytest.approx(
        [value for _, value in fresh.loss_curve], abs=1e-5
    )


def test_distillation_targets_cover_train_split(trained_teacher, toy_split):
    targets = compute_distillation_targets(trained_teacher.state, toy_split)

    assert set(targets.targets) == {patch.patch_id for patch in toy_split.train}
    assert targets.embedding_dim == 16
    again = compute_distillation_targets(trained_teacher.state, toy_split)
    assert all(torch.equal(targets.targets[key], again.targets[key]) for key in targets.targets)


def test_student_terms_decrease(trained_teacher, toy_split, student_config):
    targets = compute_distillation_targets(trained_teacher.state, toy_split)
    run = train_student(
        toy_split, targets, student_config, HybridLossParams(), RunConfig(seed=0, max_epochs=4, batch_size=16)
    )

    distance = [value for _, value in run.component_curves["distance"]]
    cross_entropy = [value for _, value in run.component_curves["cross_entropy"]]
    assert distance[-1] < distance[0]
    assert cross_entropy[-1] < cross_entropy[0]
    assert list(loss_curve_frame(run).columns) == ["epoch", "loss", "distance", "cross_entropy"]


def test_student_training_leaves_teacher_untouched(trained_teacher, toy_split, student_config, tmp_path):
    directory = save_checkpoint(trained_teacher.state, tmp_path / "teacher")
    before = (directory / "parameters.pt").read_bytes()
    teacher = load_checkpoint(directory)
    reference = {name: value.clone() for name, value in teacher.parameters.items()}

    targets = compute_distillation_targets(teacher, toy_split)
    train_student(toy_split, targets, student_config, HybridLossParams(), RunConfig(seed=0, max_epochs=1, batch_size=16))

    assert (directory / "parameters.pt").read_bytes() == before
    assert all(torch.equal(teacher.parameters[name], reference[name]) for name in reference)


def test_small_gamma_reduces_to_cross_entropy(trained_teacher, toy_split, student_config):
    targets = compute_distillation_targets(trained_teacher.state, toy_split)
    run = train_student(
        toy_split, targets, student_config, HybridLossParams(gamma=1e-4), RunConfig(seed=0, max_epochs=1, batch_size=16)
    )
    distance = run.component_curves["distance"][0][1]
    assert distance < 0.01 * run.loss_curve[0][1]


def test_student_dimension_must_match_teacher(trained_teacher, toy_split):
    targets = compute_distillation_targets(trained_teacher.state, toy_split)
    with pytest.raises(ConfigurationError):
        train_student(
            toy_split,
            targets,
            StudentConfig(embedding_dim=32, n_classes=2, patch_size=TOY_PATCH),
            HybridLossParams(),
            RunConfig(max_epochs=1),
        )


def test_student_needs_a_target_for_every_patch(toy_split, student_config):
    partial = DistillationTargets(
        targets={toy_split.train[0].patch_id: torch.zeros(16)}, embedding_dim=16
    )
    with pytest.raises(ConfigurationError):
        train_student(toy_split, partial, student_config, HybridLossParams(), RunConfig(max_epochs=1))


@pytest.mark.parametrize("kind", ["siamese", "triplet", "classifier"])
def test_baselines_train(kind, toy_split, student_config):
    run = train_baseline(toy_split, kind, student_config, margin=1.0, run_cfg=RunConfig(seed=0, max_epochs=2, batch_size=16))

    assert len(run.loss_curve) == 2
    assert run.state.kind == "student"
    assert run.config["kind"] == kind


def test_triplet_baseline_separates_held_out_triplets(toy_split, student_config):
    run = train_baseline(
        toy_split, "triplet", student_config, margin=1.0, run_cfg=RunConfig(seed=0, max_epochs=6, batch_size=16)
    )
    stats = held_out_triplet_stats(run.state, toy_split.test, seed=0, n_triplets=200)
    assert stats.accuracy > 0.9
    assert stats.mean_margin > 0.0


def test_siamese_loss_decreases(toy_split, student_config):
    run = train_baseline(
        toy_split, "siamese", student_config, margin=1.0, run_cfg=RunConfig(seed=0, max_epochs=5, batch_size=16)
    )
    losses = [value for _, value in run.loss_curve]
    assert len(losses) == 5
    assert losses[-1] < losses[0]


@pytest.mark.parametrize("kind", ["siamese", "triplet", "classifier"])
def test_baselines_are_seeded(kind, toy_split, student_config):
    cfg = RunConfig(seed=3, max_epochs=2, batch_size=16)
    first = train_baseline(toy_split, kind, student_config, margin=1.0, run_cfg=cfg)
    second = train_baseline(toy_split, kind, student_config, margin=1.0, run_cfg=cfg)

    assert first.loss_curve == second.loss_curve
    assert all(torch.equal(first.state.parameters[k], second.state.parameters[k]) for k in first.state.parameters)


def test_baseline_rejects_unknown_kind(toy_split, student_config):
    with pytest.raises(ConfigurationError):
        train_baseline(toy_split, "arcface", student_config, margin=1.0, run_cfg=RunConfig(max_epochs=1))


def test_held_out_triplet_stats(trained_teacher, toy_split):
    stats = held_out_triplet_stats(trained_teacher.state, toy_split.test, seed=0, n_triplets=100)
    assert stats.mean_margin > 0.0
    assert 0.5 < stats.accuracy <= 1.0


def test_teacher_needs_two_classes(toy_split, teacher_config):
    train = [p for p in toy_split.train if p.label.index == 0]
    test = [p for p in toy_split.test if p.label.index == 0]
    single = DatasetSplit(
        train=train,
        test=test,
        seed=0,
        train_image_ids=sorted({p.source_image_id for p in train}),
        test_image_ids=sorted({p.source_image_id for p in test}),
    )
    with pytest.raises(ConfigurationError):
        train_teacher(single, teacher_config, GeminiLossParams(), RunConfig(max_epochs=1))


def test_untrained_teacher_is_seeded(teacher_config):
    first = build_teacher(teacher_config, seed=2).parameters
    second = build_teacher(teacher_config, seed=2).parameters
    assert all(torch.equal(first[name], second[name]) for name in first)
