import numpy as np
import pytest
import torch
from pydantic import ValidationError

from guided_dml.errors import RejectedInputError
from guided_dml.models.main import (
    BackboneSpec,
    StudentConfig,
    build_student,
    build_teacher,
    class_indices,
    extract_penultimate_features,
    load_checkpoint,
    save_checkpoint,
    student_forward,
    teacher_embed,
    teacher_forward_global,
    teacher_forward_local,
)
from tests.conftest import TOY_PATCH


@pytest.fixture
def teacher(teacher_config):
    return build_teacher(teacher_config, seed=0)


@pytest.fixture
def student(student_config):
    return build_student(student_config, seed=0)


@pytest.fixture
def patches(make_patch):
    return [make_patch(f"q{i}", label_index=i % 2, size=TOY_PATCH) for i in range(4)]


def test_stream_is_deterministic(teacher, patches, make_patch):
    twin = make_patch("twin", values=patches[0].values.copy(), size=TOY_PATCH)
    assert torch.equal(teacher_forward_local(teacher, patches[0], 0), teacher_forward_local(teacher, twin, 0))


def test_streams_are_independent(teacher, patches):
    assert not torch.allclose(teacher_forward_local(teacher, patches[0], 0), teacher_forward_local(teacher, patches[0], 1))


def test_stream_output_matches_spec(teacher, teacher_config, patches):
    assert teacher_forward_local(teacher, patches[0], 1).shape == (teacher_config.stream_spec.output_size,)


def test_stream_index_out_of_range(teacher, patches):
    with pytest.raises(RejectedInputError):
        teacher_forward_local(teacher, patches[0], 2)


def test_global_composes_with_local(teacher, teacher_config, patches):
    local = teacher_forward_local(teacher, patches[1], patches[1].label.index)
    embedded = teacher_forward_global(teacher, local)

    assert embedded.shape == (teacher_config.embedding_dim,)
    assert torch.allclose(embedded, teacher_embed(teacher, [patches[1]])[0], atol=1e-6)


def test_global_handles_zero_intermediate(teacher, teacher_config):
    out = teacher_forward_global(teacher, torch.zeros(teacher_config.stream_spec.output_size))
    assert torch.isfinite(out).all()


def test_global_rejects_wrong_shape(teacher):
    with pytest.raises(RejectedInputError):
        teacher_forward_global(teacher, torch.zeros(3))


def test_teacher_batch_routing_matches_single_calls(teacher, patches):
    batched = teacher_embed(teacher, patches)
    for row, patch in enumerate(patches):
        local = teacher_forward_local(teacher, patch, patch.label.index)
        assert torch.allclose(batched[row], teacher_forward_global(teacher, local), atol=1e-6)


def test_stream_parameters_are_not_shared(teacher, patches):
    before = teacher_forward_local(teacher, patches[0], 1)
    with torch.no_grad():
        for parameter in teacher.network.streams[0].parameters():
            parameter.add_(1.0)
    assert torch.equal(teacher_forward_local(teacher, patches[0], 1), before)


def test_global_parameters_are_shared(teacher, patches):
    before = teacher_embed(teacher, patches)
    with torch.no_grad():
        teacher.network.global_head[-1].bias.add_(1.0)
    after = teacher_embed(teacher, patches)
    assert torch.allclose(after - before, torch.ones_like(before), atol=1e-5)


def test_teacher_routing_requires_labels(teacher, make_patch):
    with pytest.raises(RejectedInputError):
        teacher_embed(teacher, [make_patch("orphan", label_index=None, size=TOY_PATCH)])


def test_class_indices(patches):
    assert class_indices(patches).tolist() == [0, 1, 0, 1]


def test_student_output_sizes(make_patch):
    state = build_student(StudentConfig(embedding_dim=128, n_classes=6, patch_size=TOY_PATCH), seed=0)
    embedding, logits = student_forward(state, make_patch("x", size=TOY_PATCH))

    assert embedding.shape == (128,)
    assert logits.shape == (6,)


def test_student_inference_is_deterministic(student, patches):
    first = student_forward(student, patches[0])
    second = student_forward(student, patches[0])
    assert torch.equal(first[0], second[0])
    assert torch.equal(first[1], second[1])


def test_student_rejects_wrong_patch_size(student, make_patch):
    with pytest.raises(RejectedInputError):
        student_forward(student, make_patch("big", size=TOY_PATCH * 2))


def test_student_embedding_dim_is_validated():
    with pytest.raises(ValidationError):
        StudentConfig(embedding_dim=100, n_classes=6)


def test_penultimate_features_share_spatial_shape(student, patches):
    first = extract_penultimate_features(student, patches[0])
    second = extract_penultimate_features(student, patches[1])

    assert first.ndim == 3
    assert first.shape == second.shape
    assert first.shape[2] == BackboneSpec().widths[-1]


def test_penultimate_features_differ_between_models(student_config, patches):
    other = build_student(student_config, seed=1)
    state = build_student(student_config, seed=0)
    assert not torch.equal(
        extract_penultimate_features(state, patches[0]), extract_penultimate_features(other, patches[0])
    )


def test_full_depth_backbone(make_patch):
    config = StudentConfig(
        backbone_spec=BackboneSpec(arch="resnet18"), embedding_dim=32, n_classes=6, patch_size=TOY_PATCH
    )
    state = build_student(config, seed=0)
    embedding, logits = student_forward(state, make_patch("deep", size=TOY_PATCH))

    assert embedding.shape == (32,)
    assert extract_penultimate_features(state, make_patch("deep", size=TOY_PATCH)).shape[2] == 512


@pytest.mark.parametrize("kind", ["teacher", "student"])
def test_checkpoint_round_trip_is_bit_identical(tmp_path, kind, teacher, student, patches):
    state = teacher if kind == "teacher" else student
    state.training_meta.loss_curve = [(1, 0.5), (2, 0.25)]
    before = teacher_embed(state, patches) if kind == "teacher" else student_forward(state, patches[0])[0]

    save_checkpoint(state, tmp_path)
    loaded = load_checkpoint(tmp_path)
    after = teacher_embed(loaded, patches) if kind == "teacher" else student_forward(loaded, patches[0])[0]

    assert loaded.kind == kind
    assert loaded.config == state.config
    assert loaded.training_meta.loss_curve == [(1, 0.5), (2, 0.25)]
    assert torch.equal(before, after)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent")


def test_build_is_seeded(student_config):
    first = build_student(student_config, seed=3).parameters
    second = build_student(student_config, seed=3).parameters
    assert all(np.array_equal(first[name].numpy(), second[name].numpy()) for name in first)


def test_forward_maps_stay_finite_on_random_inputs(teacher, student, teacher_config):
    generator = torch.Generator().manual_seed(0)
    scales = torch.logspace(-3, 3, steps=1000, dtype=torch.float32)
    for start in range(0, 1000, 125):
        scale = scales[start : start + 125].reshape(-1, 1, 1, 1)
        x = torch.randn(125, 3, TOY_PATCH, TOY_PATCH, generator=generator) * scale
        routes = torch.randint(0, teacher_config.n_classes, (125,), generator=generator)
        with torch.no_grad():
            embedding, logits = student.network.eval()(x)
            local, global_embedding = teacher.network.eval()(x, routes)
        for output in (embedding, logits, local, global_embedding):
            assert torch.isfinite(output).all()
