import numpy as np
import pytest

from multidistill import numerics as nx
from multidistill.config import TeacherSpec, TrainConfig
from multidistill.vit import EncoderConfig


def tiny_config(**overrides) -> TrainConfig:
    """A few-thousand-parameter setup that trains in well under a second per step."""
    enc = dict(image_size=16, channels=3)
    student = EncoderConfig(patch_size=8, depth=1, embed_dim=16, num_heads=2, ffn_hidden_dim=32, has_cls_token=True, **enc)
    teachers = (
        TeacherSpec("clip", student, True),
        TeacherSpec("eva", EncoderConfig(patch_size=16, depth=1, embed_dim=12, num_heads=2, ffn_hidden_dim=24, has_cls_token=False, **enc)),
        TeacherSpec("convnext", EncoderConfig(patch_size=4, depth=1, embed_dim=8, num_heads=2, ffn_hidden_dim=16, has_cls_token=False, **enc)),
    )
    base = dict(
        image_size=16,
        student=student,
        teachers=teachers,
        mole_rank=4,
        batch_size=4,
        steps=3,
        eval_size=16,
        learning_rate=1e-3,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config


@pytest.fixture
def f64():
    with nx.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, name, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:>2}  {'PASS' if ok else 'FAIL'}  {name}: {detail}")
