import numpy as np
import pytest

from multidistill.data import SyntheticDataset


def test_samples_are_pure_functions_of_seed_and_index():
    a, b = SyntheticDataset(3), SyntheticDataset(3)
    x1, y1 = a.sample(17)
    x2, y2 = b.sample(17)
    assert x1.tobytes() == x2.tobytes() and y1 == y2
    assert SyntheticDataset(4).sample(17)[0].tobytes() != x1.tobytes()


def test_batches_do_not_overlap():
    ds = SyntheticDataset(0, 16)
    a, _ = ds.batch(0, 4)
    b, _ = ds.batch(1, 4)
    np.testing.assert_array_equal(b[0], ds.sample(4)[0])
    assert not np.array_equal(a[-1], b[0])


def test_eval_split_differs_from_train():
    ds = SyntheticDataset(0, 16)
    xe, _ = ds.eval_set(3)
    assert not np.array_equal(xe[0], ds.sample(0)[0])


def test_shapes_labels_and_balance():
    ds = SyntheticDataset(0, 32, num_classes=4)
    x, y = ds.eval_set(400)
    assert x.shape == (400, 32, 32, 3) and x.dtype == np.float32
    counts = np.bincount(y, minlength=4)
    assert counts.min() > 60


def test_label_is_the_dominant_quadrant_texture():
    ds = SyntheticDataset(0, 16, noise=0.0)
    x, _ = ds.sample(0)
    energy = [np.abs(q).mean() for q in (x[:8, :8], x[:8, 8:], x[8:, :8], x[8:, 8:])]
    assert max(energy) == pytest.approx(np.max(np.abs(x)), rel=0.5)


def test_invalid_settings():
    with pytest.raises(ValueError):
        SyntheticDataset(num_classes=1)
    with pytest.raises(ValueError):
        SyntheticDataset(image_size=15)
