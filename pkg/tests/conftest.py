import numpy as np
import pytest

from cfmia import data, nn


def numeric_dataset(rows, labels, ids=None, num_classes=None) -> data.Dataset:
    rows = np.asarray(rows, dtype=float)
    schema = [data.FeatureMeta(f"x{j}", "numeric", float(rows[:, j].min()), float(rows[:, j].max()))
              for j in range(rows.shape[1])]
    ids = np.arange(len(rows)) if ids is None else ids
    return data.Dataset(schema, rows, labels, ids, num_classes=num_classes)


def blobs(n=200, seed=0, sep=3.0, d=2) -> data.Dataset:
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    X = rng.normal(0, 1, (n, d)) + sep * (2 * y[:, None] - 1) / 2
    return numeric_dataset(X, y, num_classes=2)


@pytest.fixture(scope="session")
def surrogate_splits():
    clean, _ = data.preprocess(data.make_surrogate(n=600, seed=3))
    return data.split_45_45_10(clean, 0)


@pytest.fixture(scope="session")
def small_model(surrogate_splits):
    cfg = nn.MlpConfig(input_dim=14, layer_widths=(16, 8), epochs=10, seed=0)
    model, _ = nn.train(cfg, surrogate_splits.target_train, surrogate_splits.validation)
    return model
