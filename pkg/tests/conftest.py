import pytest

from actnet import TrainConfig, generate_synthetic, load_dataset


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset") / "tiny"
    generate_synthetic(root, count=24, side=32, seed=7, labeled_fraction=0.25)
    return root


@pytest.fixture(scope="session")
def tiny_data(tiny_data_dir):
    return load_dataset(tiny_data_dir, expected_classes=4)


@pytest.fixture
def make_config():
    """Factory for small fast configs; override any field by keyword."""

    def factory(**overrides):
        base = dict(
            mode="MT",
            student_layers=2,
            student_width=4,
            teacher_layers=3,
            teacher_width=8,
            input_side=32,
            t_max=20,
            labeled_batch=3,
            unlabeled_batch=3,
            eval_every=0,
            seed=0,
        )
        base.update(overrides)
        return TrainConfig(**base)

    return factory
