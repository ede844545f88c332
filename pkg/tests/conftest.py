import pytest

from iic.datasets import SyntheticSpec, generate_dataset
from iic.encoder import EncoderConfig

# a few seconds of compute: 4 classes x 5 videos of 6 frames at 8x8
TINY_SPEC = SyntheticSpec(num_classes=4, videos_per_class=5, frames_per_video=6, H=8, W=8, seed=3)
TINY_ENCODER = EncoderConfig(stage_channels=(4, 8), blocks_per_stage=(0, 1), embedding_dim=8, input_shape=(4, 8, 8))


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "data"
    return generate_dataset(TINY_SPEC, root)


@pytest.fixture(scope="session")
def desk_data(tmp_path_factory):
    """The default synthetic dataset: 8 classes, 200 videos."""
    return generate_dataset(SyntheticSpec(), tmp_path_factory.mktemp("desk") / "data")


# one verdict line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
            terminalreporter.write_line(f"{key} {ACCEPTANCE[key]}")
