import pytest

from ubsegnet.detector import DetectorConfig, init_model
from ubsegnet.synthdata import GenConfig, generate
from ubsegnet.trainer import TrainConfig, train

# desk-width network; the full schedule on 20 images takes about six minutes
OVERFIT_DETECTOR = DetectorConfig(rpn_channels=128, head_channels=(64, 64, 128), head_pool_grid=3)
# fixed batches and frozen statistics in d/e keep the per-epoch loss smooth
# enough for the moving-average check
OVERFIT_TRAIN = TrainConfig(
    epochs=(30, 30, 2, 12),
    learning_rates=(0.1, 0.02, 0.01, 0.01),
    images_per_step=4,
    roi_batch_size=64,
    frozen_bn_phases=("d", "e"),
    shuffle=False,
)


@pytest.fixture(scope="session")
def overfit():
    """(model, report, dataset) after the full schedule on a 20-image set."""
    dataset = generate(GenConfig(count=4, seed=21))
    model, report = train(init_model(OVERFIT_DETECTOR, seed=0), dataset, OVERFIT_TRAIN)
    return model, report, dataset


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, text: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {text}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
