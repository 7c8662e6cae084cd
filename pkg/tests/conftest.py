import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from vidcolor.config import RunConfig  # noqa: E402
from vidcolor.synthvid import DatasetConfig, generate_dataset  # noqa: E402

# small enough for a few hundred optimizer steps inside a unit test
TINY = RunConfig(
    frame_size=(16, 16),
    lum_channels=8,
    ae_widths=(8, 16, 16),
    text_dim=16,
    unet_widths=(16, 32),
    heads=2,
    cmpf_blocks=1,
    lr=1e-3,
    batch_size=4,
    ae_steps=30,
    ae_lr=3e-3,
    ae_batch_size=16,
    stage1_steps=20,
    stage2_steps=10,
    sampler_steps=5,
)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    yield


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    return generate_dataset(12, 0, 3, DatasetConfig(frame_size=(16, 16), seed=5), root / "data")


@pytest.fixture(scope="session")
def tiny_stage1(tiny_data, tmp_path_factory):
    from vidcolor.diffusion import train_stage1

    path = tmp_path_factory.mktemp("tiny_ckpt") / "s1.ckpt"
    trainer = train_stage1(tiny_data, TINY, path, checkpoint_every=0)
    return path, trainer


ACCEPTANCE_LINES: list[str] = []


def acceptance_report(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def benchmark():
    """Desk-scale trained models; trains on first use and is cached afterwards."""
    import os

    from vidcolor.experiment import prepare_benchmark

    root = Path(os.environ.get("LC4_ARTIFACTS", Path(__file__).resolve().parent.parent / ".artifacts"))
    return prepare_benchmark(root)


@pytest.fixture(scope="session")
def studies(benchmark):
    from vidcolor.experiment import run_studies

    return run_studies(benchmark)
