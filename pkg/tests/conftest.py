import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from srfusion.data import DegradationConfig, build_dataset  # noqa: E402
from srfusion.flow import ConditionalFlow, FlowConfig, FlowTrainConfig, train_flow  # noqa: E402
from srfusion.toy import write_toy_images  # noqa: E402

torch.set_num_threads(1)

SMALL_FLOW = dict(channels=3, scale=4, levels=2, steps=2, hidden=16,
                  encoder_channels=16, encoder_blocks=1)


def randomize_(module: torch.nn.Module, seed: int, std: float = 0.05):
    """Perturb every parameter so zero-initialised layers become non-trivial."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(std * torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype))
    return module


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    write_toy_images(root / "img", 16, seed=5, size=64)
    return build_dataset(root / "img", DegradationConfig(rng_seed=1), root / "ds", count=4)


@pytest.fixture(scope="session")
def trained_small_flow(toy_manifest):
    cfg = FlowTrainConfig(iterations=200, encoder_iterations=100, batch_size=16, seed=0)
    flow, log = train_flow(toy_manifest, cfg, FlowConfig(**SMALL_FLOW))
    return flow, log


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"CRITERION {number:2d} {'PASS' if passed else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"CRITERION {n:2d} {'PASS' if ok else 'FAIL'}: {detail}")
