import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from lpci.panel import PanelDataset  # noqa: E402

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def make_panel(G=6, T=12, seed=0, exog=0, prefix="g"):
    rng = np.random.default_rng(seed)
    y = np.cumsum(rng.standard_normal((G, T)), axis=1) + rng.normal(0, 3, (G, 1))
    ex = rng.standard_normal((G, T, exog)) if exog else None
    return PanelDataset(
        groups=tuple(f"{prefix}{i:02d}" for i in range(G)), times=np.arange(1, T + 1), y=y, exog=ex
    )


@pytest.fixture
def panel():
    return make_panel()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
