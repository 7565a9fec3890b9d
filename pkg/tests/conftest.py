import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import CRITERIA  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for line in CRITERIA:
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    from tfanet.datakit import SynthSpec, load_dataset, synth_dataset

    root = synth_dataset(SynthSpec(n_train=12, n_test_normal=4, n_test_defect=4, seed=3),
                         tmp_path_factory.mktemp("tiny"))
    return load_dataset(root)


@pytest.fixture(scope="session")
def tiny_settings():
    from tfanet.config import apply_overrides, preset

    return apply_overrides(preset("desk"), {"train.epochs": "2", "train.batch_size": "4"})


class BenchModels:
    """Trains desk models on the frozen benchmark once per session and caches reports."""

    def __init__(self, root):
        from tfanet.datakit import load_dataset

        self.root = root
        self.dataset = load_dataset(root)
        self.cache = {}

    def get(self, variant="c", seed=0, template=0):
        from tfanet.config import apply_overrides, preset
        from tfanet.evaluation import run_benchmark
        from tfanet.trainer import fit

        key = (variant, seed, template)
        if key not in self.cache:
            st = apply_overrides(preset("desk"), {"train.variant": variant, "train.seed": str(seed),
                                                  "train.template_index": str(template)})
            t0 = time.perf_counter()
            ck = fit(st, self.dataset)
            seconds = time.perf_counter() - t0
            reports = run_benchmark(ck, self.dataset, ("dual", "euc", "cos"))
            self.cache[key] = (ck, reports, seconds)
        return self.cache[key]


@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    from tfanet.datakit import SynthSpec, synth_dataset

    return BenchModels(synth_dataset(SynthSpec(seed=7), tmp_path_factory.mktemp("bench")))
