import numpy as np
import pytest

from aadom.corpus import SynthConfig, generate_synthetic_corpus


def tone(freq, seconds=1.0, sr=16000, amp=0.5, phase=0.0):
    t = np.arange(int(round(seconds * sr))) / sr
    return amp * np.sin(2 * np.pi * freq * t + phase)


def small_synth(**kw):
    base = dict(duration_s=2.5, n_train=12, n_test_normal=3, n_test_anomaly=3,
                train_target_fraction=0.25)
    base.update(kw)
    return SynthConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A few short clips per section; enough to drive the pipeline end to end."""
    root = tmp_path_factory.mktemp("corpus")
    manifest = generate_synthetic_corpus(small_synth(), seed=3, root=root)
    return root, manifest


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
