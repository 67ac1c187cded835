import numpy as np
import pytest
import torch

from stutterdet.audio import Waveform, save_wav
from stutterdet.synth import SynthSpec, generate

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """Balanced synthetic corpus, 8 clips per class over 4 podcasts."""
    out = tmp_path_factory.mktemp("toy")
    return generate(SynthSpec(n_per_class=8, n_podcasts=4, seed=11, clip_s=1.0), out)


@pytest.fixture
def tiny_cfg():
    from stutterdet.train import TrainConfig

    return TrainConfig(
        variant="mb", batch_size=8, max_epochs=2, patience=7, seed=3,
        dims=(8, 8, 8, 8, 12), bilstm_hidden=4, bilstm_layers=1, fc_hidden=8, dropout=0.0,
    )


def write_tone(path, freq=440.0, seconds=1.0, rate=16000, amp=0.5, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(int(seconds * rate)) / rate
    y = amp * np.sin(2 * np.pi * freq * t) + 0.01 * rng.standard_normal(t.size)
    save_wav(path, Waveform(y, rate))
    return path


ACCEPTANCE = {}
N_CRITERIA = 12


@pytest.fixture
def criterion():
    """Record one acceptance verdict, print it, and fail the test when it does not hold."""

    def record(number, title, passed, detail=""):
        ACCEPTANCE[number] = (title, bool(passed), detail)
        print(f"\n{'PASS' if passed else 'FAIL'} [{number:2d}] {title}: {detail}")
        assert passed, f"criterion {number} ({title}) failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, N_CRITERIA + 1):
        if number in ACCEPTANCE:
            title, passed, detail = ACCEPTANCE[number]
            terminalreporter.write_line(
                f"{'PASS' if passed else 'FAIL'} [{number:2d}] {title}: {detail}")
        else:
            terminalreporter.write_line(f"---- [{number:2d}] not run or errored before a verdict")
