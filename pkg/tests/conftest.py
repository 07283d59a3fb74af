import numpy as np
import pytest

from sslsv.audio_io import Waveform


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def noise_wave(rng):
    def make(seconds=1.0, scale=0.3):
        return Waveform(np.clip(rng.normal(scale=scale, size=int(seconds * 16000)), -1, 1))
    return make


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    from sslsv.synth import make_corpus

    return make_corpus(
        tmp_path_factory.mktemp("corpus"), speakers=3, utts_per_speaker=4, test_utts_per_speaker=2,
        n_trials=12, seed=11, min_seconds=4.2, max_seconds=4.6, n_noise=2, n_rirs=2,
    )


@pytest.fixture
def small_config(small_corpus):
    from sslsv.trainer import TrainConfig, apply_overrides

    return apply_overrides(TrainConfig(), {
        "batch_size": "4", "epochs": "3", "n_crops": "2",
        "model.hidden": "16", "model.rep_dim": "8", "model.proj_dim": "16",
        "augment.noise_dir": str(small_corpus.noise_dir), "augment.rir_dir": str(small_corpus.rir_dir),
    })


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
