import pytest

from sdnet.data import mix_at_snr, synth_noise, synth_speech
from sdnet.dsp import Waveform


@pytest.fixture(scope="session")
def stoi_fixture():
    """Twenty 2 s (processed, clean) pairs spanning -5 to 20 dB."""
    pairs = []
    for i, snr_db in enumerate([-5 + 25 * k / 19 for k in range(20)]):
        mix = mix_at_snr(synth_speech(200 + i, 2.0), synth_noise(300 + i, 2.0), snr_db)
        pairs.append((mix.wave, Waveform(mix.clean, 16000)))
    return pairs


# one line per acceptance criterion, printed at the end of the run whatever the outcome
_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record the pass/fail line of an acceptance criterion, then assert it."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        _VERDICTS[number] = f"criterion {number} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        print(_VERDICTS[number])
        assert passed, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[number])
