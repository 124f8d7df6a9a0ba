import numpy as np
import pytest

from scoreerr.midi_core import NoteEvent, NoteTrack
from scoreerr.synth import (
    DEFAULT_SR,
    NOTE_GAIN,
    PROFILES,
    AudioBuffer,
    InstrumentProfile,
    buffer_length,
    get_profile,
    midi_to_hz,
    mix,
    read_wav,
    render,
    write_wav,
)


def test_profile_validation():
    with pytest.raises(ValueError):
        InstrumentProfile("bad", ())
    with pytest.raises(ValueError):
        InstrumentProfile("bad", (1.0,), sustain_level=1.5)
    assert get_profile("unknown-thing") is PROFILES["piano"]
    assert get_profile("Flute") is PROFILES["flute"]


def test_a4_is_440():
    assert midi_to_hz(69) == 440.0
    assert midi_to_hz(81) == pytest.approx(880.0)


def test_buffer_length_formula():
    t = NoteTrack((NoteEvent(60, 0.0, 1.0), NoteEvent(64, 0.5, 1.25)))
    p = get_profile("piano")
    assert buffer_length(t, p, DEFAULT_SR) == int(np.ceil((1.25 + p.release) * DEFAULT_SR))
    assert len(render(t, p)) == buffer_length(t, p, DEFAULT_SR)


def test_sine_tone_frequency_and_level():
    p = PROFILES["sine"]
    audio = render(NoteTrack((NoteEvent(69, 0.0, 1.0, velocity=127),)), p)
    x = audio.samples[1000:15000]
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x))))
    freq = np.fft.rfftfreq(len(x), 1 / DEFAULT_SR)[spec.argmax()]
    assert abs(freq - 440.0) < 2.0
    assert np.abs(x).max() == pytest.approx(NOTE_GAIN, rel=1e-3)


def test_silence_before_onset_and_after_release():
    p = PROFILES["sine"]
    audio = render(NoteTrack((NoteEvent(60, 0.5, 0.7),)), p)
    start = int(0.5 * DEFAULT_SR)
    assert not audio.samples[:start].any()
    assert np.abs(audio.samples[-5:]).max() < 1e-2


def test_mix_is_linear():
    p = PROFILES["violin"]
    a = NoteTrack((NoteEvent(60, 0.0, 0.5),))
    b = NoteTrack((NoteEvent(67, 0.0, 0.5),))
    both = NoteTrack(a.notes + b.notes)
    np.testing.assert_allclose(mix(both, p), mix(a, p) + mix(b, p), atol=1e-12)


def test_peak_normalisation_only_when_clipping():
    p = PROFILES["sine"]
    loud = NoteTrack(tuple(NoteEvent(60, 0.0, 0.5, velocity=127) for _ in range(1)) +
                     tuple(NoteEvent(60 + k, 0.0, 0.5, velocity=127) for k in range(1, 8)))
    out = render(loud, p)
    assert np.abs(out.samples).max() <= 0.9 + 1e-9
    quiet = render(NoteTrack((NoteEvent(60, 0.0, 0.5, velocity=40),)), p)
    np.testing.assert_array_equal(quiet.samples, mix(NoteTrack((NoteEvent(60, 0.0, 0.5, velocity=40),)), p))


def test_render_is_deterministic():
    t = NoteTrack((NoteEvent(60, 0.1, 0.6), NoteEvent(72, 0.3, 0.9)))
    np.testing.assert_array_equal(render(t).samples, render(t).samples)


def test_wav_roundtrip(tmp_path):
    x = np.sin(np.linspace(0, 50, 4000)) * 0.5
    write_wav(AudioBuffer(x), tmp_path / "a.wav")
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == DEFAULT_SR
    np.testing.assert_allclose(back.samples, x, atol=1 / 32767)
