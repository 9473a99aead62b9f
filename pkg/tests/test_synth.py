import numpy as np

from syncguard.audio_io import load_audio
from syncguard.synth import synth_speech, write_corpus


def test_synthetic_speech_level_and_determinism():
    a = synth_speech(2.0, np.random.default_rng(3))
    b = synth_speech(2.0, np.random.default_rng(3))
    assert np.array_equal(a, b)
    assert a.shape == (44100,) and a.dtype == np.float32
    assert np.abs(a).max() <= 0.95
    assert 0.03 < np.sqrt(np.mean(a.astype(np.float64) ** 2)) < 0.13


def test_corpus_layout(tmp_path):
    root = write_corpus(tmp_path, 2, 1, seconds=1.0, seed=0)
    train = sorted((root / "train").glob("*.wav"))
    assert len(train) == 2 and len(list((root / "test").glob("*.wav"))) == 1
    assert len(load_audio(train[0])) == 22050
