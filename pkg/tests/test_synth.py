import numpy as np
import pytest
from sklearn.tree import DecisionTreeClassifier

from stutterdet.audio import load_audio
from stutterdet.data import Label, parse_manifest
from stutterdet.synth import SynthSpec, generate, synth_clip


def stump_features(y, rate=16000):
    """Leading-silence length and longest steady-pitch run, both in seconds."""
    win, hop = 512, 160
    n = 1 + (len(y) - win) // hop
    frames = np.stack([y[i * hop:i * hop + win] for i in range(n)])
    voiced = np.sqrt((frames**2).mean(axis=1)) > 0.02
    lead = np.argmax(voiced) * hop / rate if voiced.any() else len(y) / rate
    peak = np.abs(np.fft.rfft(frames * np.hanning(win), axis=1)).argmax(axis=1)
    best = run = 0
    for i in range(1, n):
        steady = voiced[i] and voiced[i - 1] and abs(int(peak[i]) - int(peak[i - 1])) <= 1
        run = run + 1 if steady else 0
        best = max(best, run)
    return lead, best * hop / rate


def stump_data(seed, per_class=40):
    X, y = [], []
    group = {Label.Block: 0, Label.Prolongation: 1}
    for label in Label:
        for i in range(per_class):
            clip = synth_clip(label, np.random.default_rng([seed, int(label), i]))
            X.append(stump_features(clip))
            y.append(group.get(label, 2))
    return np.array(X), np.array(y)


def test_counts_and_manifest(tmp_path):
    m = generate(SynthSpec(n_per_class=6, n_podcasts=3, seed=0, clip_s=1.0), tmp_path)
    assert len(m) == 30
    assert m.label_counts() == {label: 6 for label in Label}
    assert sorted(m.podcasts) == ["pod00", "pod01", "pod02"]
    assert parse_manifest(tmp_path / "manifest.csv") == m


def test_imbalance(tmp_path):
    spec = SynthSpec(n_per_class=40, class_imbalance={"Fluent": 4})
    assert spec.count(Label.Fluent) == 160 and spec.count(Label.Block) == 40
    m = generate(SynthSpec(n_per_class=3, class_imbalance={"Fluent": 4}, clip_s=0.5), tmp_path)
    assert m.label_counts()[Label.Fluent] == 12


def test_output_is_byte_identical(tmp_path):
    spec = SynthSpec(n_per_class=3, n_podcasts=2, seed=5, clip_s=1.0)
    a = generate(spec, tmp_path / "a")
    b = generate(spec, tmp_path / "b")
    for ra, rb in zip(a, b):
        assert (tmp_path / "a" / "audio" / ra.audio_path.split("/")[-1]).read_bytes() == \
            (tmp_path / "b" / "audio" / rb.audio_path.split("/")[-1]).read_bytes()
    assert (tmp_path / "a" / "manifest.csv").read_text().replace("/a/", "/b/") == \
        (tmp_path / "b" / "manifest.csv").read_text()


@pytest.mark.parametrize("clip_s", [1.0, 3.0])
def test_exact_duration(tmp_path, clip_s):
    m = generate(SynthSpec(n_per_class=1, clip_s=clip_s), tmp_path)
    for rec in m:
        wave = load_audio(rec.audio_path)
        assert len(wave) == int(clip_s * 16000) and np.abs(wave.samples).max() <= 1.0


def test_invalid_spec():
    with pytest.raises(ValueError):
        SynthSpec(n_per_class=0)
    with pytest.raises(ValueError):
        SynthSpec(ambiguity=1.0)
    with pytest.raises(KeyError):
        SynthSpec(class_imbalance={"Stammer": 2})


def test_signatures_separable_by_a_stump():
    X, y = stump_data(seed=0)
    Xt, yt = stump_data(seed=1)
    tree = DecisionTreeClassifier(max_depth=2, random_state=0).fit(X, y)
    assert tree.score(X, y) >= 0.90
    assert tree.score(Xt, yt) >= 0.90
