import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from speechmotion.dsp import melspectrogram, sliding_crops
from speechmotion.errors import BadConfig, BadManifest, InvalidSeverity, IoError
from speechmotion.metrics import corr2d
from speechmotion.oracle import fit_ridge
from speechmotion.synthdata import (BASE_COUPLING, BLOB_DIRECTIONS, HEALTHY, PATIENT, GestureLatent, Manifest,
                                    SynthConfig, blob_centers, cohort_ids, draw_latent, formant_tracks,
                                    load_subject, make_dataset, render_audio, render_motion, sample_subject)
from speechmotion.translator import prepare_examples


def test_zero_amplitude_motion_is_noise_only():
    # amplitudes below the latent range are only reachable by bypassing validation
    g = GestureLatent((0.2, 0.2), 0, (1.0, 1.0), 0.0)
    object.__setattr__(g, "amplitudes", (0.0, 0.0))
    m = render_motion(g, SynthConfig(), noise_seed=1)
    assert abs(m.frames.std() / 0.02 - 1) < 0.2


def test_blob_center_displacement_matches_formula():
    cfg = SynthConfig(motion_noise=0.0)
    g = GestureLatent((0.7, 0.4), 1, (1.0, 1.0), 0.0)
    m = render_motion(g, cfg)
    # sin(2*pi*t/8) peaks at t = 2
    for j, c in enumerate(blob_centers(g, cfg.grid)):
        ci = tuple(int(round(v)) for v in c)
        d2 = sum((ci[k] - c[k]) ** 2 for k in range(3))
        expect = g.amplitudes[j] * math.exp(-d2 / (2 * cfg.blob_sigma ** 2))
        other = blob_centers(g, cfg.grid)[1 - j]
        d2o = sum((ci[k] - other[k]) ** 2 for k in range(3))
        expect_vec = expect * BLOB_DIRECTIONS[j] + g.amplitudes[1 - j] * math.exp(
            -d2o / (2 * cfg.blob_sigma ** 2)) * BLOB_DIRECTIONS[1 - j]
        np.testing.assert_allclose(m.frames[2][ci], expect_vec, rtol=1e-5, atol=1e-6)


def test_paper_scale_motion_config_is_accepted():
    cfg = SynthConfig(frames=26, grid=(128, 128, 128))
    cfg.validate()
    # full 26 x 128^3 x 3 float32 render needs 650 MB; check the shape contract at a reduced grid
    m = render_motion(draw_latent(np.random.default_rng(0)), SynthConfig(frames=26, grid=(32, 32, 32)))
    assert m.frames.shape == (26, 32, 32, 32, 3)


def _spectrum_peaks(w, sr):
    spec = np.abs(np.fft.rfft(w.samples * np.hanning(w.samples.size)))
    freqs = np.fft.rfftfreq(w.samples.size, 1 / sr)
    return spec, freqs


def test_zero_coupling_gives_constant_formants():
    g = draw_latent(np.random.default_rng(5))
    f1, f2 = formant_tracks(g, np.zeros((2, 2)), SynthConfig())
    assert np.all(f1 == 300.0) and np.all(f2 == 900.0)


def test_stationary_formants_show_as_spectral_peaks():
    cfg = SynthConfig(audio_noise=0.0)
    g = GestureLatent((0.5, 0.5), 0, (1.0, 1.0), 0.0)
    w = render_audio(g, np.zeros((2, 2)), cfg)
    spec, freqs = _spectrum_peaks(w, cfg.sample_rate)
    # harmonics sit at multiples of f0; the strongest near each formant
    def peak_in(lo, hi):
        band = (freqs >= lo) & (freqs <= hi)
        return freqs[band][np.argmax(spec[band])]
    assert abs(peak_in(200, 600) - 300) <= 100
    assert abs(peak_in(700, 1200) - 900) <= 100


def test_audio_length_and_unstable_resonator():
    w = sample_subject(0, HEALTHY, SynthConfig(), "H000").audio
    assert len(w) == 24_000 and 21_832 <= len(w) <= 24_175
    with pytest.raises(BadConfig):
        render_audio(draw_latent(np.random.default_rng(0)), BASE_COUPLING, SynthConfig(bandwidths=(0.0, 100.0)))


def test_same_seed_and_id_are_bit_identical():
    a = sample_subject(3, PATIENT, SynthConfig(), "P001")
    b = sample_subject(3, PATIENT, SynthConfig(), "P001")
    assert a.motion.frames.tobytes() == b.motion.frames.tobytes()
    assert a.audio.samples.tobytes() == b.audio.samples.tobytes()
    assert a.latent == b.latent


def test_patient_with_zero_severity_rejected():
    with pytest.raises(InvalidSeverity):
        sample_subject(0, PATIENT, SynthConfig(severity=0.0), "P000")


def test_patient_twin_shares_motion_but_not_audio():
    h = sample_subject(0, HEALTHY, SynthConfig(), "X")
    p = sample_subject(0, PATIENT, SynthConfig(), "X")
    assert np.array_equal(h.motion.frames, p.motion.frames)
    assert np.linalg.norm(h.audio.samples - p.audio.samples) > 0
    assert p.anomaly_severity == 0.5 and h.anomaly_severity == 0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_latents_stay_in_range(seed):
    g = draw_latent(np.random.default_rng(seed))
    assert all(0.2 <= a <= 1.0 for a in g.amplitudes)
    assert all(0.5 <= f <= 2.0 for f in g.frequencies)
    assert 0 <= g.phase < 2 * math.pi


def test_motion_marginals_match_between_cohorts():
    cfg = SynthConfig()
    mags = {}
    for label, prefix in ((HEALTHY, "H"), (PATIENT, "P")):
        vals = [np.linalg.norm(sample_subject(0, label, cfg, f"{prefix}{i:03d}").motion.frames, axis=-1)
                for i in range(40)]
        mags[label] = np.concatenate([v.ravel() for v in vals])
    h, p = mags[HEALTHY], mags[PATIENT]
    assert abs(p.mean() / h.mean() - 1) < 0.10
    assert abs(p.std() / h.std() - 1) < 0.10


# -- dataset files ----------------------------------------------------------

@pytest.fixture(scope="module")
def default_manifest(tmp_path_factory):
    return make_dataset(SynthConfig(), tmp_path_factory.mktemp("ds"))


def test_default_dataset_counts(default_manifest):
    assert len(default_manifest.entries) == 15
    assert len(default_manifest.healthy) == 12 and len(default_manifest.patients) == 3


def test_manifest_round_trip_and_files(default_manifest, tmp_path):
    path = default_manifest.root / "manifest.json"
    m = Manifest.load(path)
    assert [e.subject_id for e in m.entries] == [e.subject_id for e in default_manifest.entries]
    motion, audio = load_subject(m, m.entries[0])
    rec = sample_subject(0, HEALTHY, SynthConfig(), m.entries[0].subject_id, m.entries[0].phrase)
    assert np.array_equal(motion.frames, rec.motion.frames)
    # 16-bit WAV quantization
    assert np.max(np.abs(audio.samples - rec.audio.samples)) <= 1 / 32767


def test_dataset_is_bit_reproducible(default_manifest, tmp_path):
    again = make_dataset(SynthConfig(), tmp_path)
    for a, b in zip(default_manifest.entries, again.entries):
        for rel_a, rel_b in ((a.motion, b.motion), (a.audio, b.audio)):
            assert default_manifest.resolve(rel_a).read_bytes() == again.resolve(rel_b).read_bytes()


def test_paper_cohort_ids_and_healthy_only():
    ids = cohort_ids(SynthConfig(n_healthy=36, n_patients=3))
    assert sum(l == HEALTHY for _, l in ids) == 36 and sum(l == PATIENT for _, l in ids) == 3
    assert all(l == HEALTHY for _, l in cohort_ids(SynthConfig(n_patients=0)))


def test_healthy_only_dataset(tmp_path):
    m = make_dataset(SynthConfig(n_healthy=2, n_patients=0), tmp_path)
    assert len(m.entries) == 2 and not m.patients


def test_manifest_errors(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps([{"subject_id": "A", "label": HEALTHY, "motion": "x.mfld",
                                                   "audio": "x.wav", "phrase": "a geese"}]))
    with pytest.raises(IoError):
        Manifest.load(tmp_path / "m.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(BadManifest):
        Manifest.load(tmp_path / "bad.json")
    with pytest.raises(BadManifest):
        Manifest([type("E", (), {"subject_id": "A", "label": "x"})()])


def test_unwritable_output_raises_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(IoError):
        make_dataset(SynthConfig(n_healthy=1, n_patients=0), blocker / "sub")


# -- learnability and separation guards -------------------------------------

def test_ridge_oracle_learnability_and_separation(default_manifest):
    examples = prepare_examples(default_manifest, crops=10)
    healthy = [ex for ex in examples if ex.label == HEALTHY]
    patients = [ex for ex in examples if ex.label == PATIENT]
    h_scores, p_scores = [], []
    for i, held in enumerate(healthy):
        oracle = fit_ridge([ex for j, ex in enumerate(healthy) if j != i])
        h_scores.append(np.mean([corr2d(oracle.predict(held.motion), t) for t in held.targets]))
        p_scores.extend(np.mean([corr2d(oracle.predict(p.motion), t) for t in p.targets]) for p in patients)
    assert np.mean(h_scores) >= 0.5
    assert np.mean(h_scores) - np.mean(p_scores) > 0
