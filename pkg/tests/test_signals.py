import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msssidec.config import TrainingConfig
from msssidec.signals import (
    CWRU_CONDITIONS,
    RawRecord,
    SpectrumSample,
    build_task,
    fft_preprocess,
    import_corpus,
    read_record,
    segment,
    synth_corpus,
    write_record,
)


def naive_spectrum(x):
    """Direct O(N^2) DFT magnitude, first 512 bins, max-normalised."""
    n = np.arange(len(x))
    mags = np.array([abs(np.sum(x * np.exp(-2j * np.pi * k * n / len(x)))) for k in range(512)])
    return mags / mags.max() if mags.max() > 0 else mags


@pytest.mark.parametrize("length,stride,expected", [(1024, 512, 1), (2048, 512, 3), (3000, 1024, 2)])
def test_segment_counts(length, stride, expected):
    frames = segment(np.arange(length, dtype=float), 1024, stride)
    assert frames.shape == (expected, 1024)
    assert frames[-1][0] == (expected - 1) * stride


def test_segment_too_short():
    with pytest.raises(ValueError):
        segment(np.zeros(1023), 1024, 512)


@given(st.integers(1024, 5000), st.integers(1, 1500))
@settings(max_examples=50, deadline=None)
def test_segment_count_formula(length, stride):
    frames = segment(np.arange(length, dtype=float), 1024, stride)
    assert len(frames) == (length - 1024) // stride + 1
    np.testing.assert_array_equal(frames[:, 0], np.arange(len(frames)) * stride)


def test_fft_zero_window():
    np.testing.assert_array_equal(fft_preprocess(np.zeros(1024)), np.zeros(512))


def test_fft_bin_aligned_cosine():
    spec = fft_preprocess(np.cos(2 * np.pi * 10 * np.arange(1024) / 1024))
    assert spec.argmax() == 10
    assert spec[10] == pytest.approx(1.0)
    assert np.delete(spec, 10).max() < 1e-9


def test_fft_constant():
    spec = fft_preprocess(np.ones(1024))
    assert spec[0] == pytest.approx(1.0)
    assert np.abs(spec[1:]).max() < 1e-9


def test_fft_matches_naive_dft():
    rng = np.random.default_rng(0)
    for _ in range(3):
        x = rng.standard_normal(1024)
        np.testing.assert_allclose(fft_preprocess(x), naive_spectrum(x), atol=1e-9)


def test_fft_batch_and_errors():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((4, 1024))
    out = fft_preprocess(X)
    assert out.shape == (4, 512)
    np.testing.assert_allclose(out.max(1), 1.0)
    with pytest.raises(ValueError):
        fft_preprocess(np.zeros(1000))
    with pytest.raises(ValueError):
        fft_preprocess(np.full(1024, np.nan))


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 1e4))
@settings(max_examples=30, deadline=None)
def test_fft_range_and_scale_invariance(seed, scale):
    x = np.random.default_rng(seed).standard_normal(1024)
    a, b = fft_preprocess(x), fft_preprocess(scale * x)
    assert a.min() >= 0 and a.max() == pytest.approx(1.0)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_spectrum_sample_validation():
    SpectrumSample(np.zeros(512), 0, "0hp")
    with pytest.raises(ValueError):
        SpectrumSample(np.zeros(511), 0, "0hp")
    with pytest.raises(ValueError):
        SpectrumSample(-np.ones(512), 0, "0hp")


def test_synth_corpus_deterministic_and_validated():
    a, b = synth_corpus(3, seed=4, duration_s=0.5), synth_corpus(3, seed=4, duration_s=0.5)
    assert len(a) == 3 * len(CWRU_CONDITIONS)
    for ra, rb in zip(a, b):
        assert ra.class_label == rb.class_label and ra.condition_tag == rb.condition_tag
        np.testing.assert_array_equal(ra.samples, rb.samples)
    with pytest.raises(ValueError):
        synth_corpus(1, seed=0)


def test_synth_two_classes_have_disjoint_dominant_bins():
    corpus = synth_corpus(2, seed=0, conditions=("0hp",), duration_s=2.0)
    peaks = []
    for rec in corpus:
        mean_spec = fft_preprocess(segment(rec, 1024, 512)).mean(0)
        peaks.append(set(np.argsort(mean_spec)[-3:]))
    assert not peaks[0] & peaks[1]


def test_record_roundtrip_and_errors(tmp_path):
    x = np.random.default_rng(0).standard_normal(3000).astype(np.float32)
    write_record(tmp_path / "a.vib", x, 12000)
    y, rate = read_record(tmp_path / "a.vib")
    np.testing.assert_array_equal(y, x.astype(np.float64))
    assert rate == 12000
    raw = (tmp_path / "a.vib").read_bytes()
    (tmp_path / "bad.vib").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        read_record(tmp_path / "bad.vib")
    (tmp_path / "short.vib").write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="expected"):
        read_record(tmp_path / "short.vib")


def _write_corpus(tmp_path, n_classes, conditions):
    rows = ["file,label,condition"]
    for c in range(n_classes):
        for cond in conditions:
            name = f"c{c}_{cond}.vib"
            write_record(tmp_path / name, np.zeros(2048), 12000)
            rows.append(f"{name},{c},{cond}")
    (tmp_path / "manifest.csv").write_text("\n".join(rows) + "\n")
    return tmp_path / "manifest.csv"


def test_import_cwru_layout(tmp_path):
    manifest = _write_corpus(tmp_path, 10, CWRU_CONDITIONS)
    records = import_corpus(tmp_path, manifest, n_classes=10)
    assert len(records) == 40
    assert {r.condition_tag for r in records} == set(CWRU_CONDITIONS)


def test_import_mfpt_layout(tmp_path):
    manifest = _write_corpus(tmp_path, 3, ("mfpt",))
    assert sorted(r.class_label for r in import_corpus(tmp_path, manifest)) == [0, 1, 2]


def test_import_errors(tmp_path):
    manifest = _write_corpus(tmp_path, 3, ("0hp",))
    with pytest.raises(ValueError, match="unknown class"):
        import_corpus(tmp_path, manifest, n_classes=2)
    (tmp_path / "c0_0hp.vib").unlink()
    with pytest.raises(FileNotFoundError):
        import_corpus(tmp_path, manifest)


@pytest.fixture(scope="module")
def corpus10():
    return synth_corpus(10, seed=0, duration_s=2.0)


def test_build_task_c1_counts(corpus10):
    cfg = TrainingConfig(n_cluster=10, n_sp=1, n_un=30, n_test=30)
    split = build_task("C1", corpus10, cfg, seed=0)
    assert (len(split.supervised), len(split.unsupervised), len(split.test)) == (10, 300, 300)
    for s in (split.supervised, split.unsupervised, split.test):
        assert set(s.conditions) == {"0hp"}
        np.testing.assert_array_equal(s.class_counts(10), len(s) // 10)


def test_build_task_c1_default_counts():
    corpus = synth_corpus(10, seed=0, conditions=("0hp",), duration_s=12.0)
    cfg = TrainingConfig(n_cluster=10, n_sp=1, n_un=300, n_test=300)
    split = build_task("C1", corpus, cfg, seed=0)
    assert (len(split.supervised), len(split.unsupervised), len(split.test)) == (10, 3000, 3000)


def test_build_task_c3_conditions(corpus10):
    cfg = TrainingConfig(n_cluster=10, n_sp=1, n_un=9, n_test=9)
    split = build_task("C3", corpus10, cfg, seed=0)
    assert set(split.supervised.conditions) == {"0hp"}
    assert set(split.unsupervised.conditions) == {"1hp", "2hp", "3hp"}
    assert set(split.test.conditions) == {"1hp", "2hp", "3hp"}


def test_build_task_missing_coverage(corpus10):
    corpus = [r for r in corpus10 if not (r.class_label == 9 and r.condition_tag == "0hp")]
    with pytest.raises(ValueError, match="class 9"):
        build_task("C1", corpus, TrainingConfig(n_cluster=10, n_un=5, n_test=5), seed=0)


def test_build_task_windows_disjoint(corpus10):
    cfg = TrainingConfig(n_cluster=10, n_sp=2, n_un=20, n_test=20)
    split = build_task("C1", corpus10, cfg, seed=3)
    src = np.concatenate([split.supervised.sources, split.unsupervised.sources, split.test.sources])
    assert len({tuple(s) for s in src}) == len(src)


def test_build_task_deterministic(corpus10):
    cfg = TrainingConfig(n_cluster=10, n_un=10, n_test=10)
    a, b = build_task("C2", corpus10, cfg, seed=5), build_task("C2", corpus10, cfg, seed=5)
    np.testing.assert_array_equal(a.test.spectra, b.test.spectra)
    c = build_task("C2", corpus10, cfg, seed=6)
    assert not np.array_equal(a.test.sources, c.test.sources)


def test_build_task_c5_stratified(corpus10):
    cfg = TrainingConfig(n_cluster=10, n_train_total=200, label_fraction=0.1, n_test=5)
    split = build_task("C5", corpus10, cfg, seed=0)
    np.testing.assert_array_equal(split.supervised.class_counts(10), 2)
    np.testing.assert_array_equal(split.unsupervised.class_counts(10), 18)
    assert set(split.test.conditions) == {"2hp"}


def test_build_task_m1_nonoverlapping():
    corpus = synth_corpus(3, seed=0, conditions=("mfpt",), duration_s=1.0)
    cfg = TrainingConfig(n_cluster=3, label_fraction=0.1)
    split = build_task("M1", corpus, cfg, seed=0)
    per_class = 12000 // 1024
    total = len(split.supervised) + len(split.unsupervised) + len(split.test)
    assert total == 3 * per_class
    assert np.all(split.test.sources[:, 1] % 1024 == 0)
    unsup = build_task("UnsupM1", corpus, cfg, seed=0)
    assert len(unsup.unsupervised) == 3 * per_class and len(unsup.test) == 0


def test_raw_record_validation():
    with pytest.raises(ValueError):
        RawRecord(np.zeros(10), 0.0, 0, "0hp")
    with pytest.raises(ValueError):
        RawRecord(np.zeros(10), 10.0, -1, "0hp")
