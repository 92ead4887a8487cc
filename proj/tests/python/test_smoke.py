import numpy as np
import pytest

import fnse


def test_stft_round_trip():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, 1600)
    cfg = fnse.feature_preset()
    re, im = fnse.stft(x, cfg)
    assert re.shape == (cfg.frames(1600), cfg.bins)
    y = fnse.istft(re, im, cfg, 1600)
    assert np.linalg.norm(y - x) / np.linalg.norm(x) < 1e-6


def test_compress_round_trip():
    for m in (-50.0, -1.0, 0.0, 0.3, 50.0):
        assert fnse.decompress(fnse.compress(m)) == pytest.approx(m, abs=1e-8)


def test_metrics():
    ref = np.array([1.0, 0.0, 0.0, 0.0])
    assert fnse.si_sdr(np.array([1.0, 0.1, 0.0, 0.0]), ref) == pytest.approx(20.0)
    x = np.random.default_rng(1).uniform(-1, 1, 1600)
    assert fnse.log_spectral_distance(2 * x, x) == pytest.approx(20 * np.log10(2), rel=1e-9)


def test_normalization_state():
    rng = np.random.default_rng(2)
    noisy = rng.normal(0.5, 2.0, (200, 4))
    clean = rng.normal(-1.0, 0.5, (200, 4))
    state = fnse.NormState(beta_m=0.0, beta_r=0.0)
    state.update(noisy, clean)
    out = state.renormalize(noisy, 1.0)
    mean, std = fnse.batch_stats(out)
    want_mean, want_std = fnse.batch_stats(clean)
    np.testing.assert_allclose(mean, want_mean, atol=1e-10)
    np.testing.assert_allclose(std, want_std, atol=1e-10)
    np.testing.assert_array_equal(state.renormalize(noisy, 0.0), noisy)
    assert fnse.k_at(1.0, 100, 50) == pytest.approx(0.5)


def test_corpus_and_config():
    cfg = fnse.default_corpus_config()
    cfg.update(n_pretrain=2, n_train=3, n_test=2, duration=0.25)
    c = fnse.build_corpus(cfg)
    assert len(c["train"]) == 3
    pair = c["train"][0]
    snr = 10 * np.log10(np.sum(pair["clean"] ** 2) / np.sum((pair["noisy"] - pair["clean"]) ** 2))
    assert snr == pytest.approx(pair["snr_db"], abs=1e-9)

    resolved = fnse.resolve_config("[finetune]\ntotal_steps = 7\n")
    assert resolved["finetune"]["total_steps"] == 7
    with pytest.raises(fnse.ConfigError):
        fnse.resolve_config("[finetune]\nbogus = 1\n")


def test_finetune_end_to_end(tmp_path):
    cfg = fnse.default_corpus_config()
    cfg.update(n_pretrain=4, n_train=4, n_test=2, duration=0.25)
    fnse.write_corpus(cfg, tmp_path / "corpus")
    toml = """
[model.encoder]
d = 16
heads = 2
layers = 2
ff = 32
[pretrain]
steps = 2
batch = 2
crop = 800
[finetune]
regime = "normed"
total_steps = 2
batch = 2
crop = 1200
"""
    before, after = fnse.pretrain(toml, tmp_path / "corpus", tmp_path / "enc.ckpt")
    assert np.isfinite(before) and np.isfinite(after)
    report = fnse.finetune(toml, tmp_path / "corpus", tmp_path / "enc.ckpt", tmp_path / "run")
    assert report["regime"] == "normed"
    assert (tmp_path / "run" / "report.json").exists()


def test_selfcheck_passes():
    assert all(c["pass"] for c in fnse.selfcheck())
