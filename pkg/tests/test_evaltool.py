import json
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage import data, img_as_float

from textovsr import evaltool
from textovsr.evaltool import (
    EvalClip,
    MetricReport,
    NaturalnessParams,
    evaluate,
    frame_features,
    load_report,
    nr_naturalness,
    psnr,
    ssim,
)
from textovsr.exceptions import ConfigurationError, DegenerateSizeError, VersioningError


def _photo(name="camera", size=128, y=100, x=100):
    img = img_as_float(getattr(data, name)())
    img = np.repeat(img[None], 3, 0) if img.ndim == 2 else img[..., :3].transpose(2, 0, 1)
    return img[:, y:y + size, x:x + size]


def test_psnr_identity_is_capped():
    x = np.random.rand(3, 16, 16)
    assert psnr(x, x) == evaltool.PSNR_CAP == 100.0


def test_psnr_uniform_offset_closed_form():
    x = np.full((3, 8, 8), 0.5)
    assert psnr(x, x + 0.1) == pytest.approx(20 * np.log10(1 / 0.1), abs=1e-9)


def test_ssim_identity():
    x = np.random.rand(3, 32, 32)
    assert ssim(x, x) == pytest.approx(1.0)
    assert -1.0 <= ssim(x, np.random.rand(3, 32, 32)) <= 1.0


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 0.4))
def test_psnr_monotone_in_offset(d):
    x = np.full((1, 4, 4), 0.5)
    assert psnr(x, x + d) > psnr(x, x + d + 0.05)


def test_nr_size_check():
    with pytest.raises(DegenerateSizeError):
        nr_naturalness(np.random.rand(3, 64, 128))


def test_nr_deterministic_and_identical_frames():
    f = _photo()
    assert nr_naturalness(f) == nr_naturalness(f.copy())


def test_nr_prefers_clean_over_noisy():
    rng = np.random.default_rng(0)
    f = _photo("coins", y=50, x=50)
    noisy = np.clip(f + rng.normal(0, 0.1, f.shape), 0, 1)
    assert nr_naturalness(f) < nr_naturalness(noisy)


def test_feature_layout():
    feats = frame_features(_photo(size=96))
    assert feats.shape == (9, 36) and np.all(np.isfinite(feats))


def test_shipped_params_hash_verified(tmp_path):
    src = evaltool.resources.files("textovsr") / "data"
    for name in (evaltool.NR_PARAMS_FILE, evaltool.NR_MANIFEST_FILE):
        shutil.copy(src / name, tmp_path / name)
    p = NaturalnessParams.load(tmp_path)
    assert p.mu.shape == (36,) and p.cov.shape == (36, 36)
    blob = json.loads((tmp_path / evaltool.NR_PARAMS_FILE).read_text())
    blob["mu"][0] += 1.0
    (tmp_path / evaltool.NR_PARAMS_FILE).write_text(json.dumps(blob))
    with pytest.raises(VersioningError):
        NaturalnessParams.load(tmp_path)


def test_fit_and_save_params(tmp_path):
    params = evaltool.fit_naturalness_params([_photo(size=128), _photo("coins", size=128, y=0, x=0)])
    evaltool.save_naturalness_params(params, tmp_path)
    loaded = NaturalnessParams.load(tmp_path)
    assert np.isfinite(nr_naturalness(_photo(), loaded))


def test_report_mean_matches_frames():
    r = MetricReport.from_frames({"b": {"psnr": [30.0, 31.0]}, "a": {"psnr": [20.0]}}, "cfg", "ck")
    assert r.per_frame["psnr"] == [20.0, 30.0, 31.0]
    assert abs(r.per_video["psnr"] - np.mean(r.per_frame["psnr"])) < 1e-9
    assert r.clips["b"]["psnr"] == 30.5


def test_report_version_rejected(tmp_path):
    r = MetricReport.from_frames({"a": {"psnr": [1.0]}}, "c", "k")
    r.save(tmp_path / "report.json")
    assert load_report(tmp_path / "report.json").per_video == r.per_video
    d = json.loads((tmp_path / "report.json").read_text())
    d["version"] = "2.0"
    (tmp_path / "report.json").write_text(json.dumps(d))
    with pytest.raises(VersioningError):
        load_report(tmp_path / "report.json")


def _eval_clips():
    rng = np.random.default_rng(0)
    hr = np.stack([_photo("camera", 128, 50 + 3 * t, 60 + 2 * t) for t in range(2)]).astype(np.float32)
    lr = evaltool.bicubic_upscale(hr, 1)[:, :, ::4, ::4].copy()
    return [EvalClip("c0", lr, hr), EvalClip("c1", np.clip(lr + rng.normal(0, 0.01, lr.shape), 0, 1).astype(np.float32))]


def test_evaluate_bicubic_writes_report_and_strips(tmp_path):
    report = evaluate("bicubic", _eval_clips(), ("psnr", "ssim", "nr"), out=tmp_path)
    assert (tmp_path / "report.json").exists()
    assert (tmp_path / "strips" / "c0.png").exists() and (tmp_path / "strips" / "c1.png").exists()
    assert len(report.per_frame["psnr"]) == 2 and len(report.per_frame["nr"]) == 4
    assert {s["clip"] for s in report.skipped} == {"c1"}
    loaded = load_report(tmp_path / "report.json")
    for m, vals in loaded.per_frame.items():
        assert abs(loaded.per_video[m] - np.mean(vals)) < 1e-9


def test_evaluate_parallel_matches_serial():
    a = evaluate("bicubic", _eval_clips(), ("psnr", "nr"))
    b = evaluate("bicubic", _eval_clips(), ("psnr", "nr"), workers=2)
    assert a.to_dict() == b.to_dict()


def test_evaluate_missing_checkpoint_writes_nothing(tmp_path):
    with pytest.raises(FileNotFoundError):
        evaluate(tmp_path / "nope.pt", _eval_clips(), ("psnr",), out=tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_evaluate_unknown_metric():
    with pytest.raises(ConfigurationError):
        evaluate("bicubic", _eval_clips(), ("lpips",))


def test_strip_layout():
    lr = np.zeros((3, 4, 4))
    sr = np.ones((3, 16, 16))
    assert evaltool.comparison_strip(lr, sr).shape == (3, 16, 32)
    assert evaltool.comparison_strip(lr, sr, sr).shape == (3, 16, 48)
