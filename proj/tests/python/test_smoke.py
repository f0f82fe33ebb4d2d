import json

import numpy as np
import pytest

import smvit


def test_synth_counts_and_determinism():
    a = smvit.synth(n_subjects=3, views=[54, 90], frames_per_sequence=5, height=16, width=16, seed=2)
    b = smvit.synth(n_subjects=3, views=[54, 90], frames_per_sequence=5, height=16, width=16, seed=2)
    assert a["images"].shape == (30, 16, 16)
    assert sorted(set(a["labels"])) == [0, 1, 2]
    assert sorted(set(a["views"])) == [54, 90]
    np.testing.assert_array_equal(a["images"], b["images"])
    values = np.unique(a["images"])
    assert set(values.tolist()) <= {0.0, 1.0}


def test_preprocess_centres_and_resizes():
    raw = np.zeros((40, 30), dtype=np.float32)
    raw[5:35, 2:8] = 1.0
    out = smvit.preprocess(raw, height=16, width=16)
    assert out.shape == (16, 16)
    assert out[0].any() and out[-1].any()
    cols = np.nonzero(out.any(axis=0))[0]
    assert abs((cols.min() + cols.max()) / 2 - 7.5) <= 1.0
    blank = np.zeros((8, 8), dtype=np.float32)
    with pytest.raises(smvit.SmvitError, match="BlankFrame"):
        smvit.preprocess(blank)


def test_view_conversion_against_numpy():
    rng = np.random.default_rng(0)
    x = rng.normal(1.0, 2.0, size=(12, 5))
    y = rng.normal(-1.0, 2.0, size=(12, 5))
    f = smvit.compute_pfc(x, y)
    np.testing.assert_allclose(f, (x - y).mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(smvit.compute_pfc(y, x), -f, atol=1e-12)
    assert np.all(smvit.compute_pfc(x, x) == 0.0)

    moved = smvit.apply_it(x, f)
    d0 = np.linalg.norm(x[:, None] - x[None], axis=-1)
    d1 = np.linalg.norm(moved[:, None] - moved[None], axis=-1)
    np.testing.assert_allclose(d0, d1, atol=1e-9)

    reg = smvit.build_registry({54: x, 90: y}, standard_view=90)
    assert list(reg.factors) == [54]
    np.testing.assert_allclose(smvit.apply_it(x, reg.factors[54]).mean(axis=0), y.mean(axis=0), atol=1e-6)
    again = smvit.FactorRegistry.from_json(reg.to_json())
    assert again.feat_dim == 5


def test_model_embed_predict_checkpoint(tmp_path):
    data = smvit.synth(n_subjects=2, views=[90], frames_per_sequence=4, height=8, width=8, seed=3)
    m = smvit.Model("miniature", num_subjects=2, seed=4)
    emb = m.embed(data["images"])
    assert emb.shape == (8, m.feat_dim)
    assert m.parameter_checksum(0) == m.parameter_checksum(1)
    first = m.predict(data["images"], 90)
    assert first == m.predict(data["images"], 90)
    assert all(0 <= p < 2 for p in first)
    assert json.loads(m.config_json)["num_subjects"] == 2

    path = tmp_path / "m.ckpt"
    m.save(str(path), seed=4)
    other = smvit.Model("miniature", num_subjects=2, seed=99)
    other.load(str(path))
    np.testing.assert_array_equal(other.logits(data["images"], 90), m.logits(data["images"], 90))

    with pytest.raises(smvit.SmvitError, match="Shape"):
        m.embed(np.zeros((1, 16, 16), dtype=np.float32))
    wide = smvit.Model("miniature", num_subjects=3, seed=4)
    with pytest.raises(smvit.SmvitError, match="Load"):
        wide.load(str(path))


def test_gradcheck_suite_passes():
    reports = smvit.gradcheck(precision=64, instances=5)
    assert reports and all(r["passed"] for r in reports)
    assert any(r["op"] == "smvit_end_to_end" for r in reports)


def test_cli_pipeline(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "synth": {"n_subjects": 2, "views": [72, 90, 108], "frames_per_sequence": 4, "height": 8, "width": 8},
        "model": {"backbone": "miniature", "input_height": 8, "input_width": 8},
        "train": {"epochs_per_stage": 1},
    }))
    code, out, err = smvit.run_cli(["synth", "--config", str(cfg), "--out", str(tmp_path / "data")])
    assert code == 0, err
    assert "24 frames" in out
    smvit.train(tmp_path / "data", tmp_path / "run", config=cfg, mode="gradual", seed=2)
    metrics = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
    assert len(metrics) == 2
    assert smvit.FactorRegistry.load(str(tmp_path / "run" / "registry.json")).factors.keys() == {72, 108}
    code, _, err = smvit.run_cli(["train", "--config", str(cfg), "--data-root", str(tmp_path / "missing"),
                                  "--out", str(tmp_path / "r2")])
    assert code == 5 and "IoError" in err
