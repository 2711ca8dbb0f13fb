# Copyright 2026 The ctvr Authors
# SPDX-License-Identifier: Apache-2.0

import json
import math

import numpy as np
import pytest

import ctvr

TINY = {
    "stream.tasks": "2",
    "stream.cats_per_task": "2",
    "stream.videos_per_cat": "4",
    "stream.test_per_cat": "2",
    "stream.base_categories": "16",
    "stream.base_videos_per_cat": "2",
    "stream.frames": "3",
    "stream.patches": "4",
    "stream.input_width": "8",
    "stream.latent_dim": "8",
    "stream.query_len": "6",
    "stream.vocab": "80",
    "stream.appearance_dims": "3",
    "stream.motion_dims": "2",
    "stream.min_center_distance": "1.5",
    "backbone.width": "16",
    "backbone.heads": "2",
    "backbone.context": "12",
    "pretrain.epochs": "1",
    "pretrain.batch_size": "16",
    "epochs": "2",
    "batch_size": "4",
    "experts": "3",
    "rank": "2",
    "ref_negatives": "8",
}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    stream = ctvr.generate_stream(TINY)
    backbone = ctvr.pretrain(stream, TINY)
    result = ctvr.run_stream(stream, backbone, TINY, out_dir=str(out))
    return stream, backbone, result, out


def test_default_config_has_beta():
    cfg = ctvr.default_config()
    assert cfg["beta"] == "0.6"
    assert "stream.tasks" in cfg


def test_unknown_key_raises_config_error():
    with pytest.raises(ctvr.ConfigError, match="gamma"):
        ctvr.generate_stream({"gamma": "1"})


def test_stream_pairs_and_render():
    stream = ctvr.generate_stream(TINY)
    assert stream.tasks == 2
    test_pairs = stream.pairs(1, test=True)
    assert len(test_pairs) == 4
    video = stream.render(test_pairs[0]["video_id"])
    assert video.shape == (3, 4, 8)
    assert test_pairs[0]["query_tokens"][-1] == 1


def test_run_keeps_backbone_frozen(tiny_run):
    _, backbone, result, _ = tiny_run
    assert result["backbone_unchanged"]
    assert result["historical_reextractions"] == 0
    assert all(n.split(".")[0] in ("ffa", "tame", "proto") for n in result["changed"])
    assert [len(row) for row in result["ledger"]] == [1, 2]
    assert set(result["report"]) >= {"r1", "r5", "r10", "medr", "meanr", "bwf"}


def test_store_and_model_round_trip(tiny_run):
    stream, _, _, out = tiny_run
    store = ctvr.read_store(str(out / "features.fdb"))
    assert store["features"].shape == (8, 16)
    assert sorted(set(store["task_ids"])) == [1, 2]
    model = ctvr.load_model(str(out / "model_t2.ckpt"))
    assert model.tasks == 2
    ids = [p["video_id"] for p in stream.pairs(2, test=True)]
    fresh = model.encode_videos(stream, ids)
    stored = store["features"][np.isin(store["video_ids"], ids)]
    np.testing.assert_allclose(fresh, stored, atol=1e-6)
    q = model.encode_queries([stream.pairs(2, test=True)[0]["query_tokens"]], 2)
    assert q.shape == (1, 16)


def test_metrics():
    assert ctvr.recall_at_k([1, 6, 5], 5) == pytest.approx(200 / 3)
    assert ctvr.median_mean_rank([1, 3]) == (2.0, 2.0)
    assert ctvr.backward_forgetting([[20.0], [18.0, 30.0]], 2) == 2.0
    assert ctvr.backward_forgetting([[20.0], [21.0, 30.0]], 2) == -1.0
    pool = np.array([[-1.0, 0.0], [0.0, 0.0], [1.0, 0.2]])
    assert ctvr.rank_videos(np.array([1.0, 0.0]), pool) == [2, 1, 0]


def test_losses():
    q = np.tile([1.0, 2.0, 3.0], (4, 1))
    v = np.tile([0.0, 1.0, 0.0], (4, 1))
    v2t, t2v = ctvr.infonce(q, v)
    assert v2t == pytest.approx(math.log(4), abs=1e-9)
    assert t2v == pytest.approx(math.log(4), abs=1e-9)
    rng = np.random.default_rng(0)
    q, v, r = rng.normal(size=(5, 6)), rng.normal(size=(5, 6)), rng.normal(size=(3, 6))
    assert ctvr.ct_loss(q, v) == pytest.approx(ctvr.infonce(q, v)[1], abs=1e-12)
    assert ctvr.ct_loss(q, v, r) >= ctvr.ct_loss(q, v)
    assert ctvr.total_loss(q, v, r, beta=1.0) == ctvr.ct_loss(q, v, r)


def test_cli_in_process(tmp_path):
    code, _, err = ctvr.run_cli(["frobnicate"])
    assert code == 2 and "Usage" in err
    cfg = tmp_path / "c.cfg"
    cfg.write_text(ctvr.render_config(TINY))
    code, out, err = ctvr.run_cli(["config", "--config", str(cfg), "--set", "beta=0.3"])
    assert code == 0, err
    assert "beta = 0.3" in out


def test_cli_eval_report(tiny_run, tmp_path):
    stream, _, result, out = tiny_run
    stream.write_manifest(str(tmp_path / "manifest.jsonl"))
    report = tmp_path / "r.json"
    code, _, err = ctvr.run_cli([
        "eval", "--store", str(out / "features.fdb"), "--manifest", str(tmp_path / "manifest.jsonl"),
        "--ckpt", str(out / "model_t2.ckpt"), "--report", str(report),
    ])
    assert code == 0, err
    got = json.loads(report.read_text())
    assert got["r1"] == result["report"]["r1"]
