import csv
import json

import numpy as np
import pytest

from tests.conftest import small_render, tiny_field
from viewmap.cli import (
    MetricRecord,
    Similarity,
    emit_report,
    main,
    read_summary,
    run_pipeline,
    update_effect,
)
from viewmap.config import AtlasConfig, RunConfig, load_config, save_config
from viewmap.tracksim import END, TrackerEvent, generate


def small_cfg(tmp_path, stream="", name="run", **kw) -> RunConfig:
    cfg = RunConfig(stream=str(stream), out=str(tmp_path / name), n_train=2, eval_interval=3,
                    field=tiny_field("float32"), render=small_render(),
                    atlas=AtlasConfig(rays_per_batch=64))
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture(scope="module")
def stream(tmp_path_factory):
    root = tmp_path_factory.mktemp("stream")
    return generate(root, seed=1, n_keyframes=8, width=16, height=16, loop_close_at=6, test_every=4,
                    covis_radius=1.2)


def test_empty_stream_clean_exit(tmp_path):
    out = run_pipeline(small_cfg(tmp_path), events=[TrackerEvent(END)])
    with open(out / "metrics.csv") as f:
        rows = list(csv.reader(f))
    assert rows == [["step", "tag", "frame", "psnr", "ssim", "l1_depth"]]
    assert json.loads((out / "run.json").read_text())["n_models"] == 0


def test_pipeline_deterministic(tmp_path, stream):
    a = run_pipeline(small_cfg(tmp_path, stream, "a"))
    b = run_pipeline(small_cfg(tmp_path, stream, "b"))
    for name in ("metrics.csv", "summary.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    for f in sorted((a / "checkpoint").iterdir()):
        assert f.read_bytes() == (b / "checkpoint" / f.name).read_bytes()
    rows = read_summary(a)
    tags = [r["tag"] for r in rows]
    assert "pre_update" in tags and "post_update" in tags and tags[-1] == "final"
    info = json.loads((a / "run.json").read_text())
    assert info["update_steps"] == [6]
    assert (a / "timeseries_psnr.png").exists()


def test_world_centric_mode_single_model(tmp_path, stream):
    out = run_pipeline(small_cfg(tmp_path, stream, "wc", mode="world_centric_single"))
    info = json.loads((out / "run.json").read_text())
    assert info["n_models"] == 1
    assert all(a["primary_model"] == 0 for a in info["assignments"])


def test_summary_means_recomputed(tmp_path, stream):
    out = run_pipeline(small_cfg(tmp_path, stream, "s"))
    per = {}
    with open(out / "metrics.csv") as f:
        for r in csv.DictReader(f):
            per.setdefault((int(r["step"]), r["tag"]), []).append(r)
    for row in read_summary(out):
        frames = per[(row["step"], row["tag"])]
        assert row["n_frames"] == len(frames)
        for m in ("psnr", "ssim", "l1_depth"):
            vals = [float(r[m]) for r in frames]
            assert row[f"{m}_mean"] == pytest.approx(np.mean(vals), rel=1e-9)
            assert row[f"{m}_std"] == pytest.approx(np.std(vals), rel=1e-9, abs=1e-12)
        assert all(float(r["psnr"]) <= 99 and -1 <= float(r["ssim"]) <= 1 and float(r["l1_depth"]) >= 0
                   for r in frames)


def test_metric_record_aggregates():
    rec = MetricRecord(3, "final", [1, 2], [20.0, 30.0], [0.5, 0.7], [0.1, 0.3])
    assert rec.mean("psnr") == 25.0 and rec.std("psnr") == 5.0


def test_report_single_record_and_ab(tmp_path):
    dirs = []
    for name, vals in (("a", [21.0]), ("b", [20.0])):
        d = tmp_path / name
        d.mkdir()
        with open(d / "summary.csv", "w") as f:
            f.write("step,tag,n_frames,psnr_mean,psnr_std,ssim_mean,ssim_std,l1_depth_mean,l1_depth_std\n")
            f.write(f"5,final,1,{vals[0]},0,0.5,0,0.2,0\n")
        dirs.append(d)
    out = emit_report(dirs[:1])
    assert (out / "timeseries_psnr.png").exists()
    out = emit_report(dirs, tmp_path / "ab", ["view", "world"])
    with open(out / "ab_table.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0][:3] == ["step", "tag", "view:psnr"] and "world:psnr" in rows[0]
    assert rows[1][:2] == ["5", "final"] and len(rows) == 2
    with pytest.raises(FileNotFoundError):
        emit_report([tmp_path / "missing"])


def test_update_effect(tmp_path):
    d = tmp_path / "r"
    d.mkdir()
    with open(d / "summary.csv", "w") as f:
        f.write("step,tag,n_frames,psnr_mean,psnr_std,ssim_mean,ssim_std,l1_depth_mean,l1_depth_std\n")
        for step, tag, p in ((3, "interval", 18), (6, "pre_update", 20), (6, "post_update", 15), (9, "final", 19)):
            f.write(f"{step},{tag},1,{p},0,0.5,0,0.2,0\n")
    eff = update_effect(d)
    assert eff["drop"] == 5 and eff["post_window_mean"] == 17 and eff["final"] == 19
    # an END evaluation at an interval step is the same evaluation and counts once
    with open(d / "summary.csv", "a") as f:
        f.write("12,interval,1,23,0,0.5,0,0.2,0\n12,final,1,23,0,0.5,0,0.2,0\n")
    assert update_effect(d)["post_window_mean"] == 19


def test_similarity_fit_unit_radius(stream):
    from viewmap.tracksim import KEYFRAME, read_stream

    events = read_stream(stream)
    sim = Similarity.fit(events)
    pts = np.array([sim.pose(e.keyframe.pose).translation for e in events if e.tag == KEYFRAME])
    assert np.linalg.norm(pts, axis=1).max() == pytest.approx(1.0, abs=1e-12)


def test_config_roundtrip(tmp_path):
    cfg = small_cfg(tmp_path, mode="world_centric_single", rgb_only=True)
    save_config(cfg, tmp_path / "c.toml")
    assert load_config(tmp_path / "c.toml") == cfg


def test_cli_commands(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path / "s"), "--n-keyframes", "6", "--width", "16", "--height", "16",
                 "--loop-close-at", "4", "--test-every", "3"]) == 0
    stream = json.loads(capsys.readouterr().out)["stream"]
    cfg = small_cfg(tmp_path, stream, "cfgrun")
    save_config(cfg, tmp_path / "cfg.toml")
    assert main(["run", "--config", str(tmp_path / "cfg.toml"), "--seed", "2", "--out", str(tmp_path / "run"),
                 "--atlas.d_th", "0.5", "--rgb-only"]) == 0
    run = json.loads(capsys.readouterr().out)["out"]
    saved = load_config(f"{run}/config.toml")
    assert saved.seed == 2 and saved.atlas.d_th == 0.5 and saved.rgb_only and saved.n_train == 2
    assert main(["eval", run]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["frames"] and np.isfinite(res["psnr_mean"])
    assert main(["report", run, run, "--out", str(tmp_path / "rep"), "--labels", "x", "y"]) == 0
    assert (tmp_path / "rep" / "ab_table.csv").exists()


def test_cli_error_is_one_json_line(tmp_path, capsys):
    assert main(["run", "--stream", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")]) != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and set(json.loads(err[0])) == {"error", "message"}
    assert main(["report", str(tmp_path / "missing")]) != 0
