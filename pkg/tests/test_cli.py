import hashlib
import json
import os

import numpy as np
import pytest

from endowave.cli import main
from endowave.datasets import read_pfm, write_png_rgb
from endowave.flowsup import FlowField, read_flo, write_flo
from endowave.scene_io import save_scene

from conftest import random_scene, small_camera


def tree_hash(root):
    h = hashlib.sha256()
    for dirpath, dirs, files in sorted(os.walk(root)):
        dirs.sort()
        for name in sorted(files):
            path = os.path.join(dirpath, name)
            h.update(os.path.relpath(path, root).encode())
            with open(path, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


SYNTH = ["--width", "24", "--height", "24", "--frames", "8", "--blobs", "2"]


def test_no_subcommand_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys):
    assert main(["synth", "--out", "x", "--bogus", "1"]) == 1
    assert "usage error" in capsys.readouterr().err


def test_synth_is_reproducible(tmp_path):
    assert main(["synth", "--seed", "7", "--out", str(tmp_path / "a")] + SYNTH) == 0
    assert main(["synth", "--seed", "7", "--out", str(tmp_path / "b")] + SYNTH) == 0
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
    assert main(["synth", "--seed", "8", "--out", str(tmp_path / "c")] + SYNTH) == 0
    assert tree_hash(tmp_path / "a") != tree_hash(tmp_path / "c")


def test_eval_identical_images(tmp_path, capsys):
    img = np.random.default_rng(0).random((20, 20, 3))
    for d in ("p", "g"):
        os.makedirs(tmp_path / d)
        write_png_rgb(tmp_path / d / "0000.png", img)
    assert main(["eval", "--pred", str(tmp_path / "p"), "--gt", str(tmp_path / "g"),
                 "--out", str(tmp_path / "m.csv")]) == 0
    out = capsys.readouterr().out
    assert "0000.png,inf,1.000000,nan" in out
    assert (tmp_path / "m.csv").read_text().splitlines()[1] == "0000.png,inf,1.000000,nan"


def test_eval_missing_input_is_data_error(tmp_path, capsys):
    assert main(["eval", "--pred", str(tmp_path / "a.png"), "--gt", str(tmp_path / "b.png")]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert err[0].startswith("[eval] resolved config:") and err[-1].startswith("data error")


def test_fit_echoes_config_and_trains(tmp_path, capsys):
    main(["synth", "--seed", "1", "--out", str(tmp_path / "d")] + SYNTH)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"eval_every": 2, "init": {"sh_degree": 1, "n_freq": 1, "stride": 6},
                               "loss": {"weights": {"lambda_flow": 0.5}}}))
    code = main(["fit", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "run"),
                 "--config", str(cfg), "--iters", "4", "--lambda-flow", "0.05", "--q", "3",
                 "--levels", "1", "--seed", "2"])
    assert code == 0
    err = capsys.readouterr().err
    line = next(x for x in err.splitlines() if x.startswith("[fit] resolved config: "))
    echoed = json.loads(line.split("resolved config: ", 1)[1])
    assert echoed["iterations"] == 4 and echoed["seed"] == 2 and echoed["eval_every"] == 2
    assert echoed["loss"]["weights"]["lambda_flow"] == 0.05
    assert echoed["loss"]["wavelet_q"] == 3 and echoed["loss"]["wavelet_levels"] == 1
    rows = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["0", "2", "4"]
    saved = json.loads((tmp_path / "run" / "config.json").read_text())
    assert saved["loss"]["weights"]["lambda_flow"] == 0.05


def test_fit_bad_config_key(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"iters": 3}))
    assert main(["fit", "--data", str(tmp_path), "--out", str(tmp_path / "o"),
                 "--config", str(cfg)]) == 1


def test_fit_missing_dataset_is_data_error(tmp_path):
    assert main(["fit", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2


def test_render_writes_outputs(tmp_path, rng):
    scene = random_scene(rng, 8, sh_degree=1, n_freq=1)
    save_scene(scene, tmp_path / "s.ew4d")
    (tmp_path / "cam.json").write_text(json.dumps(small_camera(32).to_dict()))
    prefix = str(tmp_path / "out" / "r")
    assert main(["render", "--scene", str(tmp_path / "s.ew4d"), "--camera", str(tmp_path / "cam.json"),
                 "--t", "0.4", "--flow-to", "0.6", "--out", prefix, "--normalize-composites"]) == 0
    assert os.path.exists(prefix + ".png")
    assert read_pfm(prefix + "_depth.pfm").shape == (32, 32)
    assert read_flo(prefix + ".flo").shape == (32, 32)


def test_render_bad_scene_is_data_error(tmp_path):
    (tmp_path / "s.ew4d").write_bytes(b"junk")
    (tmp_path / "cam.json").write_text(json.dumps(small_camera(32).to_dict()))
    assert main(["render", "--scene", str(tmp_path / "s.ew4d"), "--camera", str(tmp_path / "cam.json"),
                 "--t", "0.5", "--out", str(tmp_path / "r")]) == 2


def test_wavelet_decompose_panels(tmp_path):
    img = np.random.default_rng(1).random((40, 40, 3))
    write_png_rgb(tmp_path / "i.png", img)
    assert main(["wavelet-decompose", "--image", str(tmp_path / "i.png"), "--q", "1",
                 "--levels", "2", "--out", str(tmp_path / "w")]) == 0
    ranges = json.loads((tmp_path / "w" / "ranges.json").read_text())
    assert len(ranges["panels"]) == 2 * 4 * 3
    assert ranges["panels"]["level2_HH_c0.png"]["shape"] == [10, 10]


def test_wavelet_too_many_levels_is_data_error(tmp_path):
    write_png_rgb(tmp_path / "i.png", np.zeros((20, 20, 3)))
    assert main(["wavelet-decompose", "--image", str(tmp_path / "i.png"), "--levels", "4",
                 "--out", str(tmp_path / "w")]) == 2


def test_flow_check_reports_fraction(tmp_path, capsys):
    H, W = 10, 10
    write_flo(FlowField(np.full((H, W), 2.0), np.zeros((H, W)), np.ones((H, W), bool)), tmp_path / "f.flo")
    write_flo(FlowField(np.full((H, W), -2.0), np.zeros((H, W)), np.ones((H, W), bool)), tmp_path / "b.flo")
    assert main(["flow-check", "--fwd", str(tmp_path / "f.flo"), "--bwd", str(tmp_path / "b.flo"),
                 "--out", str(tmp_path / "m.png")]) == 0
    assert "valid fraction: 0.800000 (80/100)" in capsys.readouterr().out
