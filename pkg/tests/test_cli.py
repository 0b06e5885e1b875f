import json

import numpy as np
import pytest
import yaml

from dereflect.align import warp_to_reference
from dereflect.cli import main
from dereflect.images import list_images, read_image, write_image
from dereflect.textures import procedural_texture

TINY = {
    "model": {"image_size": 32, "codec_widths": [8, 16, 16], "unet_widths": [16, 32, 32], "emb_dim": 32, "groups": 4},
    "schedule": {"t_max": 16},
    "stages": {
        s: {"steps": 2, "batch_size": 2, "codec_steps": 2, "augment": {"crop_size": 32}}
        for s in ("prior", "foundation", "invariant_finetune", "decoder")
    },
}


def manifest(out):
    d = json.loads((out / "run_manifest.json").read_text())
    d.pop("wall_time_s")
    return d


def tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "run_manifest.json"}


@pytest.fixture
def texture_dirs(tmp_path):
    rng = np.random.default_rng(0)
    for sub, n in (("T", 4), ("R", 6)):
        for i in range(n):
            write_image(tmp_path / sub / f"{sub}{i}.png", procedural_texture(rng, 48), bits=8)
    return tmp_path / "T", tmp_path / "R"


@pytest.fixture
def config_file(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


def test_synth_deterministic(tmp_path, texture_dirs):
    t, r = texture_dirs
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["synth", "--t-dir", str(t), "--r-dir", str(r), "--n", "10", "--seed", "7",
                     "--size", "32", "--out", str(out)]) == 0
        runs.append(out)
    assert manifest(runs[0]) == manifest(runs[1])
    assert tree(runs[0]) == tree(runs[1])
    m = manifest(runs[0])
    assert m["seed"] == 7 and m["subcommand"] == "synth" and "code_version" in m
    assert len((runs[0] / "manifest.jsonl").read_text().splitlines()) == 30


def test_synth_jobs_do_not_change_output(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth", "--n", "4", "--size", "32", "--out", str(a)]) == 0
    assert main(["synth", "--n", "4", "--size", "32", "--jobs", "3", "--out", str(b)]) == 0
    assert tree(a) == tree(b)


def test_synth_does_not_touch_inputs(tmp_path, texture_dirs):
    t, r = texture_dirs
    before = tree(t.parent)
    main(["synth", "--t-dir", str(t), "--r-dir", str(r), "--n", "2", "--size", "32", "--out", str(tmp_path / "o")])
    after = {k: v for k, v in tree(t.parent).items() if k.parts[0] in ("T", "R")}
    assert after == {k: v for k, v in before.items() if k.parts[0] in ("T", "R")}


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main(["synth", "--bogus", "--out", str(tmp_path)]) == 1
    assert main(["nosuch"]) == 1
    assert main(["synth", "--n", "2", "--t-dir", str(tmp_path / "missing"), "--r-dir", str(tmp_path),
                 "--out", str(tmp_path / "o")]) == 1
    assert "usage" in capsys.readouterr().err


def test_filter(tmp_path):
    syn = tmp_path / "syn"
    main(["synth", "--n", "10", "--size", "32", "--out", str(syn)])
    out = tmp_path / "flt"
    assert main(["filter", "--manifest", str(syn / "manifest.jsonl"), "--keep-fraction", "0.5", "--out", str(out)]) == 0
    lines = [json.loads(x) for x in (out / "manifest.jsonl").read_text().splitlines()]
    assert len(lines) == 15
    assert all(x["score"] is not None for x in lines)
    assert (out / lines[0]["mixed"]).is_file()


def test_eval_mismatched_dirs(tmp_path, capsys):
    rng = np.random.default_rng(0)
    for i in range(3):
        img = procedural_texture(rng, 32)
        write_image(tmp_path / "gt" / f"x{i}.png", img)
        if i:
            write_image(tmp_path / "pred" / f"x{i}.png", img)
    code = main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"), "--out", str(tmp_path / "r")])
    assert code == 1
    captured = capsys.readouterr()
    assert "x0" in captured.out and "missing prediction" in captured.out
    assert (tmp_path / "r" / "records.jsonl").is_file()


def test_train_stage_order_message(tmp_path, config_file, capsys):
    syn = tmp_path / "syn"
    main(["synth", "--n", "2", "--size", "32", "--out", str(syn)])
    code = main(["train", "--stage", "foundation", "--data", str(syn / "manifest.jsonl"),
                 "--config", str(config_file), "--out", str(tmp_path / "t")])
    assert code == 1
    assert "prior" in capsys.readouterr().err


def test_runtime_failure_exit_2(tmp_path):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"garbage")
    write_image(tmp_path / "in" / "a.png", np.zeros((32, 32, 3)))
    assert main(["infer", "--checkpoint", str(bad), "--input", str(tmp_path / "in"), "--out", str(tmp_path / "o")]) == 2


def test_align_subcommand(tmp_path):
    rng = np.random.default_rng(1)
    gt = procedural_texture(rng, 128)
    for _ in range(25):
        y, x = rng.integers(4, 116, size=2)
        gt[y:y + 8, x:x + 8] = rng.random(3)
    h = np.array([[1, 0, 3], [0, 1, -2], [0, 0, 1]], dtype=float)
    mixed, _ = warp_to_reference(gt, np.linalg.inv(h))
    write_image(tmp_path / "gt" / "p.png", gt)
    write_image(tmp_path / "m" / "p.png", mixed)
    out = tmp_path / "al"
    assert main(["align", "--mixed", str(tmp_path / "m"), "--gt", str(tmp_path / "gt"), "--out", str(out)]) == 0
    rep = json.loads((out / "report.jsonl").read_text())
    assert set(rep) >= {"n_matches", "n_inliers", "corner_shift_px"}
    assert abs(rep["corner_shift_px"] - np.hypot(3, 2)) < 0.5
    assert (out / "aligned" / "p.png").is_file() and (out / "masks" / "p.png").is_file()


def _preview_dirs(tmp_path, n=3, gt=True):
    rng = np.random.default_rng(0)
    for i in range(n):
        for sub in ("m", "o") + (("g",) if gt else ()):
            write_image(tmp_path / sub / f"i{i}.png", procedural_texture(rng, 32), bits=8)


def test_preview_grid(tmp_path):
    _preview_dirs(tmp_path)
    args = ["preview", "--mixed", str(tmp_path / "m"), "--output", str(tmp_path / "o")]
    assert main(args + ["--gt", str(tmp_path / "g"), "--out", str(tmp_path / "p3")]) == 0
    grid = read_image(tmp_path / "p3" / "preview.png")
    assert grid.shape == (96, 96, 3)
    np.testing.assert_array_equal(grid[32:64, 64:96], read_image(tmp_path / "g" / "i1.png"))
    assert main(args + ["--out", str(tmp_path / "p2")]) == 0
    assert read_image(tmp_path / "p2" / "preview.png").shape == (96, 64, 3)
    assert main(args + ["--out", str(tmp_path / "p2b")]) == 0
    assert (tmp_path / "p2" / "preview.png").read_bytes() == (tmp_path / "p2b" / "preview.png").read_bytes()


def test_preview_empty_dirs(tmp_path):
    (tmp_path / "m").mkdir()
    (tmp_path / "o").mkdir()
    assert main(["preview", "--mixed", str(tmp_path / "m"), "--output", str(tmp_path / "o"),
                 "--out", str(tmp_path / "p")]) == 1


def test_pipeline_train_infer_eval(tmp_path, config_file):
    syn = tmp_path / "syn"
    assert main(["synth", "--n", "3", "--size", "32", "--out", str(syn)]) == 0
    tr = tmp_path / "train"
    assert main(["train", "--data", str(syn / "manifest.jsonl"), "--config", str(config_file), "--out", str(tr)]) == 0
    log = [json.loads(x) for x in (tr / "train_log.jsonl").read_text().splitlines()]
    assert {r["stage"] for r in log} == {"prior", "foundation", "invariant_finetune", "decoder"}
    inf = tmp_path / "inf"
    assert main(["infer", "--checkpoint", str(tr / "checkpoint.pt"), "--input", str(syn / "M"), "--out", str(inf)]) == 0
    assert len(list_images(inf)) == 9
    assert main(["eval", "--pred", str(inf), "--gt", str(syn / "M"), "--out", str(tmp_path / "ev")]) == 0
    # resume: a decoder-only run from the full checkpoint is allowed
    assert main(["train", "--stage", "decoder", "--checkpoint", str(tr / "checkpoint.pt"),
                 "--data", str(syn / "manifest.jsonl"), "--config", str(config_file), "--out", str(tmp_path / "t2")]) == 0
