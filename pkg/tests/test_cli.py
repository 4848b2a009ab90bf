import json

import pytest
import yaml

from textovsr.cli import build_parser, main
from textovsr.pipeline import write_synthetic_root


@pytest.fixture(scope="module")
def root(tmp_path_factory):
    r = tmp_path_factory.mktemp("data")
    write_synthetic_root(r, n_clips=2, frames=3, size=32)
    return r


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "train.yaml"
    p.write_text(yaml.safe_dump({"train": {
        "iterations": 2, "stage2_iterations": 1, "num_frames": 3, "lr_crop": 8,
        "generator": {"channels": 8, "num_blocks": 1},
        "discriminator": {"base_channels": 4, "depth": 2, "text_width": 4},
    }}))
    return p


def test_parser_has_all_subcommands():
    p = build_parser()
    for cmd in (["degrade", "--root", "r"], ["caption", "--root", "r"], ["train", "--stage", "1", "--root", "r",
                "--out", "o"], ["infer", "--ckpt", "c", "--input", "i", "--out", "o"],
                ["eval", "--ckpt", "c", "--root", "r", "--out", "o"], ["ablate", "--variant", "V1", "--out", "o"]):
        assert p.parse_args(cmd + ["--seed", "3"]).seed == 3


def test_end_to_end(root, config, tmp_path, capsys):
    assert main(["degrade", "--root", str(root), "--seed", "1"]) == 0
    assert (root / "clips" / "clip000" / "degradation.json").exists()
    assert main(["caption", "--root", str(root), "--caption-provider", "template", "--granularity", "coarse"]) == 0
    assert (root / "clips" / "clip000" / "prompts.emb").exists()
    run = tmp_path / "run"
    assert main(["train", "--stage", "1", "--root", str(root), "--out", str(run), "--config", str(config)]) == 0
    ck1 = run / "stage1_final.pt"
    assert ck1.exists()
    assert main(["train", "--stage", "2", "--root", str(root), "--out", str(run), "--config", str(config),
                 "--stage1-ckpt", str(ck1)]) == 0
    assert (run / "stage2_final.pt").exists()
    out = tmp_path / "sr"
    assert main(["infer", "--ckpt", str(run / "stage2_final.pt"), "--input", str(root), "--out", str(out)]) == 0
    assert len(list((out / "clip000").glob("*.png"))) == 3
    ev = tmp_path / "eval"
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(ck1), "--root", str(root), "--metrics", "psnr,ssim", "--out", str(ev)]) == 0
    per_video = json.loads(capsys.readouterr().out)
    assert set(per_video) == {"psnr", "ssim"}
    assert (ev / "report.json").exists() and (ev / "strips" / "clip001.png").exists()


def test_stage2_without_checkpoint_fails_cleanly(root, config, tmp_path, capsys):
    code = main(["train", "--stage", "2", "--root", str(root), "--out", str(tmp_path), "--config", str(config)])
    assert code == 2 and "stage-1 checkpoint" in capsys.readouterr().err


def test_eval_missing_checkpoint(root, tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "x.pt"), "--root", str(root), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_ablate_writes_resolved_config(tmp_path, config, capsys):
    assert main(["ablate", "--variant", "V2", "--out", str(tmp_path), "--config", str(config)]) == 0
    cfg = yaml.safe_load((tmp_path / "V2.yaml").read_text())
    assert cfg["generator"]["drf_positive"] is None and cfg["generator"]["text_negative"] is False
    assert main(["ablate", "--variant", "V9", "--out", str(tmp_path)]) == 2
