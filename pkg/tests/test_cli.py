import json

import pytest
import torch
from PIL import Image

from antidiff import data, imageio
from antidiff.cli import EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_INPUT, EXIT_MISSING, EXIT_OK, EXIT_USAGE, main
from antidiff.core.checkpoint import save_model
from antidiff.core.model import TINY_CONFIG, ToyLDM

FAST = ["--epochs", "1", "--steps", "3"]


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    """A tiny checkpoint, a directory of subject PNGs and a config that keeps every stage short."""
    monkeypatch.delenv("ANTIDIFF_OUTPUT_ROOT", raising=False)
    save_model(ToyLDM(TINY_CONFIG, seed=0), tmp_path / "tiny.ckpt")
    ident = data.Identity("ring", "green", "solid")
    imgs = torch.as_tensor(data.subject_images(ident, 4, seed=3))
    imageio.save_batch(imgs[:2], tmp_path / "clean")
    imageio.save_batch(imgs[2:], tmp_path / "held")
    imageio.save_image(torch.as_tensor(data.template(ident)), tmp_path / "template.png")
    (tmp_path / "fast.ini").write_text(
        "[prompt]\nsteps = 2\nprobe_draws = 2\ndraws_per_step = 2\n"
        "[protect]\nsurrogate_steps = 1\nattack_draws = 2\n"
        "[trial]\nsteps = 2\neval_draws = 2\nsamples = 1\nsample_steps = 4\n"
    )
    return tmp_path


def protect_args(ws, out, seed="1"):
    return ["protect", "--config", str(ws / "fast.ini"), "--model", str(ws / "tiny.ckpt"), "--images",
            str(ws / "clean"), "--out", str(out), "--seed", seed, *FAST]


def test_protect_then_eval(workspace, capsys):
    out = workspace / "run"
    assert main(protect_args(workspace, out)) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "protect" and manifest["seed"] == 1
    assert manifest["summary"]["linf_quantized_max"] <= 0.05 + 1e-7
    for name in ("cost_traces.png", "perturbation.png", "embedding.ckpt", "protected/000.png"):
        assert (out / name).exists()

    report = out / "report.json"
    rc = main(["eval", "--config", str(workspace / "fast.ini"), "--clean", str(workspace / "clean"),
               "--protected", str(out / "protected"), "--out", str(report), "--model", str(workspace / "tiny.ckpt"),
               "--embedding", str(out / "embedding.ckpt"), "--heldout", str(workspace / "held"),
               "--template", str(workspace / "template.png"), "--seed", "0"])
    assert rc == EXIT_OK
    body = json.loads(report.read_text())
    assert body["summary"]["linf_max"] <= 0.05 + 1e-7
    assert len(body["trials"]) == 1 and body["attention_energy_clean"] is not None
    assert report.with_suffix(".csv").exists() and report.with_suffix(".psnr.png").exists()


def test_manifest_rerun_is_bit_identical(workspace):
    a = workspace / "a"
    assert main(protect_args(workspace, a)) == EXIT_OK
    b = workspace / "b"
    assert main(["protect", "--manifest", str(a / "manifest.json"), "--out", str(b)]) == EXIT_OK
    for name in ("000.png", "001.png"):
        assert (a / "protected" / name).read_bytes() == (b / "protected" / name).read_bytes()
    assert (a / "embedding.ckpt").read_bytes() == (b / "embedding.ckpt").read_bytes()


def test_verbose_writes_traces(workspace):
    out = workspace / "v"
    assert main(protect_args(workspace, out) + ["--verbose"]) == EXIT_OK
    lines = (out / "traces" / "epoch00.csv").read_text().splitlines()
    assert len(lines) == 1 + 3


def test_output_root_env(workspace, monkeypatch):
    monkeypatch.setenv("ANTIDIFF_OUTPUT_ROOT", str(workspace / "root"))
    assert main(protect_args(workspace, "rel")) == EXIT_OK
    assert (workspace / "root" / "rel" / "manifest.json").exists()


def test_attack_commands(workspace):
    out = workspace / "tune"
    rc = main(["attack-tune", "--config", str(workspace / "fast.ini"), "--model", str(workspace / "tiny.ckpt"),
               "--images", str(workspace / "clean"), "--out", str(out), "--seed", "0",
               "--heldout", str(workspace / "held"), "--template", str(workspace / "template.png")])
    assert rc == EXIT_OK
    assert (out / "model.ckpt").exists() and (out / "gallery.png").exists()
    out = workspace / "edit"
    rc = main(["attack-edit", "--model", str(workspace / "tiny.ckpt"), "--images", str(workspace / "clean"),
               "--out", str(out), "--seed", "0", "--shape", "circle", "--n-steps", "4"])
    assert rc == EXIT_OK
    assert len(json.loads((out / "index.json").read_text())["images"]) == 2


def test_gen_data(tmp_path):
    rc = main(["gen-data", "--out", str(tmp_path / "d"), "--per-identity", "1", "--subjects", "2"])
    assert rc == EXIT_OK
    index = json.loads((tmp_path / "d" / "index.json").read_text())
    assert len(index["subjects"]) == 2
    assert len(list((tmp_path / "d" / "pretrain").glob("*.png"))) == 108


def test_dump_config(capsys):
    assert main(["--dump-config"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "[budget]" in text and "eta = 0.05" in text


def test_exit_codes(workspace, capsys):
    # usage: missing seed, unknown flag, no subcommand
    assert main(["protect", "--model", str(workspace / "tiny.ckpt"), "--images", str(workspace / "clean"),
                 "--out", str(workspace / "o")]) == EXIT_USAGE
    assert main(["protect", "--bogus"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE
    # config
    (workspace / "bad.ini").write_text("[budget]\nnope = 1\n")
    assert main(protect_args(workspace, workspace / "o") + ["--config", str(workspace / "bad.ini")]) == EXIT_CONFIG
    # missing file
    assert main(["protect", "--model", str(workspace / "absent.ckpt"), "--images", str(workspace / "clean"),
                 "--out", str(workspace / "o"), "--seed", "0"]) == EXIT_MISSING
    # unreadable input
    (workspace / "rgba").mkdir()
    Image.new("RGBA", (32, 32)).save(workspace / "rgba" / "x.png")
    assert main(["protect", "--model", str(workspace / "tiny.ckpt"), "--images", str(workspace / "rgba"),
                 "--out", str(workspace / "o"), "--seed", "0"]) == EXIT_INPUT
    (workspace / "junk.ckpt").write_bytes(b"junk")
    assert main(["protect", "--model", str(workspace / "junk.ckpt"), "--images", str(workspace / "clean"),
                 "--out", str(workspace / "o"), "--seed", "0"]) == EXIT_INPUT


def test_divergence_exit_code(workspace):
    (workspace / "hot.ini").write_text("[prompt]\nsteps = 1\nprobe_draws = 1\n[protect]\nsurrogate_lr = 1e30\n")
    rc = main(["protect", "--config", str(workspace / "hot.ini"), "--model", str(workspace / "tiny.ckpt"),
               "--images", str(workspace / "clean"), "--out", str(workspace / "o"), "--seed", "0",
               "--epochs", "2", "--steps", "1"])
    assert rc == EXIT_DIVERGENCE
