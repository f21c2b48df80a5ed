import numpy as np
import pytest
from click.testing import CliRunner

from mcaer.cli import cli, main
from mcaer.constants import CLASS_NAMES
from mcaer.imageio import load_pgm, save_image

SMALL_CONFIG = """\
model:
  width_divisor: 8
prep:
  face_size: 32
  context_pad_h: 96
  context_pad_w: 168
  body_size: 64
train:
  epochs: 1
  batch_size: 7
  precision: float64
"""


def invoke(*args):
    return CliRunner().invoke(cli, [str(arg) for arg in args])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert invoke("synth", "--out", root / "data", "--n", 2, "--seed", 4).exit_code == 0
    config = root / "small.yaml"
    config.write_text(SMALL_CONFIG)
    result = invoke("train", "--data", root / "data", "--config", config, "--out", root / "model.ckpt")
    assert result.exit_code == 0, result.output
    return root


def scene(root, name="happy"):
    return root / "data" / name / "0000.ppm", root / "data" / name / "0000.m0.pgm"


def table_values(output, names):
    values = {}
    for line in output.splitlines():
        parts = line.split()
        if len(parts) == 2 and parts[0] in names:
            values[parts[0]] = float(parts[1].rstrip("%"))
    return values


def test_synth(tmp_path):
    result = invoke("synth", "--out", tmp_path, "--n", 1)
    assert result.exit_code == 0
    assert len(list(tmp_path.glob("*/*.ppm"))) == 7
    assert (tmp_path / "annotations.jsonl").exists()
    assert invoke("synth", "--out", tmp_path, "--n", 0).exit_code == 1


def test_cache_is_idempotent(synthetic, tmp_path):
    first, second = tmp_path / "first.jsonl", tmp_path / "second.jsonl"
    assert invoke("cache", "--data", synthetic.root, "--out", first, "--strict").exit_code == 0
    result = invoke("cache", "--data", synthetic.root, "--annotations", first, "--out", second, "--strict")
    assert result.exit_code == 0
    assert first.read_bytes() == second.read_bytes()


def test_strict_cache_failure(tmp_path):
    for name in CLASS_NAMES:
        save_image(np.zeros((6, 6, 3)), tmp_path / name / "0.ppm")
    result = invoke("cache", "--data", tmp_path, "--out", tmp_path / "out.jsonl", "--strict")
    assert result.exit_code == 3
    assert invoke("cache", "--data", tmp_path, "--out", tmp_path / "out.jsonl", "--lenient").exit_code == 0


def test_train_writes_checkpoint_and_history(trained):
    assert (trained / "model.ckpt").exists()
    lines = (trained / "model.history").read_text().splitlines()
    assert len(lines) == 1
    assert lines[0].startswith("0 ")


def test_train_seed_reproduces_history(trained):
    config = trained / "small.yaml"
    histories = []
    for run in ("first", "second"):
        out = trained / f"{run}.ckpt"
        result = invoke("train", "--data", trained / "data", "--config", config, "--out", out, "--seed", 5)
        assert result.exit_code == 0, result.output
        histories.append((trained / f"{run}.history").read_bytes())
    assert histories[0] == histories[1]


def test_eval(trained):
    result = invoke("eval", "--ckpt", trained / "model.ckpt", "--data", trained / "data", "--split", "all")
    assert result.exit_code == 0, result.output
    assert "over 14 samples" in result.output
    assert set(table_values(result.output, CLASS_NAMES)) == set(CLASS_NAMES)


def test_eval_missing_checkpoint(trained):
    result = invoke("eval", "--ckpt", trained / "missing.ckpt", "--data", trained / "data")
    assert result.exit_code == 2


def test_infer(trained):
    image, mask = scene(trained)
    result = invoke("infer", "--ckpt", trained / "model.ckpt", "--image", image, "--mask", mask)
    assert result.exit_code == 0, result.output
    assert "prediction" in result.output
    probabilities = table_values(result.output, CLASS_NAMES)
    assert len(probabilities) == 7
    assert sum(probabilities.values()) == pytest.approx(1.0, abs=1e-5)
    weights = table_values(result.output, ("face", "context", "body"))
    assert sum(weights.values()) == pytest.approx(1.0, abs=1e-5)


def test_infer_missing_mask_is_strict(trained):
    image, _ = scene(trained)
    assert invoke("infer", "--ckpt", trained / "model.ckpt", "--image", image).exit_code == 5
    result = invoke("infer", "--ckpt", trained / "model.ckpt", "--image", image, "--lenient")
    assert result.exit_code == 0
    assert invoke("infer", "--ckpt", trained / "model.ckpt", "--image", image, "--face", "1,2,0,4").exit_code == 1


def test_infer_without_face_annotation(trained, tmp_path):
    image, mask = scene(trained)
    bare = tmp_path / "bare.ppm"
    bare.write_bytes(image.read_bytes())
    args = ["infer", "--ckpt", trained / "model.ckpt", "--image", bare, "--mask", mask]
    assert invoke(*args).exit_code == 2
    result = invoke(*args, "--lenient")
    assert result.exit_code == 0, result.output
    assert "no-face" in result.output


def test_gradcam(trained, tmp_path):
    image, mask = scene(trained, "sad")
    out = tmp_path / "cam.pgm"
    args = ["gradcam", "--ckpt", trained / "model.ckpt", "--image", image, "--mask", mask, "--out", out]
    result = invoke(*args, "--class", "sad")
    assert result.exit_code == 0, result.output
    assert load_pgm(out).shape == (32, 56)
    assert invoke(*args, "--class", "bored").exit_code == 1


def test_selftest_invariants():
    result = invoke("selftest", "--suite", "invariant")
    assert result.exit_code == 0, result.output
    assert "checks passed" in result.output


def test_selftest_detects_a_broken_gradient():
    result = invoke("selftest", "--suite", "gradient", "--seeds", 1, "--perturb-gradient", 1.0)
    assert result.exit_code == 1
    assert "FAIL" in result.output


def test_main_returns_exit_codes(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--n", "0"]) == 1
    assert main(["no-such-command"]) == 1
