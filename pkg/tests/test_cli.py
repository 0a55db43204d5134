import json

import pytest

from baris.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "d"
    assert main(["gen-data", "--out", str(root), "--count", "20", "--seed", "100"]) == 0
    return root


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 1


def test_gen_data_rerun_is_byte_identical(tmp_path, capsys):
    a = tmp_path / "a"
    assert run(capsys, "gen-data", "--out", str(a), "--count", "4", "--seed", "9", "--haze", "0,0.2")[0] == 0
    first = {p: p.read_bytes() for p in a.rglob("*") if p.is_file()}
    assert run(capsys, "gen-data", "--out", str(a), "--count", "4", "--seed", "9", "--haze", "0,0.2")[0] == 0
    assert first == {p: p.read_bytes() for p in a.rglob("*") if p.is_file()}


def test_gen_data_bad_range(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--out", str(tmp_path), "--count", "1", "--haze", "0.5,0.1"])
    assert exc.value.code == 1


def test_train_smoke_and_evaluate(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    code, _, _ = run(capsys, "train", "--data", str(dataset), "--out", str(out), "--epochs", "1", "--lr", "0",
                     "--set", "backbone.widths=8,8,16,16", "--set", "decoder.channels=8")
    assert code == 0
    assert (out / "metrics.jsonl").exists() and (out / "resolved.json").exists()
    code, stdout, _ = run(capsys, "evaluate", "--checkpoint", str(out / "checkpoints" / "final"))
    assert code == 0 and set(json.loads(stdout)) == {"mask_iou", "boundary_f"}


def test_lambda_zero_cli_equivalence(dataset, tmp_path, capsys):
    common = ["--data", str(dataset), "--epochs", "1", "--set", "train.max_steps=3",
              "--set", "backbone.widths=8,8,16,16", "--set", "decoder.channels=8"]
    assert run(capsys, "train", "--out", str(tmp_path / "a"), "--loss", "ce_only", *common)[0] == 0
    assert run(capsys, "train", "--out", str(tmp_path / "b"), "--loss", "ce_plus_bace", "--bace-lambda", "0",
               *common)[0] == 0
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_freeze_without_era_is_error(dataset, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", str(dataset), "--out", str(tmp_path / "r"), "--freeze", "era")
    assert code == 1 and "era" in err


def test_config_file_errors_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[train]\nepochs = 1\nlr = 3\n")
    code, _, err = run(capsys, "train", "--config", str(bad), "--out", str(tmp_path / "r"))
    assert code == 1 and "bad.cfg:3" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_two(dataset, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", str(dataset), "--out", str(tmp_path / "r"), "--epochs", "1",
                       "--lr", "1e30", "--set", "backbone.widths=8,8,16,16", "--set", "decoder.channels=8")
    assert code == 2 and "diverged" in err


def test_grad_check_bace_stable(capsys):
    code, first, _ = run(capsys, "grad-check", "--module", "bace", "--seeds", "3", "--seed", "4")
    assert code == 0 and "FAIL" not in first
    _, second, _ = run(capsys, "grad-check", "--module", "bace", "--seeds", "3", "--seed", "4")
    strip = lambda s: [ln for ln in s.splitlines() if "checks passed" not in ln]  # noqa: E731
    assert strip(first) == strip(second)


def test_param_audit(tmp_path, capsys):
    code, out, _ = run(capsys, "param-audit", "--backbone", "swin-b-ref", "--scheme", "era")
    assert code == 0 and "4.67%" in out
    code, out, _ = run(capsys, "param-audit", "--backbone", "toy", "--scheme", "full", "--json")
    assert json.loads(out[out.index("{"):])["rows"][0]["fraction"] == 1.0
    fr = {}
    for g in (2, 8):
        run(capsys, "param-audit", "--scheme", "era", "--gamma", str(g), "--out", str(tmp_path / str(g)))
        fr[g] = json.loads((tmp_path / str(g) / "param_audit.json").read_text())["rows"][0]["fraction"]
    assert fr[8] < fr[2]
    assert run(capsys, "param-audit", "--backbone", "resnet")[0] == 1
