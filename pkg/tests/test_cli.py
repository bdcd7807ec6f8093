import subprocess
import sys

import numpy as np
import pytest

from ftdflow.cli import main
from ftdflow.config import KEYS, Config
from ftdflow.errors import ConfigError
from ftdflow.models import Checkpoint, MlpField, save_model

SMALL = ["--set", "teacher.iters=40", "--set", "model.hidden=16,16", "--set", "degrade.shrink=0.5",
         "--set", "degrade.noise=0.05", "--set", "pairs.steps=5", "--set", "distill.iters=20",
         "--set", "generate.count=50", "--set", "generate.steps=5", "--set", "eval.projections=16"]


def run(sub, out, *extra):
    return main([sub, "--out", str(out), *SMALL, *extra])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    t = root / "teacher"
    assert run("train-teacher", t) == 0
    teacher = str(t / "teacher.ftdm")
    assert run("gen-pairs", root / "pairs", "--set", f"in.teacher={teacher}", "--set", "pairs.count=64") == 0
    assert run("gen-pairs", root / "holdout", "--set", f"in.teacher={teacher}", "--set", "pairs.count=32",
               "--set", "pairs.start=64") == 0
    assert run("distill", root / "student", "--set", f"in.dataset={root / 'pairs' / 'pairs.ftdp'}") == 0
    student = str(root / "student" / "student.ftdm")
    assert run("generate", root / "gen", "--set", f"in.teacher={teacher}") == 0
    assert run("restore", root / "restore", "--set", f"in.student={student}",
               "--set", f"in.inputs={root / 'holdout' / 'pairs.ftdp'}") == 0
    assert run("eval", root / "eval", "--set", f"in.student={student}", "--set", f"in.teacher={teacher}",
               "--set", f"in.holdout={root / 'holdout' / 'pairs.ftdp'}") == 0
    plots = ",".join(str(p) for p in (root / "eval" / "report.txt", root / "gen" / "samples.npy",
                                       root / "student" / "loss.log"))
    assert run("plot", root / "plot", "--set", f"in.plot={plots}") == 0
    return root


def test_pipeline_artifacts(pipeline):
    r = pipeline
    for rel in ("teacher/teacher.ftdm", "teacher/loss.log", "teacher/train.manifest", "pairs/pairs.ftdp",
                "pairs/pairs.ftdp.manifest", "student/student.ftdm", "gen/samples.npy", "restore/restored.npy",
                "eval/report.txt", "eval/report.csv"):
        assert (r / rel).stat().st_size > 0, rel
    for sub in ("teacher", "pairs", "student", "gen", "restore", "eval", "plot"):
        assert (r / sub / "run.manifest").read_text().startswith("# subcommand=")
    assert list((r / "plot").glob("*.svg")) and list((r / "plot").glob("*.csv"))
    assert np.load(r / "gen" / "samples.npy").shape == (50, 2)
    assert np.load(r / "restore" / "restored.npy").shape == (32, 2)
    assert Checkpoint.load(r / "student" / "student.ftdm").header["t_lr"] == 0.25
    assert "mse=" in (r / "eval" / "report.txt").read_text()
    assert "dataset_digest=" in (r / "pairs" / "pairs.ftdp.manifest").read_text()


def test_manifest_driven_regeneration_is_bit_identical(pipeline, tmp_path):
    for sub, artifact in (("teacher", "teacher.ftdm"), ("pairs", "pairs.ftdp"), ("student", "student.ftdm"),
                          ("eval", "report.txt")):
        manifest = pipeline / sub / "run.manifest"
        name = manifest.read_text().splitlines()[0].split("=", 1)[1]
        assert main([name, "--config", str(manifest), "--out", str(tmp_path / sub)]) == 0
        assert (tmp_path / sub / artifact).read_bytes() == (pipeline / sub / artifact).read_bytes(), sub


def test_restore_with_zero_student_returns_inputs(pipeline, tmp_path):
    # a freshly initialized model has a zero output layer, so G(x_L) = x_L
    save_model(MlpField((2,), hidden=(16,)), tmp_path / "fresh.ftdm", t_lr=0.25)
    inputs = np.random.default_rng(0).normal(size=(7, 2)).astype(np.float32)
    np.save(tmp_path / "in.npy", inputs)
    assert run("restore", tmp_path / "r", "--set", f"in.student={tmp_path / 'fresh.ftdm'}",
               "--set", f"in.inputs={tmp_path / 'in.npy'}") == 0
    assert np.array_equal(np.load(tmp_path / "r" / "restored.npy"), inputs)


def test_unknown_key_fails_naming_the_key(tmp_path, capsys):
    code = main(["train-teacher", "--out", str(tmp_path), "--set", "teacher.iterz=5"])
    assert code == 2
    assert "teacher.iterz" in capsys.readouterr().err


@pytest.mark.parametrize("args, code", [
    (["distill", "--set", "in.dataset=/no/such/file.ftdp"], 3),
    (["eval"], 2),
    (["train-teacher", "--set", "dist.scale=-1", "--set", "teacher.iters=1"], 7),
])
def test_error_exit_codes(tmp_path, args, code, capsys):
    assert main([*args, "--out", str(tmp_path)]) == code
    err = capsys.readouterr().err
    assert err.startswith(f"ftd {args[0]}: error:") and err.count("\n") == 1


def test_corrupt_dataset_exit_code(tmp_path):
    (tmp_path / "bad.ftdp").write_bytes(b"FTDP garbage")
    assert main(["distill", "--out", str(tmp_path / "o"), "--set", f"in.dataset={tmp_path / 'bad.ftdp'}"]) == 4


def test_seed_flag_and_precedence(tmp_path):
    (tmp_path / "c.cfg").write_text("# comment\n\nseed=3\nteacher.iters=7\n")
    out = tmp_path / "o"
    assert main(["train-teacher", "--config", str(tmp_path / "c.cfg"), "--set", "teacher.iters=2",
                 "--set", "model.hidden=4", "--seed", "9", "--out", str(out)]) == 0
    cfg = Config.load(out / "run.manifest")
    assert cfg["seed"] == 9 and cfg["teacher.iters"] == 2


def test_default_out_dir_uses_env(tmp_path, monkeypatch):
    monkeypatch.setenv("FTD_OUT", str(tmp_path))
    assert main(["train-teacher", "--set", "teacher.iters=1", "--set", "model.hidden=4"]) == 0
    assert (tmp_path / "train-teacher" / "teacher.ftdm").exists()


def test_config_parse_errors():
    with pytest.raises(ConfigError):
        Config.parse("seed 3\n")
    with pytest.raises(ConfigError):
        Config.parse("seed=abc\n")
    cfg = Config.parse("dist.means=1,2;3,4\n")
    assert cfg["dist.means"] == ((1.0, 2.0), (3.0, 4.0))
    assert Config.parse(cfg.to_text()).digest() == cfg.digest()


def test_config_builders_defaults():
    cfg = Config()
    assert cfg.teacher((2,)).batch == 64 and cfg.distill((1, 16, 16)).batch == 16
    assert cfg.extractor((2,)) is None
    assert cfg.model((2,)).family == "mlp"
    cfg.set("model.family", "transformer")
    cfg.set("model.dim", "8")
    cfg.set("model.heads", "2")
    assert cfg.model((1, 8, 8)).family == "transformer"


def test_list_keys(capsys):
    assert main(["--list-keys"]) == 0
    out = capsys.readouterr().out
    assert out.count("\n") == len(KEYS) and "distill.t_lr=0.25" in out


def test_console_script_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ftdflow.cli", "plot", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "in.plot" in proc.stderr
