import csv
import json
from pathlib import Path

import numpy as np
import pytest

from mhsanet import cli
from mhsanet import config as config_mod
from mhsanet.data_io import load_container, save_container
from mhsanet.errors import ConfigError
from mhsanet.model import MHSAModel
from mhsanet.pipeline import STANDARD_GRIDS, parse_values

REFERENCE = Path(__file__).resolve().parents[1] / "configs" / "desk.toml"

TINY = """
seed = 1
[backbone]
Hf = 3
Wf = 2
C = 8
D = 4
[branch]
K = 3
[sampler]
P_ids = 3
K_inst = 2
[schedule]
epochs = 2
warmup_epochs = 1
decay = []
[data]
n_ids = 6
samples_per_id = 4
n_test_ids = 3
query_per_id = 2
gallery_per_id = 3
"""


def test_defaults_are_operating_point():
    cfg = config_mod.RunConfig()
    assert cfg.branch.K == 8
    l = cfg.loss
    assert (l.lambda1, l.lambda2, l.lambda3, l.gamma, l.margin) == (1e-4, 1.0, 1e-3, 1e-3, 3.0)


def test_reference_file_matches_defaults():
    assert config_mod.load(REFERENCE) == config_mod.RunConfig()


def test_dump_load_round_trip():
    cfg = config_mod.loads(TINY)
    assert config_mod.loads(config_mod.dumps(cfg)) == cfg


@pytest.mark.parametrize("text", [
    "bogus = 1",
    "[loss]\nlambda4 = 1.0",
    "[data]\nC = 16",  # geometry belongs to [backbone]
    "[branch]\nfusion = 'max'",
    "[loss]\ngamma = 0",
    "[eval]\nvariant = 'partial'",
    "[branch]\nK = 30",
    "seed = -1",
    "[schedule]\ndecay = [[1]]",
    "[backbone\n",
])
def test_invalid_configs_rejected(text):
    with pytest.raises(ConfigError):
        config_mod.loads(text)


def test_replace_section_values():
    cfg = config_mod.RunConfig().replace(loss={"lambda2": 0.0}, branch={"K": 4})
    assert cfg.loss.lambda2 == 0.0 and cfg.branch.K == 4


def test_sweep_value_parsing():
    assert parse_values("K", "1, 2,4") == [1, 2, 4]
    assert parse_values("lambda1", "1e-6,1e-1") == [1e-6, 1e-1]
    with pytest.raises(ConfigError):
        parse_values("K", "two")
    with pytest.raises(ConfigError):
        parse_values("beta", "1")


def test_standard_grids_cover_ranges():
    assert STANDARD_GRIDS["lambda1"][0] == 1e-6 and STANDARD_GRIDS["lambda1"][-1] == 1e-1
    assert STANDARD_GRIDS["lambda3"][0] == 1e-5 and STANDARD_GRIDS["lambda3"][-1] == 1.0
    assert STANDARD_GRIDS["gamma"][0] == 1e-4 and STANDARD_GRIDS["gamma"][-1] == 1.0
    assert STANDARD_GRIDS["lambda2"] == [1e-2, 1e-1, 1.0, 1e1, 1e2]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def test_gen_data_manifest_and_force(workspace, capsys):
    man = json.loads((workspace / "data" / "manifest.json").read_text())
    assert man["counts"] == {"train": 24, "query": 6, "gallery": 9}
    cfg = str(workspace / "tiny.toml")
    assert cli.main(["gen-data", "--config", cfg, "--out", str(workspace / "data")]) == 2
    before = (workspace / "data" / "train.mhsa").read_bytes()
    assert cli.main(["gen-data", "--config", cfg, "--out", str(workspace / "data"), "--force"]) == 0
    assert (workspace / "data" / "train.mhsa").read_bytes() == before


def test_train_outputs(workspace):
    lines = (workspace / "run" / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("step,epoch,lr") and len(lines) > 1
    assert "meta/config_json" in load_container(workspace / "run" / "checkpoint.mhsa")


def test_eval_is_repeatable_and_variants(workspace, capsys):
    args = ["eval", "--checkpoint", str(workspace / "run" / "checkpoint.mhsa"), "--data", str(workspace / "data")]
    assert cli.main(args + ["--variant", "local", "--out", str(workspace / "e1")]) == 0
    assert cli.main(args + ["--variant", "local", "--out", str(workspace / "e2")]) == 0
    a = (workspace / "e1" / "eval_local_saffm.csv").read_text()
    assert a == (workspace / "e2" / "eval_local_saffm.csv").read_text()
    assert cli.main(args + ["--variant", "full", "--fusion", "concat", "--out", str(workspace / "e3")]) == 0
    out = capsys.readouterr().out
    assert "Rank-1" in out and "Rank-10" in out and "mAP" in out


def test_eval_dagger_on_gfb_checkpoint_warns(workspace, caplog):
    args = ["eval", "--checkpoint", str(workspace / "run" / "checkpoint.mhsa"), "--data", str(workspace / "data"),
            "--variant", "dagger", "--out", str(workspace / "e4")]
    assert cli.main(args) == 0
    assert any("evaluating as 'full'" in r.message for r in caplog.records)


def test_eval_missing_checkpoint_is_exit_2(workspace):
    assert cli.main(["eval", "--checkpoint", str(workspace / "nope.mhsa"), "--data", str(workspace / "data")]) == 2


def test_eval_corrupted_checkpoint_is_exit_2(workspace, tmp_path):
    buf = bytearray((workspace / "run" / "checkpoint.mhsa").read_bytes())
    buf[100] ^= 0xFF
    bad = tmp_path / "bad.mhsa"
    bad.write_bytes(bytes(buf))
    assert cli.main(["eval", "--checkpoint", str(bad), "--data", str(workspace / "data")]) == 2


def test_export_attn(workspace, capsys, tmp_path):
    ck = str(workspace / "run" / "checkpoint.mhsa")
    assert cli.main(["export-attn", "--checkpoint", ck, "--data", str(workspace / "data"), "--sample", "1",
                     "--out", str(tmp_path / "a")]) == 0
    assert len(list((tmp_path / "a").glob("*.pgm"))) == 3
    assert "occlusion score" in capsys.readouterr().out
    assert cli.main(["export-attn", "--checkpoint", ck, "--data", str(workspace / "data"), "--sample", "99",
                     "--out", str(tmp_path / "b")]) == 2


def test_export_attn_uniform_checkpoint_is_flat(workspace, tmp_path):
    model = MHSAModel.from_state(load_container(workspace / "run" / "checkpoint.mhsa"))
    model.params["w2"].data[:] = 0.0
    save_container(tmp_path / "u.mhsa", model.state())
    assert cli.main(["export-attn", "--checkpoint", str(tmp_path / "u.mhsa"), "--data", str(workspace / "data"),
                     "--sample", "0", "--out", str(tmp_path / "u")]) == 0
    from mhsanet.data_io import read_pgm
    assert all(np.all(read_pgm(p) == 128) for p in (tmp_path / "u").glob("*.pgm"))


def test_sweep_rows_determinism_and_failures(workspace, tmp_path):
    base = ["sweep", "--param", "K", "--values", "1,2,3,40", "--config", str(workspace / "tiny.toml"),
            "--data", str(workspace / "data")]
    assert cli.main(base + ["--out", str(tmp_path / "s1")]) == 0
    assert cli.main(base + ["--out", str(tmp_path / "s2")]) == 0
    text = (tmp_path / "s1" / "sweep_K.csv").read_text()
    assert text == (tmp_path / "s2" / "sweep_K.csv").read_text()
    rows = list(csv.DictReader(text.splitlines()))
    assert [r["value"] for r in rows] == ["1", "2", "3", "40"]
    assert rows[-1]["rank1"] == "nan" and rows[0]["rank1"] != "nan"
    man = json.loads((tmp_path / "s1" / "manifest.json").read_text())
    assert list(man["failures"]) == ["40"]


def test_train_nan_abort_exit_code(workspace, tmp_path, monkeypatch):
    from mhsanet import training

    real = training.train
    monkeypatch.setattr(cli, "train", lambda *a, **k: real(*a, **k, nan_hook=lambda s, v: float("nan")))
    code = cli.main(["train", "--config", str(workspace / "tiny.toml"), "--data", str(workspace / "data"),
                     "--out", str(tmp_path / "r")])
    assert code == 3 and (tmp_path / "r" / "checkpoint.mhsa").exists()


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck", "--n-seeds", "1"]) == 0
    out = capsys.readouterr().out
    for name in ("matmul", "softmax_rows", "layer_norm", "ihtl", "total_loss"):
        assert name in out
    assert cli.main(["gradcheck", "--n-seeds", "1", "--corrupt", "matmul"]) == 4
    assert "matmul" in capsys.readouterr().err


def test_invalid_config_exit_code(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[loss]\nlambda2 = -1\n")
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 2
