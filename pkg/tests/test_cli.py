import subprocess
import sys

import pytest

from hystar.cli import main
from hystar.config import known_keys, load_config, parse_pairs, resolved_lines
from hystar.errors import ConfigError

SMALL = """\
# tiny run for CLI tests
seed = 0
data.n_classes = 4
data.samples_per_class_per_style = 5
encoder.patch_size = 8
encoder.d_model = 16
encoder.n_heads = 2
encoder.n_layers = 2
encoder.injected_layers = 1
encoder.embed_dim = 8
encoder.d_style = 8
train.batch_size = 8
train.epochs = 2
train.eval_every = 1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL)
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    return root, cfg


# -- config -------------------------------------------------------------------

def test_defaults_match_library_defaults():
    cfg = load_config(None)
    assert cfg.loss.gamma == 80.0 and cfg.loss.lambda_ == 1.0 and cfg.loss.sinkhorn_iters == 50
    assert cfg.train.batch_size == 48 and cfg.encoder.injected_layers == [2, 4, 6]
    assert cfg.data.n_classes == 20 and cfg.data.samples_per_class_per_style == 20


def test_comments_and_lists():
    cfg = load_config(None, ["encoder.injected_layers = 1,3  # two layers", "loss.lambda=2.5"])
    assert cfg.encoder.injected_layers == [1, 3] and cfg.loss.lambda_ == 2.5


def test_seed_drives_data_unless_overridden():
    assert load_config(None, ["seed=4"]).data.seed == 4
    assert load_config(None, ["seed=4", "data.seed=1"]).data.seed == 1


@pytest.mark.parametrize("line, key", [("foo=1", "foo"), ("loss.gama=3", "loss.gama"), ("train.loss_config=x", "train.loss_config")])
def test_unknown_key_named(line, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        load_config(None, [line])


@pytest.mark.parametrize("line", ["train.epochs=three", "loss.tau=-1", "train.single_style_batches=maybe", "novalue"])
def test_bad_values(line):
    with pytest.raises(ConfigError):
        load_config(None, [line])


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError):
        parse_pairs("seed=1\nseed=2\n")


def test_resolved_config_round_trips():
    cfg = load_config(None, ["loss.hard_k=3", "data.holdout_styles=art", "train.lr_hyper=1e-3"])
    again = load_config(None, resolved_lines(cfg))
    assert again == cfg
    assert [l.split(" = ")[0] for l in resolved_lines(cfg)] == known_keys()


# -- subcommands --------------------------------------------------------------

def test_gen_data_counts_and_determinism(workspace, tmp_path, capsys):
    root, cfg = workspace
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    assert "80 items" in capsys.readouterr().out
    for f in sorted((root / "data").iterdir()):
        assert f.read_bytes() == (tmp_path / "again" / f.name).read_bytes()


def test_gen_data_unknown_key_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("foo=1\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 2
    assert "foo" in capsys.readouterr().err


def test_missing_dataset_exit_2(workspace, tmp_path):
    _, cfg = workspace
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2


def test_usage_error_exit_2():
    assert main(["train"]) == 2
    assert main(["no-such-command"]) == 2


def test_train_then_eval_reproduces_final_row(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(out)]) == 0
    for name in ("metrics.csv", "model.hyst", "resolved.cfg"):
        assert (out / name).exists()
    ev = tmp_path / "eval"
    assert main(["eval", "--config", str(cfg), "--data", str(root / "data"), "--out", str(ev),
                 "--checkpoint", str(out / "model.hyst")]) == 0
    train_rows = (out / "metrics.csv").read_text().splitlines()
    eval_rows = (ev / "metrics.csv").read_text().splitlines()
    final = [r for r in train_rows[1:] if r.split(",")[3] == "2"]
    assert eval_rows[1:] == final

    again = tmp_path / "run2"
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(again)]) == 0
    for name in ("metrics.csv", "model.hyst", "resolved.cfg"):
        assert (out / name).read_bytes() == (again / name).read_bytes()


def test_train_numeric_abort_exit_3(workspace, tmp_path):
    root, cfg = workspace
    rc = main(["train", "--config", str(cfg), "--set", "loss.tau=1e-300", "--data", str(root / "data"),
               "--out", str(tmp_path / "o")])
    assert rc == 3
    assert (tmp_path / "o" / "abort_state.hyst").exists()


def test_export_embeddings(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "run"
    main(["train", "--config", str(cfg), "--set", "train.epochs=1", "--data", str(root / "data"), "--out", str(out)])
    assert main(["export-embeddings", "--config", str(cfg), "--set", "train.epochs=1", "--data", str(root / "data"),
                 "--out", str(out), "--checkpoint", str(out / "model.hyst")]) == 0
    lines = (out / "embeddings.csv").read_text().splitlines()
    assert lines[0].startswith("item_id,class_id,style_id,e0") and len(lines) == 81


def test_ablate_emits_four_configurations(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(cfg), "--set", "train.epochs=1", "--seeds", "0",
                 "--data", str(root / "data"), "--out", str(out)]) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[0] == "config_label,seed,sketch,lowres,art,mean"
    assert [l.split(",")[0] for l in lines[1:]] == ["frozen", "static_only+infonce", "hybrid+infonce", "hybrid+stylence"]


def test_sweep_default_gamma_grid(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "sw"
    assert main(["sweep", "--param", "gamma", "--config", str(cfg), "--set", "train.epochs=1",
                 "--data", str(root / "data"), "--out", str(out)]) == 0
    labels = [l.split(",")[0] for l in (out / "sweep_gamma.csv").read_text().splitlines()[1:]]
    assert labels == [f"gamma={g}" for g in (1, 10, 30, 50, 80, 120, 200, 500)]


def test_gradcheck_scopes_pass(capsys):
    for scope, threshold in (("loss", "1e-05"), ("layer", "1e-05"), ("end2end", "0.0001")):
        assert main(["gradcheck", "--scope", scope]) == 0
        assert f"threshold {threshold}" in capsys.readouterr().out


def test_gradcheck_corrupt_adjoint_fails(capsys):
    assert main(["gradcheck", "--scope", "layer", "--corrupt-adjoint"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_sinkhorn_demo_n2(tmp_path, capsys):
    assert main(["sinkhorn-demo", "--n", "2", "--out", str(tmp_path)]) == 0
    assert "[[0.0, 1.0], [1.0, 0.0]]" in capsys.readouterr().out
    assert (tmp_path / "T.csv").read_text() == "0,1\n1,0\n"


def test_sinkhorn_demo_schedule_non_increasing(tmp_path, capsys):
    assert main(["sinkhorn-demo", "--n", "16", "--out", str(tmp_path)]) == 0
    devs = [float(l.rsplit(" ", 1)[1]) for l in capsys.readouterr().out.splitlines() if l.startswith("iter")]
    assert len(devs) == 5
    assert all(b <= a for a, b in zip(devs, devs[1:]))


def test_sinkhorn_demo_small_n_exit_2(tmp_path):
    assert main(["sinkhorn-demo", "--n", "1", "--out", str(tmp_path)]) == 2


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "hystar.cli", "sinkhorn-demo", "--n", "1"], capture_output=True, text=True)
    assert proc.returncode == 2
