"""Config file parsing, overrides, and the command-line surface."""
import numpy as np
import pytest

from cdpm import cli, config, data, tensorio
from cdpm.config import ConfigError, apply_assignments, load_config, save_config


def test_defaults():
    cfg = config.Config()
    assert cfg.parts == 6 and cfg.batch_size == 48
    assert cfg.lambda1 == 1.0 and cfg.lambda2 == 1.0
    assert cfg.margin == 0.4
    assert cfg.identities_per_batch == 6 and cfg.images_per_identity == 8
    assert cfg.translation_copies == 5
    assert cfg.selection_threshold == 0.60  # market profile default


def test_threshold_profile_rules():
    assert config.Config(profile="other").selection_threshold == 0.35
    assert config.Config(profile="market").selection_threshold == 0.60
    assert config.Config(profile="other", threshold=0.5).selection_threshold == 0.5


def test_parse_config_text_and_file(tmp_path):
    text = """
# a comment
data.root = /data/bench
train.seed = 9
model.mgf = true
loss.lambda2 = 0.5   # trailing comment
select.threshold = 0.35
"""
    path = tmp_path / "run.conf"
    path.write_text(text)
    cfg = load_config(path)
    assert cfg.data_root == "/data/bench"
    assert cfg.seed == 9
    assert cfg.mgf is True
    assert cfg.lambda2 == 0.5
    assert cfg.selection_threshold == 0.35


def test_overrides_win_over_file_and_seed_wins_over_all(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("train.seed = 1\nloss.margin = 0.3\n")
    cfg = load_config(path, {"loss.margin": "0.7", "train.seed": "2"}, seed=5)
    assert cfg.margin == 0.7
    assert cfg.seed == 5


def test_unknown_key_and_bad_value_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        apply_assignments(config.Config(), {"no.such": "1"})
    with pytest.raises(ConfigError, match="cannot parse"):
        apply_assignments(config.Config(), {"train.seed": "abc"})
    with pytest.raises(ConfigError):
        load_config(None, {"model.mgf": "maybe"})


def test_save_config_roundtrip(tmp_path):
    cfg = config.Config(data_root="/x", seed=4, mgf=True, threshold=0.35,
                        epoch_scale=0.25)
    path = tmp_path / "out.conf"
    save_config(path, cfg)
    again = load_config(path)
    assert again == cfg


def test_config_factories():
    cfg = config.Config(mgf=True, lambda1=0.5)
    mc = cfg.model_config(classes=7)
    assert mc.classes == 7 and mc.with_mgf
    assert cfg.loss_weights().lambda1 == 0.5
    assert cfg.triplet_config().batch_size == 48
    assert cfg.augmentation_config().translation_copies == 5


# ---------------------------------------------------------------------------
# CLI


def test_cli_usage_errors():
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["no-such-command"]) == cli.EXIT_USAGE
    assert cli.main(["evaluate"]) == cli.EXIT_USAGE  # missing required args
    assert cli.main(
        ["synth-data", "--out", "/tmp/x", "--set", "badpair"]
    ) == cli.EXIT_USAGE
    assert cli.main(
        ["synth-data", "--out", "/tmp/x", "--set", "no.such=1"]
    ) == cli.EXIT_USAGE


def test_cli_synth_data_and_dataset_roundtrip(tmp_path, capsys):
    out = tmp_path / "bench"
    rc = cli.main([
        "synth-data", "--out", str(out), "--identities", "3",
        "--images-per-id", "2", "--test-identities", "2",
        "--test-images-per-id", "3", "--seed", "7",
    ])
    assert rc == cli.EXIT_OK
    index = data.load_dataset(out)
    assert index.class_count == 3
    assert "train classes" in capsys.readouterr().out


def test_cli_evaluate_on_descriptor_dumps(tmp_path, capsys):
    rng = np.random.default_rng(0)
    centers = {1: rng.standard_normal(6), 2: rng.standard_normal(6) + 3}
    queries = {f"{i:04d}_c1_0000": centers[i] for i in (1, 2)}
    gallery = {f"{i:04d}_c2_{j:04d}": centers[i] + 0.01 * rng.standard_normal(6)
               for i in (1, 2) for j in range(2)}
    qpath, gpath = tmp_path / "q.bin", tmp_path / "g.bin"
    tensorio.write_descriptors(qpath, queries)
    tensorio.write_descriptors(gpath, gallery)
    report = tmp_path / "report.csv"
    rc = cli.main(["evaluate", "--query", str(qpath), "--gallery", str(gpath),
                   "--out", str(report)])
    assert rc == cli.EXIT_OK
    text = report.read_text()
    assert text.startswith("metric,value")
    assert "rank1,1.000000" in text
    assert "rank-1 1.0000" in capsys.readouterr().out


def test_cli_evaluate_data_error_exit_code(tmp_path):
    missing = tmp_path / "nope.bin"
    rc = cli.main(["evaluate", "--query", str(missing), "--gallery", str(missing),
                   "--out", str(tmp_path / "r.csv")])
    assert rc == cli.EXIT_DATA


def test_cli_train_extract_align_evaluate_pipeline(tmp_path, capsys):
    bench = tmp_path / "bench"
    assert cli.main([
        "synth-data", "--out", str(bench), "--identities", "6",
        "--images-per-id", "4", "--test-identities", "3",
        "--test-images-per-id", "3", "--seed", "3",
    ]) == cli.EXIT_OK
    run = tmp_path / "run"
    rc = cli.main([
        "train", "--data", str(bench), "--out", str(run), "--seed", "3",
        "--set", "train.epoch_scale=0.02",
        "--set", "train.batch_size=6",
        "--set", "augment.translation_copies=1",
        "--set", "model.feature_dim=16",
        "--set", "model.holistic_dim=16",
    ])
    assert rc == cli.EXIT_OK
    final = run / "final.cdpm"
    assert final.exists() and (run / "config.used").exists()

    qdump = tmp_path / "q.bin"
    assert cli.main([
        "extract", "--checkpoint", str(final), "--data", str(bench),
        "--split", "query", "--out", str(qdump),
    ]) == cli.EXIT_OK
    gdump = tmp_path / "g.bin"
    assert cli.main([
        "extract", "--checkpoint", str(final), "--data", str(bench),
        "--split", "gallery", "--out", str(gdump),
    ]) == cli.EXIT_OK
    descs = tensorio.read_descriptors(qdump)
    assert all(v.size == 6 * 16 for v in descs.values())

    align_csv = tmp_path / "align.csv"
    assert cli.main([
        "align", "--checkpoint", str(final), "--data", str(bench),
        "--out", str(align_csv),
    ]) == cli.EXIT_OK
    lines = align_csv.read_text().strip().splitlines()
    assert lines[0] == "image_id,part,window,top,iou,uniform_iou"
    assert len(lines) == 1 + 9 * 6  # (query+gallery images) x parts

    report = tmp_path / "report.csv"
    assert cli.main([
        "evaluate", "--query", str(qdump), "--gallery", str(gdump),
        "--protocol", "multi", "--out", str(report),
    ]) == cli.EXIT_OK
    assert "protocol,multi" in report.read_text()
    out = capsys.readouterr().out
    assert "mean IoU" in out


def test_cli_train_requires_data(tmp_path):
    assert cli.main(["train", "--out", str(tmp_path / "o")]) == cli.EXIT_USAGE
