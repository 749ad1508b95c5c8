"""Command-line interface: config parsing, subcommands, exit codes."""

import csv
import json

import numpy as np
import pytest

from anchorcfd.cli import (
    load_config,
    main,
    model_config_from_dict,
    train_config_from_dict,
)
from anchorcfd.errors import TrainingDivergedError
from anchorcfd.model import ModelConfig


# ---------------------------------------------------------------------------
# Config plumbing


def test_model_config_presets():
    assert model_config_from_dict({"preset": "desk"}) == ModelConfig.desk()
    assert model_config_from_dict({"preset": "drivaerml"}) == ModelConfig.drivaerml()
    override = model_config_from_dict({"preset": "desk", "dim": 32})
    assert override.dim == 32
    assert override.num_blocks == ModelConfig.desk().num_blocks


def test_model_config_plain_fields():
    cfg = model_config_from_dict(
        {"dim": 24, "num_heads": 2, "num_blocks": 4, "interleaved_blocks": 2,
         "branch_blocks": 1}
    )
    assert cfg.dim == 24


def test_model_config_rejects_unknowns():
    with pytest.raises(ValueError, match="preset"):
        model_config_from_dict({"preset": "gigantic"})
    with pytest.raises(ValueError, match="unknown model config keys"):
        model_config_from_dict({"preset": "desk", "depth": 12})
    with pytest.raises(ValueError, match="unknown model config keys"):
        model_config_from_dict({"dim": 64, "head_count": 2})


def test_train_config_nested_counts():
    cfg = train_config_from_dict(
        {"max_steps": 7, "counts": {"supernodes": 8, "surface_anchors": 16,
                                    "volume_anchors": 16}}
    )
    assert cfg.max_steps == 7
    assert cfg.counts.supernodes == 8
    with pytest.raises(ValueError, match="counts"):
        train_config_from_dict({"counts": {"anchors": 4}})
    with pytest.raises(ValueError, match="train"):
        train_config_from_dict({"optimizer": "adam"})


def test_load_config_paths(tmp_path):
    assert load_config(None) == {}
    good = tmp_path / "c.json"
    good.write_text(json.dumps({"train": {"max_steps": 2}}), encoding="utf-8")
    assert load_config(str(good)) == {"train": {"max_steps": 2}}
    with pytest.raises(ValueError, match="not found"):
        load_config(str(tmp_path / "nope.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ValueError, match="JSON object"):
        load_config(str(bad))
    bad.write_text("{", encoding="utf-8")
    with pytest.raises(ValueError, match="valid JSON"):
        load_config(str(bad))
    sections = tmp_path / "s.json"
    sections.write_text(json.dumps({"modle": {}}), encoding="utf-8")
    with pytest.raises(ValueError, match="sections"):
        load_config(str(sections))


# ---------------------------------------------------------------------------
# End-to-end workspace shared by the subcommand tests


CONFIG = {
    "generate": {
        "num_geometry": 200,
        "num_surface": 300,
        "num_volume": 300,
        "splits": {"train": 2, "test": 1},
    },
    "model": {
        "preset": "desk",
        "dim": 24,
        "num_heads": 2,
        "supernode_count": 16,
        "anchors_surface": 32,
        "anchors_volume": 32,
    },
    "train": {
        "max_steps": 3,
        "log_every": 1,
        "counts": {
            "supernodes": 16,
            "surface_anchors": 32,
            "volume_anchors": 32,
            "surface_queries": 8,
            "volume_queries": 8,
        },
    },
    "eval": {"repeats": 1, "chunk_size": 128},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "config.json"
    config.write_text(json.dumps(CONFIG), encoding="utf-8")
    data = root / "data"
    assert main(["generate", "--out", str(data), "--config", str(config)]) == 0
    run = root / "run"
    code = main([
        "train", "--data", str(data), "--out", str(run),
        "--config", str(config), "--threads", "1",
    ])
    assert code == 0
    return {"root": root, "config": config, "data": data, "run": run}


def test_generate_writes_manifest(workspace):
    manifest = json.loads((workspace["data"] / "manifest").read_text(encoding="utf-8"))
    assert manifest["splits"] == {"train": ["train-0000", "train-0001"],
                                  "test": ["test-0002"]}
    assert (workspace["data"] / "blobs" / "train-0000" / "volume.u.f32").exists()


def test_train_writes_checkpoints_and_log(workspace):
    run = workspace["run"]
    assert (run / "checkpoint" / "manifest").exists()
    assert (run / "checkpoint_ema" / "weights.f32").exists()
    with (run / "train_log.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "step"
    assert len(rows) == 1 + 3  # max_steps=3, log_every=1


def test_eval_writes_metrics(workspace):
    out = workspace["root"] / "metrics.csv"
    code = main([
        "eval", "--checkpoint", str(workspace["run"] / "checkpoint"),
        "--data", str(workspace["data"]), "--out", str(out),
        "--config", str(workspace["config"]), "--split", "test",
    ])
    assert code == 0
    with out.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "sample_id"
    fields = [r[4] for r in rows[1:]]
    assert fields == ["surface_pressure", "wall_shear", "volume_pressure",
                      "velocity", "vorticity"]
    assert all(r[0] == "test-0002" for r in rows[1:])


def test_predict_writes_npz(workspace):
    out = workspace["root"] / "pred.npz"
    code = main([
        "predict", "--checkpoint", str(workspace["run"] / "checkpoint"),
        "--data", str(workspace["data"]), "--out", str(out),
        "--config", str(workspace["config"]),
    ])
    assert code == 0
    with np.load(out) as npz:
        assert set(npz.files) == {"surface_positions", "surface_pred",
                                  "volume_positions", "volume_pred"}
        assert npz["surface_pred"].shape == (300, 4)
        assert npz["volume_pred"].shape == (300, 7)
        assert np.isfinite(npz["volume_pred"]).all()


def test_predict_divfree_head_overrides_vorticity(workspace):
    direct = workspace["root"] / "pred_direct.npz"
    divfree = workspace["root"] / "pred_divfree.npz"
    base = [
        "predict", "--checkpoint", str(workspace["run"] / "checkpoint"),
        "--data", str(workspace["data"]), "--config", str(workspace["config"]),
    ]
    assert main(base + ["--out", str(direct)]) == 0
    assert main(base + ["--out", str(divfree), "--head", "divfree"]) == 0
    with np.load(direct) as a, np.load(divfree) as b:
        # Velocity channels agree; the divfree head recomputes vorticity
        # from the velocity decode instead of reading the direct channels.
        np.testing.assert_array_equal(a["volume_pred"][:, 1:4], b["volume_pred"][:, 1:4])
        assert not np.array_equal(a["volume_pred"][:, 4:7], b["volume_pred"][:, 4:7])


def test_coeffs_writes_table(workspace, capsys):
    out = workspace["root"] / "coeffs.csv"
    code = main([
        "coeffs", "--checkpoint", str(workspace["run"] / "checkpoint"),
        "--data", str(workspace["data"]), "--out", str(out),
        "--config", str(workspace["config"]), "--split", "test",
    ])
    assert code == 0
    with out.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["run_id", "sample_id", "c_d", "c_l", "c_d_ref", "c_l_ref"]
    assert len(rows) == 2
    assert rows[1][1] == "test-0002"
    assert np.isfinite([float(x) for x in rows[1][2:]]).all()
    assert "c_d" in capsys.readouterr().out


def test_finetune_divfree_resumes(workspace):
    out = workspace["root"] / "finetune"
    code = main([
        "finetune-divfree", "--data", str(workspace["data"]),
        "--checkpoint", str(workspace["run"] / "checkpoint"),
        "--out", str(out), "--config", str(workspace["config"]),
        "--max-steps", "1",
    ])
    assert code == 0
    manifest = json.loads((out / "checkpoint" / "manifest").read_text(encoding="utf-8"))
    assert manifest["meta"]["stage"] == "divfree-finetune"


def test_bench_subcommand(workspace):
    out = workspace["root"] / "bench.csv"
    code = main([
        "bench", "--out", str(out), "--sizes", "128,256", "--dim", "16",
        "--heads", "2", "--anchors", "64", "--chunk-size", "64",
        "--repeats", "1", "--modes", "anchor,chunked",
    ])
    assert code == 0
    with out.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["mode", "n", "seconds", "peak_bytes"]
    assert {r[0] for r in rows[1:]} == {"anchor", "chunked"}


# ---------------------------------------------------------------------------
# Exit codes


def test_missing_dataset_exits_3(tmp_path):
    code = main(["train", "--data", str(tmp_path / "void"), "--out", str(tmp_path / "o")])
    assert code == 3


def test_missing_checkpoint_exits_3(workspace, tmp_path):
    code = main([
        "eval", "--checkpoint", str(tmp_path / "nothing"),
        "--data", str(workspace["data"]), "--out", str(tmp_path / "m.csv"),
    ])
    assert code == 3


def test_invalid_config_exits_1(tmp_path):
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"train": {"optimizer": "sgd"}}), encoding="utf-8")
    code = main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o"),
                 "--config", str(config)])
    assert code == 1


def test_f16_training_rejected(workspace, tmp_path):
    code = main([
        "train", "--data", str(workspace["data"]), "--out", str(tmp_path / "o"),
        "--precision", "f16-mixed",
    ])
    assert code == 1


def test_divergence_exits_2(workspace, tmp_path, monkeypatch):
    import anchorcfd.cli as cli_mod

    def boom(*args, **kwargs):
        raise TrainingDivergedError("non-finite loss at step 0")

    monkeypatch.setattr(cli_mod, "train_run", boom)
    code = main(["train", "--data", str(workspace["data"]), "--out", str(tmp_path / "o")])
    assert code == 2


def test_usage_error_is_argparse_exit():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        main(["train"])  # missing required --data/--out
