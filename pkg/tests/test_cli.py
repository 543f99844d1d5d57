import contextlib
import io
import json
import logging
import os

import numpy as np
import pandas as pd
import pytest

from app.commands import cmd_ablate, cmd_eval, cmd_heatmap, mean_metric, scan_text, split_scan_sections
from app.components.heatmap import MAX_GRID_CELLS, build_heatmap, export_heatmaps, normalise_level, pgm_pixels
from app.utils.config_utils import RunConfig, apply_overrides, load_run_config
from config import BEST_CHECKPOINT_NAME, EXIT_CODES, MANIFEST_FILE_NAME, METRICS_FILE_NAME, RUN_CONFIG_NAME
from main import main
from packages.data_storage.bag_io import write_bag
from packages.data_storage.manifest import split_manifest
from packages.helpers.errors import ConfigError, ContractError, VersionMismatchError
from packages.hierarchy.scan_order import parse_scan_text
from packages.model.moe_mamba_mil import ForwardOutput, build_variant, forward
from packages.numerics.tensor import Tensor
from packages.trainer.checkpoint import Checkpoint, save_checkpoint
from tests.helpers import fixture_bag, tiny_model_config

TINY_RUN = {
    "model": {"d_in": 32, "d_model": 8, "n_classes": 2, "n_levels": 3, "n_experts": 2, "top_k": 1,
              "l_static": 1, "l_dyn": 1, "d_state": 4, "d_conv": 2, "d_hidden": 8, "d_attn": 4},
    "train": {"epochs": 1, "lr": 0.001},
}


def flat_output(attention):
    attention = np.asarray(attention, dtype=np.float64)
    return ForwardOutput(logits=Tensor(np.zeros(3)), probs=np.full(3, 1 / 3), attention=attention,
                         token_levels=np.ones(len(attention), dtype=int), per_level_attention={1: attention})


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A generated 20-slide dataset shared by the command-line tests."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "tiny.json"
    config.write_text(json.dumps(TINY_RUN))
    data = str(root / "data")
    with contextlib.redirect_stdout(io.StringIO()) as buffer:
        code = main(["--config", str(config), "--out", data, "generate", "--classes", "2", "--slides-per-class", "10"])
    return {"root": str(root), "config": str(config), "data": data, "run": str(root / "run"),
            "generate_code": code, "generate_output": buffer.getvalue()}


@pytest.fixture
def tiny_eval_setup(tmp_path):
    """Four fixture bags all in train, plus an untrained checkpoint of the tiny run."""
    bags = [fixture_bag(d_in=32, label=i % 2, slide_id=f"s{i}") for i in range(4)]
    manifest = split_manifest(bags, (1.0, 0.0, 0.0), seed=0, root=str(tmp_path))
    for bag in bags:
        write_bag(bag, str(tmp_path / f"{bag.slide_id}.mbag"))
    manifest_path = str(tmp_path / MANIFEST_FILE_NAME)
    manifest.to_csv(manifest_path)
    model = build_variant(RunConfig.from_dict(TINY_RUN).model)
    ckpt_path = str(tmp_path / BEST_CHECKPOINT_NAME)
    save_checkpoint(Checkpoint(model_config=model.config, params=model.state_dict()), ckpt_path)
    return tmp_path, manifest_path, ckpt_path


class TestRunConfig:
    def test_defaults_are_synchronised(self):
        cfg = RunConfig(seed=7)
        assert (cfg.model.seed, cfg.train.seed, cfg.synthetic.seed) == (7, 7, 7)
        assert cfg.model.lambda_balance == cfg.train.lambda_balance

    @pytest.mark.parametrize("values", [{"optimiser": {}}, {"model": {"width": 3}}])
    def test_unknown_keys(self, values):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(values)

    def test_version(self):
        with pytest.raises(VersionMismatchError):
            RunConfig.from_dict({"version": 2})

    def test_json_round_trip(self):
        cfg = RunConfig.from_dict(TINY_RUN)
        assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg

    def test_flags_override_file(self):
        cfg = apply_overrides(RunConfig.from_dict(TINY_RUN),
                              {"variant": "wo-moe", "lambda_balance": 0.01, "seed": 3, "epochs": None})
        assert cfg.model.variant == "wo_moe"
        assert cfg.train.lambda_balance == 0.01
        assert cfg.model.lambda_balance == 0.01
        assert cfg.train.epochs == 1
        assert cfg.model.seed == 3

    def test_load_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_run_config(str(path))
        assert load_run_config(None) == RunConfig()


class TestHeatmap:
    def test_normalisation_conventions(self):
        np.testing.assert_array_equal(normalise_level([0.3]), [1.0])
        np.testing.assert_array_equal(normalise_level([0.2, 0.2, 0.2]), [0.5, 0.5, 0.5])
        np.testing.assert_allclose(normalise_level([1.0, 3.0, 2.0]), [0.0, 1.0, 0.5])

    def test_pgm_pixels(self):
        grid = np.array([[0.0, 1.0], [0.5, np.nan]])
        np.testing.assert_array_equal(pgm_pixels(grid), [[1, 255], [128, 0]])

    def test_bundle_from_forward(self):
        bag = fixture_bag()
        bundle = build_heatmap(bag, forward(build_variant(tiny_model_config()), bag))
        assert sorted(bundle.levels) == [1, 2, 3]
        fine = bundle.levels[3]
        assert fine.grid.shape == (1, 8)
        np.testing.assert_array_equal(fine.col_coords, np.arange(8))
        assert np.nanmax(fine.grid) == 1.0
        assert np.nanmin(fine.grid) == 0.0

    def test_sparse_coordinates_keep_only_occupied_rows_and_columns(self, tmp_path):
        bag = fixture_bag(fanouts=(), n_roots=3)
        for record, coord in zip(bag.records, [(0, 0), (65535, 65535), (0, 65535)]):
            record.coord = coord
        out = flat_output([0.2, 0.5, 0.3])
        bundle = export_heatmaps(bag, out, str(tmp_path))
        level = bundle.levels[1]
        assert level.grid.size <= MAX_GRID_CELLS
        np.testing.assert_array_equal(level.row_coords, [0, 65535])
        np.testing.assert_array_equal(level.col_coords, [0, 65535])
        np.testing.assert_allclose(level.grid, [[0.0, 1 / 3], [np.nan, 1.0]], rtol=1e-12)
        assert level.origin == (0, 0)
        assert (tmp_path / "level_1.pgm").exists()

    def test_dense_range_keeps_empty_cells(self):
        bag = fixture_bag(fanouts=(), n_roots=2)
        bag.records[1].coord = (3, 5)
        level = build_heatmap(bag, flat_output([0.25, 0.75])).levels[1]
        assert level.grid.shape == (4, 6)
        assert np.count_nonzero(~np.isnan(level.grid)) == 2
        assert level.grid[3, 5] == 1.0

    def test_single_token_and_constant_levels(self, tmp_path):
        bag = fixture_bag(fanouts=(3,), n_roots=1)
        attention = np.array([1.0 / 3, 2.0 / 9, 2.0 / 9, 2.0 / 9])
        out = ForwardOutput(logits=Tensor(np.zeros(3)), probs=np.full(3, 1 / 3), attention=attention,
                            token_levels=np.array([1, 2, 2, 2]),
                            per_level_attention={1: np.array([1.0]), 2: np.full(3, 1 / 3)})
        bundle = export_heatmaps(bag, out, str(tmp_path))
        np.testing.assert_array_equal(bundle.levels[1].grid, [[1.0]])
        np.testing.assert_array_equal(bundle.levels[2].grid, [[0.5, 0.5, 0.5]])
        for name in ("level_1.pgm", "level_2.pgm", "attention.svg", "attention.csv"):
            assert (tmp_path / name).exists(), name
        assert (tmp_path / "level_2.pgm").read_bytes()[:2] == b"P5"
        csv = pd.read_csv(tmp_path / "attention.csv")
        assert csv["attention"].sum() == pytest.approx(1.0, abs=1e-12)
        assert list(csv["path"]) == ["1", "1.1", "1.2", "1.3"]


def test_scan_text_has_both_orders(tmp_path):
    path = str(tmp_path / "fixture.mbag")
    write_bag(fixture_bag(), path)
    sections = split_scan_sections(scan_text(path))
    assert list(sections) == ["region_nested", "resolution_ordered"]
    for body in sections.values():
        rows = parse_scan_text(body)
        assert len(rows) == 14
        assert sorted(r[4] for r in rows) == list(range(14))
    nested = parse_scan_text(sections["region_nested"])
    assert [r[2] for r in nested[:3]] == [(1,), (1, 1), (1, 1, 1)]


class TestCommandLine:
    def test_generate(self, workspace):
        assert workspace["generate_code"] == EXIT_CODES["success"]
        data = workspace["data"]
        assert len([name for name in os.listdir(data) if name.endswith(".mbag")]) == 20
        manifest = pd.read_csv(os.path.join(data, MANIFEST_FILE_NAME))
        assert manifest["split"].value_counts().to_dict() == {"train": 14, "test": 4, "val": 2}
        assert os.path.exists(os.path.join(data, RUN_CONFIG_NAME))
        assert "class 0: 10" in workspace["generate_output"]

    def test_generate_refuses_non_empty_directory(self, workspace):
        assert main(["--out", workspace["data"], "generate"]) == EXIT_CODES["contract"]

    def test_train_eval_heatmap_scan(self, workspace, capsys):
        manifest = os.path.join(workspace["data"], MANIFEST_FILE_NAME)
        run_dir = workspace["run"]
        assert main(["--config", workspace["config"], "--out", run_dir, "train", "--manifest", manifest]) == 0
        for name in (BEST_CHECKPOINT_NAME, METRICS_FILE_NAME, RUN_CONFIG_NAME, "run.log"):
            assert os.path.exists(os.path.join(run_dir, name)), name
        capsys.readouterr()

        assert main(["--out", run_dir, "eval", "--manifest", manifest, "--split", "test"]) == EXIT_CODES["success"]
        output = capsys.readouterr().out
        assert "F1" in output
        assert "Confusion matrix" in output

        bag = os.path.join(workspace["data"], "syn_c1_000.mbag")
        heat_dir = os.path.join(workspace["root"], "heat")
        code = main(["--out", heat_dir, "heatmap", "--bag", bag,
                     "--checkpoint", os.path.join(run_dir, BEST_CHECKPOINT_NAME)])
        assert code == EXIT_CODES["success"]
        assert os.path.exists(os.path.join(heat_dir, "level_3.pgm"))
        csv = pd.read_csv(os.path.join(heat_dir, "attention.csv"))
        assert len(csv) == 42
        assert csv["attention"].sum() == pytest.approx(1.0, abs=1e-5)
        capsys.readouterr()

        assert main(["scan", "--bag", bag]) == EXIT_CODES["success"]
        output = capsys.readouterr().out
        assert len(parse_scan_text(split_scan_sections(output)["region_nested"])) == 42

    def test_ablation_sweep(self, workspace, caplog):
        out = os.path.join(workspace["root"], "ablate")
        cfg = apply_overrides(load_run_config(workspace["config"]), {"data": workspace["data"], "out": out})
        with caplog.at_level(logging.INFO):
            table = cmd_ablate(cfg, seeds=[0, 1], sweep="topk", values=["1", "2"])
        assert "Resolved configuration" in caplog.text
        assert list(table["seed"]) == ["0", "1", "0", "1", "mean", "mean"]
        assert os.path.exists(os.path.join(out, "ablation_topk.csv"))
        runs = table[(table["topk"] == "1") & (table["seed"] != "mean")]
        assert mean_metric(table, "topk", "1", "acc") == pytest.approx(runs["acc"].mean())
        with pytest.raises(ContractError):
            cmd_ablate(cfg, sweep="topk", values=["1", "1"])

    def test_eval_on_empty_split(self, tiny_eval_setup):
        _, manifest_path, ckpt_path = tiny_eval_setup
        with pytest.raises(ContractError):
            cmd_eval(ckpt_path, manifest_path, "val")
        assert cmd_eval(ckpt_path, manifest_path, "train").confusion.sum() == 4

    def test_eval_and_heatmap_log_checkpoint_configuration(self, tiny_eval_setup, caplog):
        tmp_path, manifest_path, ckpt_path = tiny_eval_setup
        with caplog.at_level(logging.INFO):
            cmd_eval(ckpt_path, manifest_path, "train")
        assert f"Resolved configuration of {ckpt_path}" in caplog.text
        assert '"d_model": 8' in caplog.text
        caplog.clear()
        with caplog.at_level(logging.INFO):
            cmd_heatmap(ckpt_path, str(tmp_path / "s0.mbag"), str(tmp_path / "heat"))
        assert f"Resolved configuration of {ckpt_path}" in caplog.text

    def test_exit_codes(self, workspace, tmp_path):
        root = workspace["root"]
        assert main(["--out", os.path.join(root, "missing"), "train",
                     "--manifest", os.path.join(root, "nowhere.csv")]) == EXIT_CODES["io"]
        assert main(["scan"]) == EXIT_CODES["contract"]
        bad_config = tmp_path / "bad.json"
        bad_config.write_text(json.dumps({"model": {"top_k": 9}}))
        assert main(["--config", str(bad_config), "scan", "--bag", "x"]) == EXIT_CODES["contract"]

    def test_blank_manifest_label_is_a_data_error(self, tmp_path):
        manifest = tmp_path / MANIFEST_FILE_NAME
        manifest.write_text("slide_id,path,label,split\na,a.mbag,,train\n")
        code = main(["--out", str(tmp_path / "run"), "train", "--manifest", str(manifest)])
        assert code == EXIT_CODES["io"]
