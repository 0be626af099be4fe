import json

import numpy as np
import pytest
from PIL import Image

from condgan.cli import main, run
from condgan.data import load_dataset, read_manifest
from condgan.training import strip_wall_time

CONFIG_TEMPLATE = """
[experiment]
family = wgan-cls
seed = 9
out_dir = {out_dir}
total_steps = 3
batch_size = 6
checkpoint_every = 100

[data]
manifest = {manifest}

[architecture]
max_resolution = 16
noise_dim = 8
compressed_embed_dim = 8
embedding_dim = 24
channel_schedule = 16,16,16

[synthetic]
num_classes = 4
images_per_class = 10
image_size = 16
embedding_dim = 24
test_num_classes = 2
test_images_per_class = 4

[evaluate]
n_samples = 40
n_splits = 10
classifier_epochs = 15
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    out_dir = root / "out"
    config = root / "exp.ini"
    config.write_text(
        CONFIG_TEMPLATE.format(
            out_dir=out_dir, manifest=out_dir / "data" / "train" / "manifest.txt"
        )
    )
    assert run("make-synthetic", config) == 0
    assert run("train", config) == 0
    ckpt = out_dir / "checkpoints" / "ckpt_step000003_final.npz"
    assert ckpt.exists()
    return {"root": root, "config": config, "out": out_dir, "ckpt": ckpt}


class TestMakeSynthetic:
    def test_layout_and_disjoint_splits(self, workspace):
        out = workspace["out"]
        train_manifest = read_manifest(out / "data" / "train")
        test_manifest = read_manifest(out / "data" / "test")
        assert train_manifest.class_ids == frozenset({0, 1, 2, 3})
        assert test_manifest.class_ids == frozenset({4, 5})
        assert not (set(train_manifest.class_ids) & set(test_manifest.class_ids))
        dataset = load_dataset(out / "data" / "train")
        assert len(dataset) == 40
        assert (out / "data" / "train" / "class_0000" / "00000.png").exists()
        assert (out / "data" / "train" / "class_0000" / "embeddings.bin").exists()

    def test_rerun_is_deterministic(self, workspace, tmp_path):
        config2 = workspace["root"] / "exp2.ini"
        config2.write_text(
            CONFIG_TEMPLATE.format(
                out_dir=tmp_path / "out2",
                manifest=tmp_path / "out2" / "data" / "train" / "manifest.txt",
            )
        )
        assert run("make-synthetic", config2) == 0
        a = (
            workspace["out"] / "data" / "train" / "class_0000" / "embeddings.bin"
        ).read_bytes()
        b = (
            tmp_path / "out2" / "data" / "train" / "class_0000" / "embeddings.bin"
        ).read_bytes()
        assert a == b


class TestValidation:
    def test_unknown_key_listed(self, workspace, capsys):
        code = run("train", workspace["config"], overrides=("experiment.bogus=1",))
        assert code == 1
        assert "experiment.bogus" in capsys.readouterr().err

    def test_unknown_section_listed(self, workspace, capsys):
        code = run("train", workspace["config"], overrides=("mystery.key=1",))
        assert code == 1
        assert "mystery" in capsys.readouterr().err

    def test_family_loss_mismatch_cites_constraint(self, workspace, capsys):
        code = run("train", workspace["config"], overrides=("loss.name=gan-cls",))
        assert code == 1
        assert "requires one of the losses" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert run("train", tmp_path / "nope.ini") == 1

    def test_rejected_config_rejected_by_every_subcommand(self, workspace, capsys):
        bad = ("experiment.bogus=1",)
        codes = {
            cmd: run(cmd, workspace["config"], overrides=bad)
            for cmd in (
                "train",
                "evaluate",
                "sample",
                "interpolate",
                "nn",
                "inspect-schedule",
                "make-synthetic",
            )
        }
        assert set(codes.values()) == {1}

    def test_runtime_failure_exits_two(self, workspace, capsys):
        code = run(
            "sample",
            workspace["config"],
            overrides=(f"sample.checkpoint={workspace['root']}/missing.npz",),
        )
        assert code == 2

    def test_malformed_override_rejected(self, workspace, capsys):
        assert run("train", workspace["config"], overrides=("nonsense",)) == 1

    def test_wrongly_typed_value_names_the_key(self, workspace, capsys):
        code = run(
            "train", workspace["config"], overrides=("experiment.total_steps=soon",)
        )
        assert code == 1
        assert "experiment.total_steps" in capsys.readouterr().err


class TestTrainCli:
    def test_determinism_byte_identical_logs(self, workspace, tmp_path):
        logs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            code = run("train", workspace["config"], out_dir=out)
            assert code == 0
            logs.append(strip_wall_time((out / "metrics.log").read_text()))
        assert logs[0] == logs[1]

    def test_overrides_echoed_in_provenance(self, workspace, tmp_path):
        out = tmp_path / "prov"
        code = run(
            "train",
            workspace["config"],
            overrides=("experiment.total_steps=2",),
            out_dir=out,
        )
        assert code == 0
        record = json.loads((out / "provenance.json").read_text())
        assert record["overrides"] == ["experiment.total_steps=2"]
        assert record["config"]["total_steps"] == 2
        assert record["subcommand"] == "train"
        assert "code_version" in record

    def test_env_var_overrides_out_dir(self, workspace, tmp_path, monkeypatch):
        target = tmp_path / "env_out"
        monkeypatch.setenv("CONDGAN_OUT_DIR", str(target))
        assert run("train", workspace["config"]) == 0
        assert (target / "metrics.log").exists()

    def test_seed_flag_changes_run(self, workspace, tmp_path):
        a = tmp_path / "sa"
        b = tmp_path / "sb"
        run("train", workspace["config"], seed=100, out_dir=a)
        run("train", workspace["config"], seed=101, out_dir=b)
        assert strip_wall_time((a / "metrics.log").read_text()) != strip_wall_time(
            (b / "metrics.log").read_text()
        )


class TestInspectSchedule:
    def test_six_stage_config_emits_eleven_phase_rows(self, tmp_path, capsys):
        config = tmp_path / "pg.ini"
        config.write_text(
            "[experiment]\nfamily = cpggan\nout_dir = " + str(tmp_path / "o")
            + "\ntotal_steps = 1\nbatch_size = 16\n"
            "[architecture]\nmax_resolution = 128\nnoise_dim = 8\n"
            "compressed_embed_dim = 8\nembedding_dim = 24\n"
            "[progressive]\nimages_per_phase = 600000\n"
        )
        assert run("inspect-schedule", config) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 1 + 11  # header + 2*6-1 phases
        header = lines[0].split("\t")
        assert header[0] == "stage" and "alpha_mid" in header

    def test_byte_identical_across_runs(self, tmp_path, capsys):
        config = tmp_path / "pg.ini"
        config.write_text(
            "[experiment]\nfamily = cpggan\nout_dir = " + str(tmp_path / "o")
            + "\ntotal_steps = 1\nbatch_size = 16\n"
            "[architecture]\nmax_resolution = 64\nnoise_dim = 8\n"
            "compressed_embed_dim = 8\nembedding_dim = 24\n"
            "[progressive]\nimages_per_phase = 600000\n"
        )
        run("inspect-schedule", config)
        first = capsys.readouterr().out
        run("inspect-schedule", config)
        second = capsys.readouterr().out
        assert first == second

    def test_non_progressive_family_rejected(self, workspace, capsys):
        assert run("inspect-schedule", workspace["config"]) == 1

    def test_golden_three_stage_table(self, tmp_path, capsys):
        config = tmp_path / "golden.ini"
        config.write_text(
            "[experiment]\nfamily = cpggan\nout_dir = " + str(tmp_path / "o")
            + "\ntotal_steps = 1\nbatch_size = 16\n"
            "[architecture]\nmax_resolution = 16\nnoise_dim = 8\n"
            "compressed_embed_dim = 8\nembedding_dim = 24\n"
            "[progressive]\nimages_per_phase = 600000\n"
        )
        assert run("inspect-schedule", config) == 0
        golden = (
            "stage\tphase\tresolution\tfirst_image\tlast_image\tmid_image\t"
            "alpha_start\talpha_mid\talpha_end\tbatch_size\n"
            "1\tstabilization\t4\t0\t600000\t300000\t1.00\t1.00\t1.00\t16\n"
            "2\ttransition\t8\t600000\t1200000\t900000\t0.00\t0.50\t1.00\t16\n"
            "2\tstabilization\t8\t1200000\t1800000\t1500000\t1.00\t1.00\t1.00\t16\n"
            "3\ttransition\t16\t1800000\t2400000\t2100000\t0.00\t0.50\t1.00\t16\n"
            "3\tstabilization\t16\t2400000\t3000000\t2700000\t1.00\t1.00\t1.00\t16\n"
        )
        assert capsys.readouterr().out == golden


class TestToolSubcommands:
    def test_sample_writes_mosaic_and_sidecar(self, workspace, tmp_path):
        out = tmp_path / "sample_out"
        code = run(
            "sample",
            workspace["config"],
            overrides=(f"sample.checkpoint={workspace['ckpt']}",),
            out_dir=out,
        )
        assert code == 0
        png = out / "samples.png"
        assert png.exists() and (out / "samples.txt").exists()
        with Image.open(png) as im:
            # 16 images in 8 columns -> 2 rows of 16x16 tiles
            assert im.size == (8 * 16, 2 * 16)

    def test_interpolate_mosaic_has_steps_columns_per_pair(self, workspace, tmp_path):
        out = tmp_path / "interp_out"
        code = run(
            "interpolate",
            workspace["config"],
            overrides=(
                f"interpolate.checkpoint={workspace['ckpt']}",
                "interpolate.steps=8",
                "interpolate.pairs=2",
            ),
            out_dir=out,
        )
        assert code == 0
        with Image.open(out / "interpolations.png") as im:
            assert im.size == (8 * 16, 2 * 16)
        sidecar = (out / "interpolations.txt").read_text()
        assert "columns = 8" in sidecar

    def test_nn_reports_neighbors(self, workspace, tmp_path):
        out = tmp_path / "nn_out"
        code = run(
            "nn",
            workspace["config"],
            overrides=(f"nn.checkpoint={workspace['ckpt']}", "nn.n_samples=4"),
            out_dir=out,
        )
        assert code == 0
        sidecar = (out / "nearest_neighbors.txt").read_text()
        assert "distance=" in sidecar
        with Image.open(out / "nearest_neighbors.png") as im:
            assert im.size == (4 * 16, 2 * 16)  # samples row + neighbors row

    def test_evaluate_writes_report(self, workspace, tmp_path):
        out = tmp_path / "eval_out"
        code = run(
            "evaluate",
            workspace["config"],
            overrides=(f"evaluate.checkpoint={workspace['ckpt']}",),
            out_dir=out,
        )
        assert code == 0
        report = (out / "evaluation_report.txt").read_text()
        assert "score_mean" in report
        assert "classifier_accuracy" in report
        assert "per_split" in report

    def test_main_entry_point(self, workspace, tmp_path, capsys):
        code = main(
            [
                "train",
                str(workspace["config"]),
                "--set",
                "experiment.total_steps=1",
                "--out",
                str(tmp_path / "m"),
            ]
        )
        assert code == 0
