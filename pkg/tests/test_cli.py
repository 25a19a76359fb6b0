import pytest

from bsr_cli import main
from memory_model import MB
from utils_store import SCHEMAS, read_table


class TestAnalyze:
    def test_default_plan_table(self, out_dir, capsys):
        assert main(["analyze", "--config", "deit-s", "--plan", "default", "--batch", "128"]) == 0
        df = read_table(out_dir / "memory.csv", schema="memory")
        assert df["bytes"].sum() / MB == pytest.approx(1392.3, abs=0.1)
        assert set(df["mode"]) == {"paper"}
        assert "reduce ratio 6.07x" in capsys.readouterr().out

    def test_vit_b_ratio(self, out_dir, capsys):
        assert main(["analyze", "--config", "vit-b", "--plan", "default", "--batch", "128"]) == 0
        assert "reduce ratio 6.07x" in capsys.readouterr().out

    def test_parquet_output(self, out_dir, tmp_path):
        path = tmp_path / "mem.parquet"
        assert main(["analyze", "--plan", "full", "--mode", "exact", "--batch", "1",
                     "--out", str(path)]) == 0
        df = read_table(path, schema="memory")
        assert df["bytes"].sum() == 69_315_560

    def test_head_only(self, out_dir):
        assert main(["analyze", "--plan", "last", "--batch", "2"]) == 0
        df = read_table(out_dir / "memory.csv")
        assert df["bytes"].sum() == 2 * 384 * 4

    def test_unknown_plan(self, out_dir, capsys):
        assert main(["analyze", "--plan", "everything"]) == 2
        assert "PlanError" in capsys.readouterr().out

    def test_unknown_config(self, out_dir):
        assert main(["analyze", "--config", "resnet"]) == 2

    def test_config_file_with_unknown_base(self, out_dir, tmp_path, capsys):
        path = tmp_path / "odd.cfg"
        path.write_text("base = resnet\ndepth = 4\n")
        assert main(["analyze", "--config", str(path)]) == 2
        assert "PlanError" in capsys.readouterr().out

    def test_strict_plan_file(self, out_dir, tmp_path):
        path = tmp_path / "early.plan"
        path.write_text("trainable = 3\ndrops = 1\n")
        assert main(["analyze", "--plan", str(path)]) == 2
        path.write_text("trainable = 3\ndrops = 1\nstrict = false\n")
        assert main(["analyze", "--plan", str(path)]) == 0

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            main(["profile"])


class TestFlops:
    def test_default_plan(self, out_dir, capsys):
        assert main(["flops", "--config", "deit-s", "--plan", "default", "--batch", "128"]) == 0
        df = read_table(out_dir / "flops.csv", schema="flops")
        assert df["macs"].sum() / 1e9 == pytest.approx(295.5, abs=0.1)
        assert "Total: 295.48" in capsys.readouterr().out


class TestGradcheck:
    def test_passes(self, out_dir, capsys):
        assert main(["gradcheck", "--config", "toy-gradcheck", "--plan", "toy-small"]) == 0
        assert "✅" in capsys.readouterr().out

    def test_corrupted_rule_fails(self, out_dir, capsys):
        assert main(["gradcheck", "--config", "toy-gradcheck", "--plan", "toy-small",
                     "--corrupt-rule", "gelu"]) == 3
        assert "❌" in capsys.readouterr().out

    def test_refuses_large_models(self, out_dir):
        assert main(["gradcheck", "--config", "deit-s", "--plan", "default"]) == 2

    def test_step_out_of_range(self, out_dir):
        assert main(["gradcheck", "--config", "toy-gradcheck", "--plan", "toy-small",
                     "--step", "0.1"]) == 2


class TestAudit:
    @pytest.mark.parametrize("plan", ["toy", "full", "last", "residual-toy"])
    def test_toy_plans(self, out_dir, plan):
        assert main(["audit", "--config", "toy", "--plan", plan]) == 0
        df = read_table(out_dir / "audit.csv", schema="audit")
        assert (df["diff"] == 0).all()
        assert (df["predicted"] == df["measured"]).all()


class TestPlanSearch:
    def test_trainable_positions(self, out_dir):
        assert main(["plan-search", "--config", "deit-s", "--grid", "trainable-positions"]) == 0
        df = read_table(out_dir / "plan_search.csv", schema="plan_search")
        assert len(df) == 13
        assert df["memory_mb"].is_monotonic_increasing
        assert df["accuracy"].isna().all()
        mb = dict(zip(df["trainable"], df["memory_mb"]))
        assert mb["9,10,11"] < mb["4,11"] < mb["3,7,11"]

    def test_drop_rates(self, out_dir):
        assert main(["plan-search", "--config", "deit-s", "--grid", "drop-rates"]) == 0
        df = read_table(out_dir / "plan_search.csv", schema="plan_search")
        gmacs = dict(zip(df["rate"], df["gmacs"]))
        assert gmacs[0.3] < gmacs[0.5] < gmacs[0.7]

    def test_grid_file_skips_invalid_rows(self, out_dir, tmp_path, capsys):
        path = tmp_path / "mine.grid"
        path.write_text("trainable=3,7,11; drops=3,6,9\n"
                        "trainable=3; drops=1\n"
                        "trainable=11\n")
        assert main(["plan-search", "--config", "deit-s", "--grid", str(path)]) == 0
        df = read_table(out_dir / "plan_search.csv", schema="plan_search")
        assert df["plan"].tolist() == ["trainable=11;drops=-;rate=0.5",
                                       "trainable=3,7,11;drops=3,6,9;rate=0.5"]
        assert "Skipping trainable=3;drops=1" in capsys.readouterr().out

    def test_unknown_grid(self, out_dir):
        assert main(["plan-search", "--grid", "nope"]) == 2

    def test_empty_grid_writes_empty_table(self, out_dir, tmp_path, capsys):
        path = tmp_path / "empty.grid"
        path.write_text("# nothing yet\n\n")
        assert main(["plan-search", "--grid", str(path)]) == 0
        df = read_table(out_dir / "plan_search.csv", schema="plan_search")
        assert df.empty
        assert "Empty grid" in capsys.readouterr().out


class TestTraining:
    def test_pretrain_then_finetune(self, out_dir, capsys):
        assert main(["pretrain", "--config", "toy", "--epochs", "1"]) == 0
        checkpoints = sorted((out_dir / "checkpoints").glob("toy_source_*.bsrckpt"))
        assert len(checkpoints) == 1
        assert read_table(out_dir / "pretrain_trace.csv", schema="trace")["step"].max() > 0

        assert main(["finetune", "--config", "toy", "--plan", "toy", "--epochs", "1",
                     "--checkpoint", str(checkpoints[0]), "--debug"]) == 0
        trace = read_table(out_dir / "trace.csv", schema="trace")
        assert set(trace["split"]) == {"train", "test"}
        assert list((out_dir / "checkpoints").glob("toy_finetuned_*.bsrckpt"))
        assert "Target test accuracy" in capsys.readouterr().out

    def test_incompatible_checkpoint(self, out_dir, tmp_path):
        from vit_model import init_params, load_config, save_checkpoint

        path = save_checkpoint(init_params(load_config("toy-gradcheck")), tmp_path / "small.bsr")
        assert main(["finetune", "--config", "toy", "--checkpoint", str(path)]) == 2

    @pytest.mark.slow
    def test_compare(self, out_dir):
        assert main(["compare", "--config", "toy", "--plan", "toy", "--epochs", "1"]) == 0
        df = read_table(out_dir / "compare.csv", schema="compare")
        assert df["method"].tolist() == ["FT-Full", "FT-Last", "BSR"]
        assert list(df.columns) == SCHEMAS["compare"]

    def test_compare_memory_matches_analyze(self, out_dir):
        from bsr_policy import resolve_plan
        from train_harness import TrainConfig, compare, make_task
        from vit_model import init_params, load_config

        config = load_config("toy")
        train, test = make_task(config.num_classes, config.image_size, 0.5, 0, config.channels,
                                n_train=8, n_test=4, cell=config.patch_size)
        df = compare(init_params(config), config, train, test, resolve_plan("toy", config),
                     TrainConfig(epochs=1, batch=8), verbose=False)
        memory = dict(zip(df["method"], df["memory_mb"]))
        for method, plan in (("FT-Full", "full"), ("FT-Last", "last"), ("BSR", "toy")):
            assert main(["analyze", "--config", "toy", "--plan", plan, "--batch", "8"]) == 0
            table = read_table(out_dir / "memory.csv", schema="memory")
            assert table["bytes"].sum() / MB == pytest.approx(memory[method], rel=1e-12)
