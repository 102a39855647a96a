import numpy as np
import pytest

from tsa.errors import ConfigError
from tsa.harness import (
    DEFAULT_GRIDS,
    ExperimentConfig,
    ResultTable,
    CellResult,
    emit_table,
    grid_points,
    grid_select,
    load_experiment_config,
    run_experiment,
)
from tsa.model import TrainConfig


def tiny_config(**kw):
    defaults = dict(
        source="source_imbal",
        target="cond1",
        methods=["erm"],
        seeds=[0],
        pretrain=TrainConfig(epochs=25, seed=0),
        grids={"tsa-t3a": {"alpha_lr": [0.01], "t3a_m": [5]},
               "t3a": {"t3a_m": [5]},
               "tent": {"tent_lr": [0.01]}},
    )
    defaults.update(kw)
    cfg = ExperimentConfig(**defaults)
    return cfg


@pytest.fixture(scope="module")
def small_condition(monkeypatch_module=None):
    """Shrink the builtin conditions for fast sweeps."""
    import tsa.harness as hmod

    original = hmod._resolve_graph

    def small_resolve(ref, seed):
        from dataclasses import replace
        from tsa.csbm import CONDITION_NAMES, builtin_spec, generate
        if ref in CONDITION_NAMES:
            return generate(replace(builtin_spec(ref, seed=seed), num_nodes=500))
        return original(ref, seed)

    hmod._resolve_graph = small_resolve
    yield
    hmod._resolve_graph = original


class TestGridHelpers:
    def test_grid_points_cartesian(self):
        pts = grid_points({"a": [1, 2], "b": ["x"]})
        assert pts == [{"a": 1, "b": "x"}, {"a": 2, "b": "x"}]

    def test_empty_grid_single_point(self):
        assert grid_points({}) == [{}]

    def test_singleton_selection(self):
        assert grid_select([0.4]) == 0

    def test_tie_takes_first(self):
        assert grid_select([0.5, 0.5, 0.5]) == 0

    def test_argmax(self):
        assert grid_select([0.3, 0.9, 0.5]) == 1

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            grid_select([])

    def test_default_grids_cover_all_methods(self):
        from tsa.harness import METHODS
        assert set(DEFAULT_GRIDS) == set(METHODS)


class TestRunExperiment:
    def test_single_erm_seed(self, small_condition):
        table = run_experiment(tiny_config())
        cell = table.cells["erm"]
        assert len(cell.values) == 1 and not cell.failures
        assert 0.0 <= cell.values[0] <= 1.0
        assert cell.std is None  # single seed: no std

    def test_deterministic_rerun(self, small_condition):
        cfg = tiny_config(methods=["erm", "t3a"], seeds=[0, 1])
        a = run_experiment(cfg)
        b = run_experiment(cfg)
        for m in cfg.methods:
            assert a.cells[m].values == b.cells[m].values
            assert a.cells[m].chosen == b.cells[m].chosen

    def test_tsa_beats_its_refiner_on_shift(self, small_condition):
        cfg = tiny_config(
            methods=["t3a", "tsa-t3a"], seeds=[0, 1, 2],
            pretrain=TrainConfig(epochs=60, seed=0),
        )
        table = run_experiment(cfg, model_cache={})
        assert table.cells["tsa-t3a"].mean >= table.cells["t3a"].mean - 0.02

    def test_mean_matches_raw_values(self, small_condition):
        cfg = tiny_config(seeds=[0, 1, 2])
        table = run_experiment(cfg)
        cell = table.cells["erm"]
        assert cell.mean == pytest.approx(np.mean(cell.values))
        assert cell.std == pytest.approx(np.std(cell.values, ddof=1))

    def test_model_cache_reused_across_scenarios(self, small_condition):
        cache = {}
        run_experiment(tiny_config(), model_cache=cache)
        assert len(cache) == 1
        run_experiment(tiny_config(target="cond2"), model_cache=cache)
        assert len(cache) == 1  # same source/seed/config: no second pretrain

    def test_bad_method_rejected(self):
        with pytest.raises(ConfigError):
            tiny_config(methods=["gtrans"])

    def test_cell_failure_does_not_abort_sweep(self, small_condition, monkeypatch):
        import tsa.harness as hmod

        original = hmod.run_method

        def flaky(method, hp, model, g, cfg):
            if method == "t3a":
                raise RuntimeError("boom")
            return original(method, hp, model, g, cfg)

        monkeypatch.setattr(hmod, "run_method", flaky)
        table = run_experiment(tiny_config(methods=["erm", "t3a"]))
        assert table.cells["erm"].values and not table.cells["erm"].failures
        assert table.cells["t3a"].failures and not table.cells["t3a"].values
        assert table.cells["t3a"].mean is None


class TestEmitTable:
    def _table(self):
        return ResultTable(
            scenario="s",
            cells={
                "erm": CellResult("erm", "s", values=[0.8, 0.9], chosen=[{}, {}]),
                "tsa-t3a": CellResult("tsa-t3a", "s", values=[0.95, 0.85],
                                      chosen=[{"alpha_lr": 0.01}] * 2),
            },
        )

    def test_json_round_trip(self, tmp_path):
        import json
        path = tmp_path / "t.json"
        emit_table(self._table(), "json", path)
        data = json.loads(path.read_text())
        assert data["cells"]["erm"]["values"] == [0.8, 0.9]
        assert data["cells"]["tsa-t3a"]["mean"] == pytest.approx(0.9)

    def test_csv_columns(self, tmp_path):
        import csv
        path = tmp_path / "t.csv"
        emit_table(self._table(), "csv", path)
        rows = list(csv.reader(path.read_text().splitlines()))
        assert rows[0] == ["scenario", "method", "mean", "std", "n_seeds", "hyperparams"]
        assert all(len(r) == 6 for r in rows)

    def test_markdown_bolds_best(self):
        text = emit_table(self._table(), "markdown")
        assert "**90.00" in text  # tsa-t3a mean is the best cell

    def test_unknown_format(self):
        with pytest.raises(ConfigError):
            emit_table(self._table(), "xml")


class TestConfigFile:
    def test_load_round_trip(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text(
            '[scenario]\nsource = "source_imbal"\ntarget = "cond1"\nname = "demo"\n'
            '[run]\nmethods = ["erm", "t3a"]\nseeds = [0, 1]\nmetric = "accuracy"\n'
            '[pretrain]\nepochs = 10\n'
            '[grids.t3a]\nt3a_m = [5, 20]\n'
        )
        cfg = load_experiment_config(path)
        assert cfg.name == "demo"
        assert cfg.methods == ["erm", "t3a"]
        assert cfg.pretrain.epochs == 10
        assert cfg.grid_for("t3a") == {"t3a_m": [5, 20]}
        # unspecified methods keep defaults
        assert cfg.grid_for("tent") == DEFAULT_GRIDS["tent"]

    def test_missing_scenario_key(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text('[scenario]\nsource = "source_imbal"\n')
        with pytest.raises(ConfigError):
            load_experiment_config(path)

    def test_malformed_toml(self, tmp_path):
        path = tmp_path / "bad2.toml"
        path.write_text("[scenario\n")
        with pytest.raises(ConfigError):
            load_experiment_config(path)
