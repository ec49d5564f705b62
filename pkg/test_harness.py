import json

import pandas as pd
import pytest

from safe_explore.config import settings
from safe_explore.environments import build_corridor
from safe_explore.errors import ConfigError, ParameterError, ReplicationError
from safe_explore.exp_harness import (
    CONSERVATION_METRIC,
    EXPOSURE_METRIC,
    aggregate,
    group_timeout,
    run_bandit_sweep,
    run_corridor_comparison,
    run_grid_experiment,
    run_replications,
)
from safe_explore.main import EXIT_CONFIG, EXIT_INCOMPLETE, EXIT_OK, build_config, build_parser, cli_main
from safe_explore.models import ExperimentConfig, ExperimentKind
from safe_explore.storage.local import LocalStorage

SMALL_MAP = "....\n.O..\n..#.\n....\n"


@pytest.fixture
def bandit_config():
    return ExperimentConfig.desk_scale(
        ExperimentKind.BANDIT_SWEEP, n_runs=3, epsilons=[0.05], alphas=[0.1, 0.3]
    )


@pytest.fixture
def grid_config():
    return ExperimentConfig.desk_scale(ExperimentKind.GRID_BARRIER, n_runs=2, base_seed=11)


@pytest.fixture
def corridor_config():
    return ExperimentConfig.desk_scale(ExperimentKind.CORRIDOR_COMPARE, n_runs=3, corridor_length=5)


class TestAggregate:
    def test_constant_sample(self):
        stat = aggregate([3, 3, 3])
        assert (stat.mean, stat.stderr, stat.n) == (3.0, 0.0, 3)

    def test_two_values(self):
        stat = aggregate([0, 2])
        assert stat.mean == pytest.approx(1.0)
        assert stat.stderr == pytest.approx(1.0)

    def test_single_value_is_degenerate(self):
        stat = aggregate([5])
        assert stat.degenerate and stat.stderr == 0.0

    def test_empty(self):
        with pytest.raises(ParameterError):
            aggregate([])


class TestBanditSweep:
    def test_fixed_arms(self, bandit_config):
        result = run_bandit_sweep(bandit_config, mus=[0.01, 0.02, 0.4, 0.5])
        summary = result.summary
        assert len(summary) == 4
        assert set(summary["metric"]) == {CONSERVATION_METRIC, EXPOSURE_METRIC}
        conservation = summary[summary["metric"] == CONSERVATION_METRIC]
        assert conservation["bound"].tolist() == pytest.approx([0.9, 0.7])
        runs = result.tables["runs"]
        assert len(runs) == 3 * 2
        assert (runs["n_unsafe"] == 2).all()
        assert runs["conservation_ratio"].between(0.0, 1.0).all()

    def test_sampled_arms_are_shared_across_the_grid(self, bandit_config):
        runs = run_bandit_sweep(bandit_config.model_copy(update={"n_arms": 20})).tables["runs"]
        per_run = runs.groupby("run")["n_unsafe"].nunique()
        assert (per_run == 1).all()

    def test_alpha_trades_conservation_for_exposure(self):
        config = ExperimentConfig.desk_scale(
            ExperimentKind.BANDIT_SWEEP, n_runs=16, epsilons=[0.05], alphas=[0.05, 0.1, 0.3]
        )
        assert (config.n_arms, config.mu_spec) == (100, 0.1)
        summary = run_bandit_sweep(config).summary.sort_values("alpha")
        conservation = summary[summary["metric"] == CONSERVATION_METRIC]["mean"].tolist()
        exposure = summary[summary["metric"] == EXPOSURE_METRIC]["mean"].tolist()
        assert conservation[0] >= conservation[1] >= conservation[2]
        assert conservation[0] > conservation[2]
        assert exposure[0] > exposure[1] > exposure[2]

    def test_grid_points_have_their_own_streams(self, bandit_config):
        both = run_bandit_sweep(bandit_config).tables["runs"]
        alone = run_bandit_sweep(bandit_config.model_copy(update={"alphas": [0.3]})).tables["runs"]
        shared = both[both["alpha"] == 0.3].reset_index(drop=True)
        pd.testing.assert_frame_equal(shared, alone.reset_index(drop=True))

    def test_wrong_kind(self, grid_config):
        with pytest.raises(ConfigError):
            run_bandit_sweep(grid_config)


class TestGridExperiment:
    def test_small_map(self, grid_config):
        result = run_grid_experiment(grid_config, map_text=SMALL_MAP)
        summary = result.summary
        assert summary["complete"].all()
        assert result.n_incomplete == 0
        assert (summary["n_unsafe_pairs"] == 14 * 4).all()
        assert (summary["tight_bound"] <= summary["thm7_bound"]).all()

        series = result.tables["series"]
        for _, run in series.groupby("run"):
            assert run["step"].iloc[0] == 0
            assert run["fraction_pairs_condemned"].is_monotonic_increasing
            assert run["fraction_states_condemned"].is_monotonic_increasing
            assert run["fraction_pairs_condemned"].iloc[-1] == pytest.approx(1.0)
            assert run["fraction_states_condemned"].iloc[-1] == pytest.approx(1.0)

    def test_explicit_seeds(self, grid_config):
        config = grid_config.model_copy(update={"seeds": [4, 4]})
        summary = run_grid_experiment(config, map_text=SMALL_MAP).summary
        assert summary["completion_step"].iloc[0] == summary["completion_step"].iloc[1]


class TestCorridorComparison:
    def test_summary_layout(self, corridor_config):
        result = run_corridor_comparison(corridor_config)
        summary = result.summary
        assert len(summary) == 4
        assert set(summary["mode"]) == {"assured", "classic"}
        agents = result.tables["agents"]
        assert len(agents) == 6
        assured = agents[agents["mode"] == "assured"]
        assert (assured["condemned_selections"] == 0).all()
        assert (assured["bumps_to_goal"] <= 11).all()

    def test_assured_beats_classic(self):
        config = ExperimentConfig.desk_scale(ExperimentKind.CORRIDOR_COMPARE)
        assert config.n_runs == 200
        summary = run_corridor_comparison(config).summary.set_index(["mode", "metric"])
        for metric in ("transitions_to_goal", "bumps_to_goal"):
            assured = summary.loc[("assured", metric)]
            classic = summary.loc[("classic", metric)]
            gap = classic["mean"] - assured["mean"]
            assert gap > 3 * (assured["stderr"] ** 2 + classic["stderr"] ** 2) ** 0.5, metric


class TestReplications:
    def test_same_seed_same_tables(self, grid_config):
        first = run_grid_experiment(grid_config, map_text=SMALL_MAP)
        second = run_grid_experiment(grid_config, map_text=SMALL_MAP)
        pd.testing.assert_frame_equal(first.summary, second.summary)
        pd.testing.assert_frame_equal(first.tables["series"], second.tables["series"])

    def test_process_pool_matches_sequential(self, corridor_config):
        sequential = run_replications(corridor_config, executor="local", threads=1)
        pooled = run_replications(corridor_config, executor="local", threads=2)
        assert sequential == pooled

    def test_celery_eager_matches_local(self, corridor_config):
        from safe_explore.tasks.replications import celery_app

        celery_app.conf.task_always_eager = True
        celery_app.conf.task_eager_propagates = True
        try:
            eager = run_replications(corridor_config, executor="celery")
        finally:
            celery_app.conf.task_always_eager = False
        assert eager == run_replications(corridor_config, executor="local", threads=1)

    def test_celery_timeout_covers_the_group(self, corridor_config, monkeypatch):
        import celery
        from celery.exceptions import TimeoutError as CeleryTimeoutError

        waited = []

        class StalledGroup:
            def __init__(self, tasks):
                self.n = len(list(tasks))

            def apply_async(self):
                return self

            def get(self, timeout):
                waited.append((self.n, timeout))
                raise CeleryTimeoutError("The operation timed out.")

        monkeypatch.setattr(celery, "group", StalledGroup)
        with pytest.raises(ReplicationError):
            run_replications(corridor_config, executor="celery")
        assert waited == [(3, group_timeout(3))]
        assert group_timeout(3) == 3 * settings.replication_time_limit

    def test_unknown_executor(self, corridor_config):
        with pytest.raises(ConfigError):
            run_replications(corridor_config, executor="cluster")


class TestLocalStorage:
    def test_arm_parameters(self, tmp_path):
        path = tmp_path / "arms.txt"
        path.write_text("# damage probabilities\n0.05\n\n0.2  # unsafe\n", encoding="utf-8")
        assert LocalStorage(tmp_path).read_arm_parameters(path) == [0.05, 0.2]

    def test_bad_arm_file(self, tmp_path):
        storage = LocalStorage(tmp_path)
        (tmp_path / "bad.txt").write_text("0.1\nlots\n", encoding="utf-8")
        (tmp_path / "empty.txt").write_text("# nothing\n", encoding="utf-8")
        with pytest.raises(ConfigError, match=":2:"):
            storage.read_arm_parameters(tmp_path / "bad.txt")
        with pytest.raises(ConfigError):
            storage.read_arm_parameters(tmp_path / "empty.txt")

    def test_grid_map(self, tmp_path):
        storage = LocalStorage(tmp_path)
        (tmp_path / "ok.map").write_text(SMALL_MAP, encoding="utf-8")
        (tmp_path / "bad.map").write_text("..\n.x\n", encoding="utf-8")
        assert storage.read_grid_map(tmp_path / "ok.map") == SMALL_MAP
        with pytest.raises(ConfigError):
            storage.read_grid_map(tmp_path / "bad.map")

    def test_csv(self, tmp_path):
        storage = LocalStorage(tmp_path / "out")
        path = storage.save_csv("rows.csv", [{"a": 1, "b": "-inf"}, {"a": 2, "b": "0.0"}])
        assert open(path, encoding="utf-8").read() == "a,b\n1,-inf\n2,0.0\n"
        assert storage.file_exists("rows.csv")
        assert storage.load_csv("rows.csv")["a"].tolist() == [1, 2]

    def test_json(self, tmp_path):
        storage = LocalStorage(tmp_path)
        storage.save_json("config.json", {"experiment": "grid_barrier", "n_runs": 2})
        config = ExperimentConfig.model_validate(storage.load_json("config.json"))
        assert config.experiment == ExperimentKind.GRID_BARRIER
        assert not storage.file_exists("missing.json")


class TestCli:
    def test_help(self, capsys):
        assert cli_main(["--help"]) == EXIT_OK
        assert "corridor" in capsys.readouterr().out

    def test_unknown_flag(self):
        assert cli_main(["corridor", "--bogus"]) == EXIT_CONFIG

    def test_invalid_config(self, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"n_runs": 0}), encoding="utf-8")
        assert cli_main(["corridor", "--config", str(config)]) == EXIT_CONFIG
        config.write_text(json.dumps({"experiment": "grid_barrier"}), encoding="utf-8")
        assert cli_main(["corridor", "--config", str(config)]) == EXIT_CONFIG

    def test_epsilon_above_mu(self, tmp_path):
        out = tmp_path / "bandit.csv"
        assert cli_main(["bandit", "--mu", "0.05", "--epsilons", "0.06", "--out", str(out)]) == EXIT_CONFIG
        assert not out.exists()

    def test_oracle(self, tmp_path, capsys):
        path = LocalStorage(tmp_path).write_mdp(build_corridor(15), "corridor.json")
        out = tmp_path / "bstar.csv"
        assert cli_main(["oracle", "--mdp", path, "--out", str(out)]) == EXIT_OK
        assert "unsafe pairs: 31" in capsys.readouterr().out
        table = pd.read_csv(out)
        assert len(table) == 17 * 4
        assert (table["value"] == float("-inf")).sum() == 31

    def test_validate(self, tmp_path, capsys):
        good = LocalStorage(tmp_path).write_mdp(build_corridor(3), "good.json")
        assert cli_main(["validate", "--mdp", good]) == EXIT_OK
        bad = tmp_path / "bad.json"
        bad.write_text(
            json.dumps(
                {"n_states": 1, "n_actions": 1, "transitions": [{"s": 0, "a": 0, "branches": [{"sp": 0, "p": 0.5}]}]}
            ),
            encoding="utf-8",
        )
        assert cli_main(["validate", "--mdp", str(bad)]) == EXIT_CONFIG
        assert "sum to" in capsys.readouterr().out

    def test_same_seed_same_csv(self, tmp_path):
        flags = ["corridor", "--length", "4", "--agents", "3", "--seed", "7"]
        assert cli_main([*flags, "--out", str(tmp_path / "a.csv")]) == EXIT_OK
        assert cli_main([*flags, "--out", str(tmp_path / "b.csv")]) == EXIT_OK
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a_agents.csv").read_bytes() == (tmp_path / "b_agents.csv").read_bytes()

    def test_strict_incomplete(self, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"episode_cap": 1, "max_episodes": 1}), encoding="utf-8")
        flags = ["corridor", "--config", str(config), "--length", "4", "--agents", "2", "--out", str(tmp_path / "c.csv")]
        assert cli_main(flags) == EXIT_OK
        assert cli_main([*flags, "--strict"]) == EXIT_INCOMPLETE

    def test_bandit_arms_file(self, tmp_path):
        arms = tmp_path / "arms.txt"
        arms.write_text("0.01\n0.3\n0.6\n", encoding="utf-8")
        out = tmp_path / "bandit.csv"
        argv = ["bandit", "--arms-file", str(arms), "--runs", "2", "--epsilons", "0.05", "--alphas", "0.1", "--out", str(out)]
        assert cli_main(argv) == EXIT_OK
        runs = pd.read_csv(tmp_path / "bandit_runs.csv")
        assert (runs["n_arms"] == 3).all()
        assert (runs["n_unsafe"] == 2).all()

    @pytest.mark.parametrize("flag", ["--paper-scale", "--full-scale"])
    def test_paper_scale_flag(self, flag, monkeypatch):
        monkeypatch.setattr(settings, "paper_scale", False)
        parser = build_parser()
        assert build_config(parser.parse_args(["grid"])).grid_size == 9
        config = build_config(parser.parse_args(["grid", flag]))
        assert (config.grid_size, config.n_runs) == (15, 1)
        assert build_config(parser.parse_args(["corridor", flag, "--agents", "5"])).n_runs == 5
