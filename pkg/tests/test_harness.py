import json
import math

import pytest

from gpght import harness
from gpght.harness import (
    SFN_OD_IDS,
    ConfigError,
    EvalReport,
    ExperimentConfig,
    ReportRow,
    collect_cells,
    emit_curve,
    emit_report,
    parse_report,
    read_curve,
    run_experiment,
    sota_probability,
)
from gpght.network import StochasticNetwork, normal_cdf
from gpght.policy import Policy
from gpght.trainer import CurvePoint, TrainConfig

T_STAR = 105.99992259717969
TINY_TRAIN = TrainConfig(iterations=2, batch_size=4, eval_every=0, eval_samples=20, train_pool=50)


def forced_policy(net, favoured_edge, **kw):
    """Policy whose logits are dominated by a bias towards one edge."""
    policy = Policy.for_network(net, 106.0, seed=0, embed_dim=8, num_heads=2, **kw)
    policy.params["head_w"].data[:] = 0.0
    policy.params["head_b"].data[:] = -50.0
    policy.params["head_b"].data[favoured_edge] = 50.0
    return policy


class TestSotaProbability:
    def test_extreme_budgets(self, synthetic):
        policy = Policy.for_network(synthetic, 106.0, embed_dim=8, num_heads=2)
        assert sota_probability(policy, synthetic, (0, 4), 1e6, 500, 1) == (1.0, 0.0)
        assert sota_probability(policy, synthetic, (0, 4), 0.0, 500, 1) == (0.0, 0.0)

    def test_deterministic_in_seed(self, synthetic):
        policy = Policy.for_network(synthetic, 106.0, embed_dim=8, num_heads=2)
        a = sota_probability(policy, synthetic, (0, 4), T_STAR, 2000, 9)
        assert a == sota_probability(policy, synthetic, (0, 4), T_STAR, 2000, 9)
        assert a[1] == pytest.approx(math.sqrt(a[0] * (1 - a[0]) / 2000))

    def test_fixed_route_policy(self, synthetic):
        policy = forced_policy(synthetic, favoured_edge=1)   # always B -> C
        j, se = sota_probability(policy, synthetic, (0, 4), T_STAR, 100_000, 3)
        assert abs(j - normal_cdf((T_STAR - 106.0) / 2.0)) < 3 * se

    @pytest.mark.parametrize("p", [0.1, 0.5, 0.9])
    def test_estimator_consistency(self, p):
        from scipy.special import ndtri
        line = StochasticNetwork(2, [0], [1], [10.0], [[1.0]])
        budget = 10.0 + float(ndtri(p))
        policy = Policy.for_network(line, 10.0, embed_dim=8, num_heads=2)
        j, _ = sota_probability(policy, line, (0, 1), budget, 10_000, 21)
        assert abs(j - p) <= 3 * math.sqrt(p * (1 - p) / 10_000)

    def test_num_eval_validated(self, synthetic):
        with pytest.raises(ConfigError):
            sota_probability(forced_policy(synthetic, 1), synthetic, (0, 4), T_STAR, 0, 0)


class TestConfig:
    def test_defaults_are_valid(self):
        ExperimentConfig()

    @pytest.mark.parametrize("kw", [
        dict(budget_multipliers=(0.0,)),
        dict(budget_multipliers=(-1.0, 1.0)),
        dict(eval_samples=0),
        dict(variants=("full", "transformer")),
        dict(od_pairs=((1, 2, 3),)),
        dict(seeds=()),
        dict(policy={"variant": "linear"}),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ExperimentConfig(**kw)

    def test_od_checked_against_network(self):
        with pytest.raises(ConfigError):
            run_experiment(ExperimentConfig(od_pairs=((0, 9),), train=TINY_TRAIN))
        with pytest.raises(ConfigError, match="unreachable"):
            run_experiment(ExperimentConfig(od_pairs=((4, 0),), train=TINY_TRAIN))

    def test_dict_round_trip(self):
        cfg = ExperimentConfig(network="sfn", od_pairs=SFN_OD_IDS, budget_multipliers=(0.95, 1, 1.05),
                               train=TINY_TRAIN, policy={"embed_dim": 8}, seeds=(0, 1))
        again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg and again.hash() == cfg.hash()

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"netwrok": "sfn"})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"train": {"iters": 3}})

    def test_hash_tracks_meaning(self):
        base = ExperimentConfig(train=TINY_TRAIN)
        same = ExperimentConfig.from_dict({**base.to_dict(), "budget_multipliers": [1], "eval_samples": 10000.0})
        assert same.hash() == base.hash()
        changes = [dict(network="sfn"), dict(network_seed=1), dict(od_pairs=((0, 3),)),
                   dict(budget_multipliers=(1.05,)), dict(eval_samples=500), dict(seeds=(1,)),
                   dict(variants=("linear",)), dict(train_budget_multiplier=1.0), dict(eval_seed=3),
                   dict(policy={"embed_dim": 16}), dict(train=TrainConfig(iterations=3))]
        hashes = {base.hash()}
        for kw in changes:
            cfg = ExperimentConfig(**{**dict(train=TINY_TRAIN), **kw})
            hashes.add(cfg.hash())
        assert len(hashes) == len(changes) + 1


def tiny_experiment(**kw):
    base = dict(network="sfn", od_pairs=SFN_OD_IDS, budget_multipliers=(0.95, 1.0, 1.05), train=TINY_TRAIN,
                policy={"embed_dim": 8, "num_heads": 2, "num_layers": 1}, eval_samples=40, seeds=(0,))
    base.update(kw)
    return ExperimentConfig(**base)


class TestRunExperiment:
    def test_cartesian_product(self):
        report = run_experiment(tiny_experiment())
        assert len(report.rows) == 15
        assert {(r.origin, r.destination) for r in report.rows} == set(SFN_OD_IDS)
        for r in report.rows:
            assert 0.0 <= r.J <= 1.0 and r.stderr == pytest.approx(math.sqrt(r.J * (1 - r.J) / 40))
            assert r.budget == pytest.approx(r.multiplier * r.t_let)

    def test_table_two_shape(self, tmp_path):
        cfg = tiny_experiment(variants=("full", "no_history", "linear", "vanilla_pg"), train_budget_multiplier=1.0)
        report = run_experiment(cfg, tmp_path)
        assert len(report.rows) == 60
        assert {r.variant for r in report.rows} == {"full", "no_history", "linear", "vanilla_pg"}
        assert len(list((tmp_path / "cells").glob("*.npz"))) == 20

    def test_rerun_is_identical_and_resumes(self, tmp_path, monkeypatch):
        cfg = tiny_experiment(od_pairs=SFN_OD_IDS[:2], budget_multipliers=(1.0,))
        first = run_experiment(cfg, tmp_path / "a")
        second = run_experiment(cfg, tmp_path / "b")
        assert first.key_rows() == second.key_rows()
        assert first.metadata["config_hash"] == second.metadata["config_hash"]
        a = (tmp_path / "a" / "report.csv").read_bytes()
        assert a == (tmp_path / "b" / "report.csv").read_bytes()

        def boom(*args, **kwargs):
            raise AssertionError("finished cells must not be retrained")

        monkeypatch.setattr(harness, "train", boom)
        assert run_experiment(cfg, tmp_path / "a").key_rows() == first.key_rows()

    def test_partial_report_on_failure(self, tmp_path, monkeypatch):
        cfg = tiny_experiment(od_pairs=SFN_OD_IDS[:2], budget_multipliers=(1.0,))
        real_train = harness.train
        calls = []

        def flaky(*args, **kwargs):
            calls.append(1)
            if len(calls) == 2:
                raise RuntimeError("disk on fire")
            return real_train(*args, **kwargs)

        monkeypatch.setattr(harness, "train", flaky)
        with pytest.raises(RuntimeError):
            run_experiment(cfg, tmp_path)
        partial = parse_report(tmp_path / "report.csv")
        assert len(partial.rows) == 1 and partial.metadata["finished"] is None
        monkeypatch.setattr(harness, "train", real_train)
        assert len(run_experiment(cfg, tmp_path).rows) == 2

    def test_collect_cells(self, tmp_path):
        cfg = tiny_experiment(od_pairs=SFN_OD_IDS[:1], seeds=(0, 1), budget_multipliers=(1.0, 1.05),
                              train_budget_multiplier=1.0)
        report = run_experiment(cfg, tmp_path)
        collected = collect_cells(tmp_path)
        assert collected.key_rows() == report.key_rows()
        summary = harness.summarize(collected)
        assert len(summary) == 2 and all(s["seeds"] == 2 for s in summary)


class TestFiles:
    def test_empty_curve(self, tmp_path):
        emit_curve([], tmp_path / "c.csv")
        assert (tmp_path / "c.csv").read_text() == "iteration,J_mean,J_std,wallclock_s\n"
        assert read_curve(tmp_path / "c.csv") == []

    def test_curve_rows(self, tmp_path):
        curve = [CurvePoint(5 * (i + 1), 0.5 + i / 1000, 0.01, 0.1 * i) for i in range(40)]
        emit_curve(curve, tmp_path / "c.csv", {"lr": 1e-3})
        back = read_curve(tmp_path / "c.csv")
        assert back == curve
        its = [p.iteration for p in back]
        assert len(its) == 40 and all(b > a for a, b in zip(its, its[1:]))
        assert json.loads((tmp_path / "c.json").read_text())["config"] == {"lr": 1e-3}

    def test_report_round_trip(self, tmp_path):
        rows = [ReportRow(1, 14, 0.95, 0.95 * 23.5, "full", 0, 0.1234567890123, 0.003, 23.5),
                ReportRow(1, 14, 1.05, 1.05 * 23.5, "linear", 2, 1.0 / 3.0, 0.004, 23.5)]
        emit_report(EvalReport(rows, {"config_hash": "abc"}), tmp_path / "r.csv")
        back = parse_report(tmp_path / "r.csv")
        assert back.key_rows() == sorted(rows, key=lambda r: (r.origin, r.destination, r.multiplier, r.variant,
                                                               r.seed))
        assert back.metadata == {"config_hash": "abc"}

    def test_row_range_checked(self):
        with pytest.raises(ValueError):
            ReportRow(0, 1, 1.0, 1.0, "full", 0, 1.5, 0.0, 1.0)
