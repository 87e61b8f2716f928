import math
from dataclasses import replace

import numpy as np
import pytest

from ibtok.harness import (
    METRIC_COLUMNS,
    ConfigError,
    TrainConfig,
    TrainingAbort,
    config_from_dict,
    converged,
    dump_config,
    load_config,
    nuisance_probe_error,
    parse_grid,
    probe,
    report_cka,
    run_training,
    sweep,
)
from ibtok.harness.train import MetricsRecord, read_metrics_csv, write_metrics_csv
from ibtok.synthdata import GeneratorConfig, generate
from ibtok.toymodel import InfoTokHyper, ToyModel


def tiny(**kw) -> TrainConfig:
    base = TrainConfig(generator=GeneratorConfig(n=200), steps=20, batch_size=16, log_interval=5)
    return replace(base, **kw).validate()


class TestConfig:
    def test_defaults(self):
        cfg = config_from_dict({})
        assert cfg == TrainConfig()

    def test_shorthand_and_override(self):
        cfg = config_from_dict({"hyper": {"beta": 2.0, "beta_g": 0.5, "alpha": 0.0}})
        h = cfg.hyper
        assert (h.beta_u, h.beta_g, h.alpha_u, h.alpha_g) == (2.0, 0.5, 0.0, 0.0)

    @pytest.mark.parametrize("data", [
        {"stepz": 3},
        {"generator": {"classes": 3}},
        {"hyper": {"gamma": 1.0}},
        {"model": {"width": 3}},
        {"optimizer": "adam"},
        {"batch_size": 1},
        {"steps": -1},
        {"hyper": {"tau": 0.0}},
        {"generator": {"num_classes": 1}},
    ])
    def test_rejected(self, data):
        with pytest.raises(ConfigError):
            config_from_dict(data)

    def test_yaml_round_trip(self, tmp_path):
        cfg = tiny(hyper=InfoTokHyper(0.5, 2.0, 0.0, 1.0, 0.3, 0.4), seed=3)
        path = tmp_path / "c.yaml"
        dump_config(cfg, path)
        assert load_config(path) == cfg

    def test_unreadable_yaml(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("steps: [1,\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_with_seed_replaces_both_seeds(self):
        cfg = TrainConfig().with_seed(7)
        assert cfg.seed == 7 and cfg.generator.seed == 7

    def test_dims_follow_generator(self):
        cfg = config_from_dict({"generator": {"num_classes": 3, "d_text": 5, "d_image": 10}})
        d = cfg.dims
        assert (d.n_classes, d.d_latent, d.d_image) == (3, 5, 10)


class TestProbes:
    def test_separable(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 4, 400)
        x = np.eye(4)[y] * 5 + 0.1 * rng.standard_normal((400, 4))
        assert probe(x, y) == 1.0

    def test_random_labels_near_chance(self):
        rng = np.random.default_rng(1)
        x, y = rng.standard_normal((2000, 6)), rng.integers(0, 4, 2000)
        acc = probe(x, y)
        # 400 held-out rows: chance 0.25 with sd ~0.022
        assert abs(acc - 0.25) < 0.1

    def test_probe_needs_enough_samples(self):
        with pytest.raises(ValueError):
            probe(np.zeros((10, 2)), np.arange(10) % 2)
        with pytest.raises(ValueError):
            probe(np.zeros((100, 2)), np.zeros(100))

    def test_nuisance_recoverable(self):
        rng = np.random.default_rng(2)
        nuis = rng.standard_normal((500, 2))
        x = np.hstack([nuis, rng.standard_normal((500, 3))])
        assert nuisance_probe_error(x, nuis) < 0.01

    def test_nuisance_absent(self):
        rng = np.random.default_rng(3)
        err = nuisance_probe_error(rng.standard_normal((500, 3)), rng.standard_normal((500, 2)))
        assert err > 0.9

    def test_no_nuisance_columns(self):
        assert math.isnan(nuisance_probe_error(np.ones((20, 2)), np.zeros((20, 0))))

    def test_cka_in_unit_interval(self):
        cfg = GeneratorConfig(n=100)
        held = generate(cfg, 1)
        model = ToyModel(seed=0)
        val = report_cka(model, held)
        assert 0.0 <= val <= 1.0 + 1e-12


class TestTraining:
    def test_zero_learning_rate_keeps_parameters(self):
        cfg = tiny(learning_rate=0.0)
        res = run_training(cfg)
        init = run_training(replace(cfg, steps=0))
        for k in res.params:
            assert res.params[k].tobytes() == init.params[k].tobytes()

    def test_zero_steps_records_initial_state(self):
        res = run_training(tiny(steps=0))
        assert [r.step for r in res.records] == [0]
        assert res.records[0].loss_total is not None

    def test_logging_schedule(self):
        res = run_training(tiny(steps=12))
        assert [r.step for r in res.records] == [0, 5, 10, 12]
        assert len(res.breakdowns) == 13

    def test_deterministic(self):
        a, b = run_training(tiny()), run_training(tiny())
        assert [r.as_dict() for r in a.records] == [r.as_dict() for r in b.records]
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()

    def test_seed_changes_run(self):
        a, b = run_training(tiny()), run_training(tiny().with_seed(1))
        assert a.records[-1].loss_total != b.records[-1].loss_total

    def test_loss_decreases(self):
        res = run_training(tiny(steps=100, log_interval=100))
        assert res.records[-1].loss_total < res.records[0].loss_total

    def test_identities_hold_every_step(self):
        cfg = tiny(hyper=InfoTokHyper(0.5, 2.0, 1.5, 0.3, 0.4, 0.3))
        for bd in run_training(cfg).breakdowns:
            assert bd.infotok_residual(cfg.hyper) < 1e-12
            assert bd.total_residual(cfg.hyper) < 1e-12

    def test_derived_metrics(self):
        cfg = tiny()
        for r in run_training(cfg).records:
            assert r.compact_bound_u == r.kl_u
            assert r.suff_bound_u == pytest.approx(r.suff_u + math.log(4), abs=1e-12)
            assert r.align_estimate_u == pytest.approx(r.align_u + math.log(16), abs=1e-12)
            assert r.align_estimate_u <= math.log(16)

    def test_alpha_zero_removes_alignment(self):
        cfg = tiny(hyper=InfoTokHyper(1.0, 1.0, 0.0, 0.0, 0.1, 0.2))
        for bd in run_training(cfg).breakdowns:
            u = bd.kl_u - bd.suff_u
            g = bd.kl_g - bd.suff_g
            assert abs(bd.loss_infotok - (u + g)) < 1e-12

    def test_lambda_zero_matches_task_only_trainer(self):
        cfg = tiny(steps=100, hyper=InfoTokHyper(lam=0.0))
        with_reg = run_training(cfg, include_infotok=True)
        without = run_training(cfg, include_infotok=False)
        for k in with_reg.params:
            assert with_reg.params[k].tobytes() == without.params[k].tobytes()
        assert [b.loss_mllm for b in with_reg.breakdowns] == [b.loss_mllm for b in without.breakdowns]

    def test_divergence_aborts(self):
        with pytest.raises(TrainingAbort) as info:
            run_training(tiny(learning_rate=1e4, optimizer="gd"))
        assert info.value.step > 0
        assert info.value.breakdown is not None

    def test_converged_averages_tail(self):
        recs = [MetricsRecord(step=s, kl_u=float(s)) for s in (0, 50, 90, 95, 100)]
        out = converged(recs, 100)
        assert out.kl_u == pytest.approx(95.0)
        assert out.kl_g is None


class TestMetricsCsv:
    def test_columns_and_round_trip(self, tmp_path):
        res = run_training(tiny(steps=5))
        path = tmp_path / "m.csv"
        write_metrics_csv(res.records, path)
        header = path.read_text().splitlines()[0].split(",")
        assert tuple(header) == METRIC_COLUMNS
        rows = read_metrics_csv(path)
        for row, rec in zip(rows, res.records):
            for c in METRIC_COLUMNS:
                assert row[c] == getattr(rec, c)


class TestSweep:
    def test_parse_grid(self):
        assert parse_grid("beta=0.1,1,10") == ("beta", [0.1, 1.0, 10.0])
        with pytest.raises(ConfigError):
            parse_grid("gamma=1")
        with pytest.raises(ConfigError):
            parse_grid("beta")
        with pytest.raises(ConfigError):
            parse_grid("beta=a,b")

    def test_single_point_equals_train(self):
        cfg = tiny()
        result = sweep(cfg, "beta", [1.0])
        direct = converged(run_training(cfg).records, cfg.steps)
        assert result.entries[0].record.as_dict() == direct.as_dict()
        assert result.median(1.0, "kl_u") == direct.kl_u

    def test_workers_do_not_change_results(self):
        cfg = tiny(steps=10)
        a = sweep(cfg, "alpha", [0.0, 1.0], seeds=[0, 1])
        b = sweep(cfg, "alpha", [0.0, 1.0], seeds=[0, 1], workers=2)
        assert [e.record.as_dict() for e in a.entries] == [e.record.as_dict() for e in b.entries]

    def test_failed_runs_kept(self):
        cfg = tiny(learning_rate=1e4, optimizer="gd")
        result = sweep(cfg, "lambda", [0.1])
        assert not result.complete and result.entries[0].failed
        with pytest.raises(ValueError):
            result.median(0.1, "kl_u")
