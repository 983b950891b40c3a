import json
import math

import numpy as np
import pytest

from bayesdid.simulation import (
    MCMetrics,
    MethodMetrics,
    SimDesignConfig,
    covariance_matrix,
    design_functions,
    draw_errors,
    extreme_pscore_config,
    generate_design,
    hetero_variance,
    metrics_report,
    paper_scale,
    parse_metrics_csv,
    run_monte_carlo,
    simulate_units,
)

# treated share of Design I at p=5, from 3e6 simulated units
DESIGN_I_SHARE = 0.5850
CHEAP = ("or", "dr", "ipw_ht", "ipw_hajek", "twfe")


class TestConfig:
    @pytest.mark.parametrize("kw", [{"design": "V"}, {"n": 49}, {"p": 0}, {"reps": 0},
                                    {"error_kind": "cauchy"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SimDesignConfig(**kw)

    def test_paper_scale(self):
        cfg = paper_scale(SimDesignConfig())
        assert (cfg.reps, cfg.B) == (1000, 5000)


class TestDesigns:
    def test_covariance_entry(self):
        assert covariance_matrix(5)[0, 2] == 0.25

    def test_design_one_index(self):
        g, _ = design_functions("I")
        x = np.array([[1.0, -1.0, 1.0, -1.0, 1.0]])
        assert g(x)[0] == pytest.approx(0.5 * (1 - 1 / 2 + 1 / 3 - 1 / 4 + 1 / 5), rel=1e-14)
        assert g(x)[0] == pytest.approx(0.39167, abs=1e-5)

    def test_design_functions(self):
        x = np.array([[2.0, 3.0]])
        lin, quad = 2 + 3 / 2, 4 + 9 / 2
        g1, h1 = design_functions("I")
        g2, h2 = design_functions("II")
        g3, h3 = design_functions("III")
        g4, h4 = design_functions("IV")
        assert h1(x)[0] == pytest.approx(lin) and h3(x)[0] == pytest.approx(lin)
        assert h2(x)[0] == pytest.approx(0.8 * lin + 0.2 * quad) == h4(x)[0]
        assert g2(x)[0] == pytest.approx(0.5 * lin)
        assert g3(x)[0] == pytest.approx(0.5 * (lin + quad) / 4) == g4(x)[0]

    def test_extreme_preset(self):
        g, _ = design_functions("I", extreme_pscore_config().g_scale)
        assert g(np.array([[1.0, 2.0]]))[0] == pytest.approx(2.0)

    def test_hetero_variance(self):
        x = np.array([[1.0, -1.0], [3.0, 1.0]])
        np.testing.assert_allclose(hetero_variance(x), [0.0, (4 + 4) / 4])

    def test_generated_shapes(self):
        panel, s = generate_design(SimDesignConfig(n=200, p=3), np.random.default_rng(0))
        assert (panel.n, panel.p) == (200, 3)
        np.testing.assert_allclose(s.dy, panel.y2 - panel.y1)

    def test_treated_share(self):
        se = math.sqrt(DESIGN_I_SHARE * (1 - DESIGN_I_SHARE) / 100_000)
        for seed in range(3):
            u = simulate_units(SimDesignConfig(n=100_000, p=5), np.random.default_rng(seed))
            assert abs(u["d"].mean() - DESIGN_I_SHARE) <= 3 * se + 5e-4

    @pytest.mark.parametrize("design", ["I", "II", "III", "IV"])
    @pytest.mark.parametrize("kind", ["normal", "chisq3", "hetero"])
    def test_zero_effect_by_construction(self, design, kind):
        cfg = SimDesignConfig(design=design, n=100_000, p=5, error_kind=kind)
        u = simulate_units(cfg, np.random.default_rng(42))
        gap = u["y2_1"] - u["y2_0"]
        assert abs(gap.mean()) <= 4 * gap.std() / math.sqrt(gap.size)

    def test_chisq_errors_normalised(self):
        e = draw_errors("chisq3", 100_000, np.random.default_rng(1))[0]
        assert abs(e.mean()) <= 4 / math.sqrt(e.size)
        assert abs(e.var() - 1) <= 0.05
        assert e.min() >= -3 / math.sqrt(6)

    def test_control_trend(self):
        # dY | D=0 has mean 2 + (2 k - 1) h(X) with mu = k h
        cfg = SimDesignConfig(n=50_000, p=2, mu_scale=1.5)
        panel, s = generate_design(cfg, np.random.default_rng(3))
        _, h = design_functions("I")
        c = s.control
        resid = s.dy[c] - (2 + 2 * h(s.x[c]))
        assert abs(resid.mean()) <= 4 * resid.std() / math.sqrt(c.sum())


class TestMonteCarlo:
    def test_single_replication(self):
        mc = run_monte_carlo(SimDesignConfig(n=200, p=3, reps=1), CHEAP)
        for m in CHEAP:
            assert mc[m].bias == mc.estimates(m)[0]
            assert mc[m].cp in (0.0, 1.0)

    def test_deterministic(self):
        cfg = SimDesignConfig(n=150, p=2, reps=3, B=50, n_starts=1, seed=5)
        a = run_monte_carlo(cfg, ("bayes", "dr_bayes", "twfe"))
        b = run_monte_carlo(cfg, ("bayes", "dr_bayes", "twfe"))
        assert a == b and a.records == b.records

    def test_exchangeable_substreams(self):
        cfg = SimDesignConfig(n=120, p=2, reps=5, seed=9)
        a = run_monte_carlo(cfg, CHEAP)
        b = run_monte_carlo(cfg, CHEAP, seed_order=[4, 2, 0, 3, 1])
        for m in CHEAP:
            assert sorted(a.estimates(m)) == sorted(b.estimates(m))
            assert a[m].cp == b[m].cp and a[m].bias == pytest.approx(b[m].bias, rel=1e-12)

    def test_parallel_matches_serial(self):
        cfg = SimDesignConfig(n=120, p=2, reps=4, seed=2)
        assert run_monte_carlo(cfg, CHEAP, n_jobs=2) == run_monte_carlo(cfg, CHEAP)

    def test_mc_se_formula(self):
        mc = run_monte_carlo(SimDesignConfig(n=150, p=2, reps=20, seed=1), CHEAP)
        for m in mc.methods.values():
            assert m.mc_se == math.sqrt(m.cp * (1 - m.cp) / m.reps)
            assert 0 <= m.cp <= 1 and m.cil >= 0

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            run_monte_carlo(SimDesignConfig(reps=1), ["dml"])

    def test_failures_counted(self):
        rows = [(0.1, -1.0, 1.0)] * 98 + ["ConvergenceError: x", "ConvergenceError: y"]
        m = MethodMetrics.from_results("dr", rows)
        assert m.failures == 2 and m.reps == 100 and not m.valid
        assert MethodMetrics.from_results("dr", rows[:99] + rows[:1]).valid
        assert m.cp == 1.0 and m.bias == pytest.approx(0.1)


def fake_metrics(p=5, methods=("bayes", "twfe")):
    cfg = SimDesignConfig(p=p, reps=200)
    ms = {m: MethodMetrics(m, 0.1 * i + 1 / 3, 0.95 - 0.1 * i, 0.4 + i, 0.015, 200, i)
          for i, m in enumerate(methods)}
    return MCMetrics(config=cfg, methods=ms)


class TestReport:
    def test_empty_is_header_only(self):
        text = metrics_report(MCMetrics(SimDesignConfig(), {}), "csv")
        assert text.strip().count("\n") == 0 and text.startswith("design,")

    def test_csv_round_trip(self):
        mc = fake_metrics()
        parsed = parse_metrics_csv(metrics_report(mc, "csv"))
        assert [m for _, m in parsed] == list(mc.methods.values())
        assert parsed[0][0] == ("I", 1000, 5, "normal")

    def test_json(self):
        data = json.loads(metrics_report(fake_metrics(), "json"))
        assert [r["method"] for r in data["metrics"]] == ["bayes", "twfe"]
        assert data["cells"][0]["design"] == "I"

    def test_text_layout(self):
        text = metrics_report([fake_metrics(5), fake_metrics(10)], "text")
        lines = text.splitlines()
        assert "p=5" in lines[0] and "p=10" in lines[0]
        assert lines[1].split() == ["method"] + ["Bias", "CP", "CIL"] * 2
        assert lines[2].startswith("bayes") and lines[3].startswith("twfe")
        assert "1/200 failed" in text

    def test_bad_format(self):
        with pytest.raises(ValueError):
            metrics_report(fake_metrics(), "xml")
