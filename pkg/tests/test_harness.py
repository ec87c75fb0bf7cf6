import logging
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dunbias import acquisition, data, dun, harness
from dunbias.config import ExperimentConfig

TINY = dict(dataset="toy", iterations=20, width=8, dun_depth=2, mcdo_hidden=1, mc_samples=4,
            init_train_size=10, n_queries=2, query_size=5, repetitions=2)


def tiny(kind="downstream", **kw):
    opts = dict(TINY)
    opts.update(kw)
    return ExperimentConfig(kind=kind, **opts)


class TestAggregate:
    def test_single(self):
        out = harness.aggregate([{"q": 0, "v": 1.5}], ["q"], ["v"])
        assert out == [{"q": 0, "count": 1, "v_mean": 1.5, "v_std": 0.0}]

    def test_two(self):
        out = harness.aggregate([{"q": 0, "v": 1.0}, {"q": 0, "v": 3.0}], ["q"], ["v"])
        assert out[0]["v_mean"] == 2.0 and out[0]["v_std"] == pytest.approx(math.sqrt(2), rel=1e-15)

    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=20), st.randoms())
    def test_permutation_invariant(self, values, rnd):
        rows = [{"q": 1, "v": v} for v in values]
        shuffled = list(rows)
        rnd.shuffle(shuffled)
        a, b = harness.aggregate(rows, ["q"], ["v"]), harness.aggregate(shuffled, ["q"], ["v"])
        assert a == b
        assert all(math.isfinite(x) for x in a[0].values())

    def test_empty(self):
        with pytest.raises(ValueError):
            harness.aggregate([], ["q"], ["v"])


class TestActiveRun:
    def test_rows_and_schedule(self, data_dir):
        rows = harness.active_run(tiny(data_dir=str(data_dir)), 0, "dun", "standard", 10.0)
        assert [r["n_train"] for r in rows] == [10, 15, 20]
        assert [r["query"] for r in rows] == [0, 1, 2]
        for r in rows:
            post = np.array([float(v) for v in r["posterior"].split(";")])
            assert post.size == 3 and abs(post.sum() - 1) < 1e-12
            assert r["b_ofb"] == pytest.approx(r["r"] - r["r_lure"], abs=1e-15)
            assert r["seed"] == 0

    def test_query_replays_in_isolation(self, data_dir):
        cfg = tiny(data_dir=str(data_dir))
        _, state, views = harness.prepare(cfg, 1)
        idx, recs = acquisition.uniform_batch(state.pool, 10, harness.stream(cfg, 1, "init"))
        data.acquire(state, idx, recs)
        first = harness.fit_for_state(cfg, "dun", "lure", 1, views, state)
        scores = first.bald(views.subset(state.pool)[0])
        idx, recs = acquisition.sample_batch(scores, state.pool, 5, harness.stream(cfg, 1, "acquire"), 10.0,
                                             start_m=state.m + 1)
        data.acquire(state, idx, recs)
        fitted = harness.fit_for_state(cfg, "dun", "lure", 1, views, state)

        # rebuild the same query from nothing but the split seed and the saved trace
        _, fresh, views2 = harness.prepare(cfg, 1)
        trace = data.AcquisitionTrace.from_csv(state.trace.to_csv(), fresh.pool_size)
        data.acquire(fresh, trace.indices, trace.records)
        again = harness.fit_for_state(cfg, "dun", "lure", 1, views2, fresh)
        a, b = fitted.model.params.state_arrays(), again.model.params.state_arrays()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert np.array_equal(fitted.model.logits.data, again.model.logits.data)

    def test_cold_temperature_is_uniform(self, data_dir):
        cfg = tiny(data_dir=str(data_dir))
        _, state, views = harness.prepare(cfg, 0)
        gen = np.random.default_rng(0)
        scores = gen.uniform(0, 5, len(state.pool))
        _, recs = acquisition.sample_batch(scores, state.pool, 10, gen, 1e-9)
        n = state.pool_size
        for r in recs:
            assert r.alpha == pytest.approx(1 / (n - r.m + 1), abs=1e-6)


class TestDownstream:
    def test_matched_initial_sets(self, data_dir):
        res = harness.run_downstream(tiny(data_dir=str(data_dir)))
        assert not res.failures
        q0 = {(r["rep"], r["objective"]): r for r in res.rows if r["query"] == 0}
        for rep in range(2):
            # initial draws are uniform, so LURE weights are exactly 1 and both arms coincide
            assert q0[(rep, "standard")]["test_nll"] == q0[(rep, "lure")]["test_nll"]

    def test_forced_unit_weights_identical_arms(self, data_dir):
        res = harness.run_downstream(tiny(data_dir=str(data_dir), force_unit_weights=True, repetitions=1))
        std = [r for r in res.rows if r["objective"] == "standard"]
        lure = [r for r in res.rows if r["objective"] == "lure"]
        for a, b in zip(std, lure):
            assert a["test_nll"] == b["test_nll"] and a["r_lure"] == b["r_lure"]

    def test_temperature_sweep_one_curve_each(self, data_dir):
        res = harness.run_temperature_sweep(tiny("temp-sweep", data_dir=str(data_dir), repetitions=1,
                                                 temperatures=(1.0, 100.0)))
        assert sorted({r["temperature"] for r in res.rows}) == [1.0, 100.0]
        assert {r["objective"] for r in res.rows} == {"standard"}
        with pytest.raises(ValueError):
            harness.run_temperature_sweep(tiny("temp-sweep", data_dir=str(data_dir)), temps=[1.0, 0.0])

    def test_ofb_both_models(self, data_dir):
        res = harness.run_ofb(tiny("ofb", data_dir=str(data_dir), repetitions=1, objective="lure"))
        assert {r["model"] for r in res.rows} == {"dun", "mcdo"}
        assert all(r["posterior"] == "" for r in res.rows if r["model"] == "mcdo")

    def test_failed_repetition_logged_others_continue(self, data_dir, monkeypatch, caplog):
        real = harness.fit_model

        def flaky(cfg, kind, rep, *args, **kw):
            if rep == 1:
                raise dun.TrainingError(7, "non-finite loss")
            return real(cfg, kind, rep, *args, **kw)

        monkeypatch.setattr(harness, "fit_model", flaky)
        with caplog.at_level(logging.ERROR):
            res = harness.run_ofb(tiny("ofb", data_dir=str(data_dir), ofb_models=("dun",)))
        assert res.n_failed == 1 and "iteration 7" in res.failures[0]["error"]
        assert {r["rep"] for r in res.rows} == {0}
        assert "repetition 1" in caplog.text


class TestAlb:
    def test_grid_and_full_set(self, data_dir):
        res = harness.run_alb(tiny("alb", data_dir=str(data_dir), repetitions=1, alb_m_step=2, alb_draws=50))
        ms = [r["M"] for r in res.rows]
        n_test = res.rows[0]["N"]
        assert ms == list(range(2, n_test + 1, 2)) + ([n_test] if n_test % 2 else [])
        last = res.rows[-1]
        assert abs(last["bias_r_tilde"]) < 1e-12 and abs(last["bias_r_lure"]) < 1e-12

    def test_uniform_control_flat(self, data_dir):
        res = harness.run_alb(tiny("alb", data_dir=str(data_dir), repetitions=1, alb_m_step=3, alb_draws=400,
                                   proposal="uniform"))
        for r in res.rows:
            assert abs(r["bias_r_tilde"]) <= 3 * r["se_r_tilde"] + 1e-12
            assert abs(r["bias_r_lure"]) <= 3 * r["se_r_lure"] + 1e-12


class TestOutputs:
    def test_csv_deterministic_and_tagged(self, data_dir, tmp_path):
        cfg = tiny(data_dir=str(data_dir), repetitions=1)
        a = harness.write_results(harness.run_experiment(cfg), tmp_path / "a")[0].read_bytes()
        b = harness.write_results(harness.run_experiment(cfg), tmp_path / "b")[0].read_bytes()
        assert a == b
        rows = harness.read_results(tmp_path / "a" / "downstream_toy.csv")
        assert {r["config_hash"] for r in rows} == {cfg.config_hash()}
        assert {r["seed"] for r in rows} == {"0"}

    def test_workers_do_not_change_results(self, data_dir):
        cfg = tiny(data_dir=str(data_dir))
        serial = harness.rows_to_csv(harness.run_experiment(cfg).rows, harness.ACTIVE_COLUMNS)
        cfg.workers = 2
        parallel = harness.rows_to_csv(harness.run_experiment(cfg).rows, harness.ACTIVE_COLUMNS)
        assert serial == parallel

    def test_summary_contents(self, data_dir, tmp_path):
        import json

        cfg = tiny(data_dir=str(data_dir), repetitions=1, n_queries=1)
        _, summary = harness.write_results(harness.run_experiment(cfg), tmp_path)
        doc = json.loads(summary.read_text())
        assert doc["config"] == json.loads(json.dumps(cfg.echo()))
        assert doc["config_hash"] == cfg.config_hash()
        assert doc["version"].startswith("0.1.0")
        assert len(doc["wall_times"]) == 2 and doc["aggregate"][0]["count"] == 1

    def test_trace_and_proposal_artifacts(self, data_dir, tmp_path):
        cfg = tiny(data_dir=str(data_dir), repetitions=1)
        res = harness.run_experiment(cfg)
        harness.write_results(res, tmp_path)
        tdir = tmp_path / "downstream_toy_traces"
        assert sorted(p.name for p in tdir.iterdir()) == [
            "dun_lure_T10_rep0_proposals.csv", "dun_lure_T10_rep0_trace.csv",
            "dun_standard_T10_rep0_proposals.csv", "dun_standard_T10_rep0_trace.csv"]
        _, state, _ = harness.prepare(cfg, 0)
        trace = data.AcquisitionTrace.from_csv((tdir / "dun_lure_T10_rep0_trace.csv").read_text(), state.pool_size)
        assert len(trace) == 20 and trace.records[0].m == 1
        props = harness.read_results(tdir / "dun_lure_T10_rep0_proposals.csv")
        assert list(props[0]) == ["query"] + harness.PROPOSAL_HEADER.split(",")
        q0 = {int(r["pool_index"]): float(r["probability"]) for r in props if r["query"] == "0"}
        assert abs(sum(q0.values()) - 1) < 1e-12
        # the first draw of a batch sees the full proposal, so its alpha is the snapshot probability
        first = trace.records[10]
        assert first.alpha == q0[first.index]

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        harness.atomic_write(tmp_path / "x.csv", "a,b\n")
        assert [p.name for p in tmp_path.iterdir()] == ["x.csv"]
