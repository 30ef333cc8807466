import csv
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import rafda.experiments as ex
from rafda.enkf import FilterDivergence
from rafda.experiments import (
    ConfigError,
    ExperimentConfig,
    RealizationResult,
    SweepResult,
    read_realizations_csv,
    realization_seed,
    resolve_embedding,
    run_ensemble_study,
    run_noise_sweep,
    run_realization,
    stream_rng,
    summarize,
    worker_count,
)

SMALL = dict(N=300, M=10, D_r=30, transient=5.0, horizon=2.0, n_realizations=3, seed=11)


def small(**kw):
    return ExperimentConfig(**{**SMALL, **kw})


def test_defaults_are_the_published_setup():
    cfg = ExperimentConfig()
    assert (cfg.dt, cfg.eta, cfg.transient, cfg.N, cfg.D_r) == (0.02, 0.2, 40.0, 4000, 300)
    assert (cfg.w, cfg.b, cfg.M, cfg.beta, cfg.alpha) == (0.005, 4.0, 300, 2e-5, 1.0002)
    assert (cfg.theta, cfg.lyapunov_max, cfg.m, cfg.tau) == (40.0, 0.91, 3, 10)
    assert cfg.gamma == 0.01 and cfg.n_realizations == 50
    assert cfg.horizon_steps == 550


@pytest.mark.parametrize(
    "key,value",
    [("eta", -1.0), ("dt", 0.0), ("N", 0), ("M", 1), ("alpha", 0.99), ("beta", -1e-3), ("theta", 0.0),
     ("n_realizations", 0), ("m", 0), ("tau", -2), ("seed", -1), ("gamma", float("nan")), ("w", float("inf"))],
)
def test_range_errors_name_the_key(key, value):
    with pytest.raises(ConfigError, match=key):
        ExperimentConfig.from_json({key: value})


def test_json_validation():
    with pytest.raises(ConfigError, match="unknown config key 'sigma'"):
        ExperimentConfig.from_json({"sigma": 10})
    with pytest.raises(ConfigError, match="N must be an integer"):
        ExperimentConfig.from_json({"N": 10.5})
    with pytest.raises(ConfigError, match="eta must be a number"):
        ExperimentConfig.from_json({"eta": "0.2"})
    with pytest.raises(ConfigError, match="pinned together"):
        ExperimentConfig.from_json({"m": None})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json([1, 2])
    assert ExperimentConfig.from_json({"m": None, "tau": None}).m is None


@settings(max_examples=60, deadline=None)
@given(
    st.floats(0, 1e3),
    st.floats(1e-6, 1.0),
    st.integers(1, 10**6),
    st.floats(1.0, 2.0),
    st.one_of(st.none(), st.tuples(st.integers(1, 10), st.integers(1, 50))),
)
def test_config_json_round_trip(eta, beta, n, alpha, emb):
    m, tau = emb if emb is not None else (None, None)
    cfg = ExperimentConfig(eta=eta, beta=beta, N=n, alpha=alpha, m=m, tau=tau)
    assert ExperimentConfig.from_json(cfg.to_json()) == cfg


def test_stream_prefixes_are_disjoint():
    seen = set()
    for i in range(1000):
        for label in ex.STREAMS:
            prefix = tuple(stream_rng(5, i, label).integers(0, 2**63, size=2))
            assert prefix not in seen
            seen.add(prefix)
    assert len({realization_seed(5, i) for i in range(1000)}) == 1000


def test_realization_is_deterministic_and_non_negative():
    cfg = small()
    a = run_realization(cfg, 0)
    b = run_realization(cfg, 0)
    assert (a.seed, a.tau_f_lr, a.tau_f_rafda, a.diverged) == (b.seed, b.tau_f_lr, b.tau_f_rafda, b.diverged)
    assert a.tau_f_lr >= 0 and a.tau_f_rafda >= 0
    assert a.eta == cfg.eta and a.seed == realization_seed(cfg.seed, 0)


def test_divergence_scores_zero(monkeypatch):
    def diverge(*args, **kwargs):
        raise FilterDivergence(3, "forced", None, None)

    monkeypatch.setattr(ex, "run_rafda", diverge)
    r = run_realization(small(), 0)
    assert r.diverged and r.tau_f_rafda == 0.0


def test_realization_result_rejects_negative_times():
    with pytest.raises(ValueError):
        RealizationResult(1, 0.2, -0.1, 0.0, False, 1.0)


def test_adding_realizations_leaves_existing_ones_unchanged():
    two = run_ensemble_study(small(n_realizations=2), workers=1).realizations
    three = run_ensemble_study(small(n_realizations=3), workers=1).realizations
    for a, b in zip(two, three):
        assert (a.seed, a.tau_f_lr, a.tau_f_rafda) == (b.seed, b.tau_f_lr, b.tau_f_rafda)


def test_single_realization_summary():
    study = run_ensemble_study(small(n_realizations=1), workers=1)
    r = study.realizations[0]
    assert study.summary["lr"]["mean"] == r.tau_f_lr == study.summary["lr"]["median"]
    assert study.summary["rafda"]["mean"] == r.tau_f_rafda
    assert study.histogram_lr.sum() == 1 and study.histogram_rafda.sum() == 1
    np.testing.assert_allclose(np.diff(study.histogram_edges), 0.25)


def _strip_wall(path):
    with open(path, newline="") as fh:
        return [{k: v for k, v in row.items() if k != "wall_ms"} for row in csv.DictReader(fh)]


def test_persisted_summary_matches_memory(tmp_path):
    study = run_ensemble_study(small(), tmp_path, workers=1)
    for name in ("config.json", "realizations.csv", "summary.json", "histogram.csv"):
        assert (tmp_path / name).exists()
    header = (tmp_path / "realizations.csv").read_text().splitlines()[0]
    assert header == "seed,eta,tau_f_lr,tau_f_rafda,diverged,wall_ms"
    again = summarize(read_realizations_csv(tmp_path / "realizations.csv"))
    for label in ("lr", "rafda"):
        for stat in ("mean", "median", "std", "skewness"):
            assert again[label][stat] == pytest.approx(study.summary[label][stat], abs=1e-12)


def test_resume_after_abort_gives_identical_output(tmp_path, monkeypatch):
    cfg = small(n_realizations=4)
    reference = tmp_path / "ref"
    run_ensemble_study(cfg, reference, workers=1)

    calls = {"n": 0}
    real = ex.run_realization

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 3:
            raise KeyboardInterrupt
        return real(*args, **kwargs)

    resumed = tmp_path / "resumed"
    monkeypatch.setattr(ex, "run_realization", flaky)
    with pytest.raises(KeyboardInterrupt):
        run_ensemble_study(cfg, resumed, workers=1)
    assert len(list((resumed / "parts").glob("*.json"))) == 2
    monkeypatch.setattr(ex, "run_realization", real)
    run_ensemble_study(cfg, resumed, workers=1)
    assert _strip_wall(resumed / "realizations.csv") == _strip_wall(reference / "realizations.csv")
    for name in ("histogram.csv", "config.json"):
        assert (resumed / name).read_text() == (reference / name).read_text()


def test_cache_ignores_parts_from_other_configs(tmp_path):
    run_ensemble_study(small(n_realizations=1), tmp_path, workers=1)
    other = run_ensemble_study(small(n_realizations=1, beta=1e-3), tmp_path, workers=1)
    fresh = run_ensemble_study(small(n_realizations=1, beta=1e-3), workers=1)
    assert other.realizations[0].tau_f_lr == fresh.realizations[0].tau_f_lr


def test_parallel_matches_serial():
    cfg = small(n_realizations=2)
    serial = run_ensemble_study(cfg, workers=1).realizations
    parallel = run_ensemble_study(cfg, workers=2).realizations
    assert [(r.tau_f_lr, r.tau_f_rafda) for r in serial] == [(r.tau_f_lr, r.tau_f_rafda) for r in parallel]


def test_noise_sweep(tmp_path):
    sweep = run_noise_sweep(small(n_realizations=2), [0.01, 1.0], tmp_path, workers=1)
    assert sweep.eta == [0.01, 1.0] and sweep.n == [2, 2]
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "eta,mean_lr,std_lr,mean_rafda,std_rafda,n" and len(lines) == 3
    single = run_ensemble_study(small(n_realizations=2, eta=1.0), workers=1)
    assert sweep.mean_rafda[1] == single.summary["rafda"]["mean"]
    with pytest.raises(ValueError):
        run_noise_sweep(small(), [1.0, 0.1])
    with pytest.raises(ValueError):
        SweepResult([1.0, 1.0], [0, 0], [0, 0], [0, 0], [0, 0], [1, 1])


def test_auto_embedding_from_pilot_series():
    m, tau = resolve_embedding(small(m=None, tau=None, eta=0.01))
    assert m == 3 and 7 <= tau <= 14
    assert resolve_embedding(small()) == (3, 10)


def test_worker_count(monkeypatch):
    monkeypatch.setenv("RAFDA_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("RAFDA_THREADS", "zero")
    with pytest.raises(ConfigError):
        worker_count()
    monkeypatch.delenv("RAFDA_THREADS")
    assert worker_count() >= 1


def test_forecast_comparison_starts_together():
    out = ex.forecast_comparison(small(), 0)
    v = out["validation"]
    assert v.shape == (small().horizon_steps + 1, 3)
    for key in ("lr", "rafda"):
        np.testing.assert_array_equal(out[key][0], v[0])
        assert len(out[key]) <= len(v)


def test_attractor_trial_shapes():
    trial = ex.attractor_trial(small(), 0, lyapunov_times=20.0, reference_length=1500)
    assert trial.lr.box_low.shape == (3,)
    assert 0.0 <= trial.lr.occupancy <= 1.0
    assert trial.consistent("lr") == trial.lr.consistent()
    assert ex.train_models(small(), 0).w_lr.W.shape == (3, 30)
