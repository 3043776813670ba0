import numpy as np
import pytest

from ioh_tta import forecaster as fc
from ioh_tta.errors import ConfigError, InputError
from ioh_tta.experiment import audit_leakage
from ioh_tta.retrieval import RetrievalConfig, RetrievalLog
from ioh_tta.tta import StreamState, TtaConfig, run_patient, step


@pytest.fixture(scope="module")
def params():
    return fc.init_params(12, 3, 4, hidden_dim=8, seed=0, scale_floor=3.0)


def _cfg(strategy, **kw):
    return TtaConfig(strategy=strategy, lr=1e-3, retrieval=RetrievalConfig(top_k=8), **kw)


def test_config_defaults_and_validation():
    assert TtaConfig().n_epochs == 1 and TtaConfig().w_recon == 1.0
    z = TtaConfig(mode="zero_shot")
    assert z.n_epochs == 3 and z.w_recon == 0.0
    assert TtaConfig(mode="zero_shot", recon_weight=0.5).w_recon == 0.5
    with pytest.raises(ConfigError):
        TtaConfig(mode="online")
    with pytest.raises(ConfigError):
        TtaConfig(strategy="magic")
    with pytest.raises(ConfigError):
        TtaConfig(lr=0)
    with pytest.raises(ConfigError):
        TtaConfig(epochs=0)


def test_first_step_predicts_without_adapting(params, small_test_cohort, small_spec, small_bank):
    s = small_test_cohort[0]
    cfg = _cfg("csa_tta")
    state = StreamState.start(params, small_spec, s.patient_id, 30, 3, cfg)
    pred, state, info = step(state, s.values[:12], small_bank, cfg)
    assert not info.adapted and pred.shape == (4,)
    assert np.array_equal(pred, fc.forward(params, s.values[:12])[0])
    with pytest.raises(InputError):
        step(StreamState.start(params, small_spec, "x", 30, 3, cfg), s.values[:5], None, cfg)


def test_no_history_no_retrieval_matches_frozen(params, small_test_cohort, small_spec):
    s = small_test_cohort[1]
    a = run_patient(s, params, None, _cfg("own_history_tta"), small_spec)
    b = run_patient(s, params, None, _cfg("frozen"), small_spec)
    # the first windows have no complete history fragment yet
    first = [r for r in a.records if not r.info.adapted]
    assert first
    for ra, rb in zip(first, b.records):
        assert ra.pred.tobytes() == rb.pred.tobytes()
    assert b.final_params == params and all(d == 0 for d in b.param_drift)


def test_window_count(params, small_test_cohort, small_spec):
    s = small_test_cohort[0]
    from ioh_tta.series import VitalSeries
    short = VitalSeries(s.patient_id, s.channel_names, 30, s.values[:12 + 3 * 4])
    run = run_patient(short, params, None, _cfg("frozen"), small_spec)
    assert [r.window_start for r in run.records] == [12, 16, 20]
    with pytest.raises(InputError):
        run_patient(VitalSeries("x", s.channel_names, 30, s.values[:15]), params, None,
                    _cfg("frozen"), small_spec)


def test_reset_and_replay(params, small_test_cohort, small_spec, small_bank):
    cfg = _cfg("csa_tta")
    s = small_test_cohort[2]
    a = run_patient(s, params, small_bank, cfg, small_spec)
    b = run_patient(s, params, small_bank, cfg, small_spec)
    assert [r.to_dict() for r in a.records] == [r.to_dict() for r in b.records]
    assert a.final_params == b.final_params
    assert a.final_params != params  # adaptation happened, init params untouched
    assert params == fc.init_params(12, 3, 4, hidden_dim=8, seed=0, scale_floor=3.0)
    assert any(r.info.retrieved_count for r in a.records)


def test_frozen_blocks_untouched(params, small_test_cohort, small_spec, small_bank):
    run = run_patient(small_test_cohort[3], params, small_bank, _cfg("csa_tta"), small_spec)
    for k in params.names():
        if not TtaConfig().update.allows(k):
            assert run.final_params.blocks[k].tobytes() == params.blocks[k].tobytes()


def test_adaptation_uses_only_past(params, small_test_cohort, small_spec, small_bank):
    runs = []
    log = RetrievalLog()
    for s in small_test_cohort:
        run = run_patient(s, params, small_bank, _cfg("csa_tta"), small_spec, log)
        runs.append(run)
        for info in run.infos:
            assert info.latest_used_step < info.window_start
            for pid, start in info.own_provenance:
                assert pid == s.patient_id
                assert start + small_spec.length <= info.window_start
    ids = {s.patient_id for s in small_test_cohort}
    assert audit_leakage(runs, small_bank, ids, small_spec) == []
    assert log.records


def test_audit_flags_contaminated_bank(params, small_test_cohort, small_spec, small_bank):
    run = run_patient(small_test_cohort[0], params, small_bank, _cfg("csa_tta"), small_spec)
    bank_ids = small_bank.patient_ids
    problems = audit_leakage([run], small_bank, bank_ids, small_spec)
    assert problems


def test_zero_shot_runs(params, small_test_cohort, small_spec, small_bank):
    cfg = TtaConfig(mode="zero_shot", strategy="csa_tta", lr=1e-4)
    run = run_patient(small_test_cohort[0], params, small_bank, cfg, small_spec)
    adapted = [i for i in run.infos if i.adapted]
    assert adapted and all(i.epochs == 3 for i in adapted)
    assert all(np.all(np.isfinite(r.pred)) for r in run.records)
