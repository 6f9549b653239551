from dataclasses import replace

import numpy as np
import pytest

from auditsample.simulation import (ConditionSpec, SimulationError, build_joint, draw_population,
                                    population_truth, run_condition, run_variance_condition, scaled,
                                    variance_conditions)


def conditional_mutual_information(a, b, c):
    """Plug-in estimate of I(A; B | C) in nats."""
    total = 0.0
    n = a.size
    for cv in np.unique(c):
        mask = c == cv
        pa = np.bincount(a[mask])
        pb = np.bincount(b[mask])
        joint = np.zeros((pa.size, pb.size))
        np.add.at(joint, (a[mask], b[mask]), 1)
        nc = mask.sum()
        for i in range(pa.size):
            for j in range(pb.size):
                if joint[i, j] > 0:
                    total += joint[i, j] / n * np.log(joint[i, j] * nc / (pa[i] * pb[j]))
    return total


def test_uniform_blocks_give_uniform_joint():
    spec = ConditionSpec(wx=np.ones((3, 3)), wy=np.ones((3, 3)), xz=np.ones((2, 3)))
    joint = build_joint(spec)
    np.testing.assert_allclose(joint, 1 / joint.size)


def test_benchmark_condition_audits_three_percent():
    joint = build_joint(ConditionSpec.parse("WX1,WY1,XZ1"))
    assert joint.sum() == pytest.approx(1.0)
    assert joint[..., 1].sum() == pytest.approx(0.03, abs=5e-4)


def test_selective_condition_audits_by_x_only():
    joint = build_joint(ConditionSpec.parse("WX1,WY1,XZ4"))
    pz_given_x = joint[..., 1].sum(axis=(0, 2)) / joint.sum(axis=(0, 2, 3))
    assert pz_given_x[0] > pz_given_x[1] > pz_given_x[2]


def test_w_and_z_are_independent_given_x():
    joint = build_joint(ConditionSpec.parse("WX4,WY2,XZ4"))
    w, x, y, z = draw_population(joint, 1_000_000, np.random.default_rng(0))
    assert conditional_mutual_information(w, z, x) < 1e-3
    assert conditional_mutual_information(y, z, x) < 1e-3


def test_population_truth():
    w = np.array([0, 0, 1, 1, 1])
    x = np.array([0, 1, 1, 1, 0])
    pw, pxw = population_truth(w, x, 2, 2)
    np.testing.assert_allclose(pw, [0.4, 0.6])
    np.testing.assert_allclose(pxw, [[0.5, 1 / 3], [0.5, 2 / 3]])


def test_condition_labels_round_trip():
    for label in ("WX1,WY1,XZ1", "WX4,WY3,XZ4", "WX4,WY1,XZ1*"):
        assert ConditionSpec.parse(label).name == label
    assert not ConditionSpec.parse("WX4,WY1,XZ1*").optimize
    with pytest.raises(ValueError):
        ConditionSpec.parse("WX5,WY1,XZ1")
    with pytest.raises(ValueError):
        ConditionSpec.parse("WX1,WY1")


def test_replicates_are_reproducible():
    spec = ConditionSpec.parse("WX1,WY1,XZ4", n_pop=2000, n_replicates=2, m_plus=20, m_minus=2, n_attempts=3)
    a = run_condition(spec, 17)
    b = run_condition(spec, 17)
    for ra, rb in zip(a, b):
        assert ra.deviance_after == rb.deviance_after
        np.testing.assert_array_equal(ra.pw_after, rb.pw_after)
        np.testing.assert_array_equal(ra.pxw_after, rb.pxw_after)
    c = run_condition(spec, 18)
    assert c[0].deviance_before != a[0].deviance_before


def test_replicate_contents():
    spec = ConditionSpec.parse("WX1,WY1,XZ4", n_pop=3000, n_replicates=1, m_plus=30, m_minus=5, n_attempts=3)
    (r,) = run_condition(spec, 5)
    assert r.n_after <= r.n_before + 30 and r.n_after >= r.n_before - 5
    assert r.deviance_after <= r.deviance_before
    assert r.pw_true.sum() == pytest.approx(1.0)
    assert r.pw_before.sum() == pytest.approx(1.0)
    assert r.pw_after.sum() == pytest.approx(1.0)


def test_unoptimized_condition_keeps_the_sample():
    spec = ConditionSpec.parse("WX1,WY1,XZ1*", n_pop=2000, n_replicates=1)
    (r,) = run_condition(spec, 3)
    assert r.n_before == r.n_after
    np.testing.assert_array_equal(r.pw_before, r.pw_after)


def test_failures_carry_the_replicate_index():
    spec = ConditionSpec.parse("WX1,WY1,XZ4", n_pop=50, n_replicates=1, m_plus=10_000, m_minus=0)
    with pytest.raises(SimulationError) as err:
        run_condition(spec, 1)
    assert err.value.replicate == 0


def test_variance_summary_shapes():
    spec = replace(variance_conditions()[-1], n_replicates=20, n_pop=3000)
    s = run_variance_condition(spec, 2)
    assert s.ratio_pw.shape == (3,) and s.ratio_pxw.shape == (3, 3)
    assert np.all(s.sd_pw > 0)


def test_scale_presets():
    spec = ConditionSpec.parse("WX1,WY1,XZ4")
    assert scaled(spec, "desk").n_replicates == 100
    assert scaled(spec, "paper").n_attempts == 200
    assert [c.name for c in variance_conditions()] == [
        "WX4,WY1,XZ4", "WX4,WY2,XZ4", "WX4,WY3,XZ4", "WX4,WY4,XZ4", "WX4,WY1,XZ1*"]
