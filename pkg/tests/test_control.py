import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dopus.control import (
    ControlMode,
    ImpedanceParams,
    SweepExecutor,
    SweepPlan,
    contact_equilibrium,
    contact_force,
    impedance_torque,
    sweep_step,
    write_pose_trace,
)
from dopus.monitor import CommandKind, OrientationCommand
from dopus.pose import ProbePose

from oracles import loop_torque_reference

Z6 = np.zeros(6)


def plan(length=100.0, tilt=0.0):
    return SweepPlan(ProbePose.from_tilt((0, 0, 0), tilt), ProbePose.from_tilt((0, length, 0), tilt))


def test_feedforward_only():
    tau = impedance_torque(np.eye(6), ImpedanceParams(), Z6, Z6, Z6)
    assert tau.tolist() == [0.0, 0.0, 1.0, 0.0, 0.0, 0.0]


def test_centreline_spring():
    p = ImpedanceParams(F_d=np.zeros(6))
    tau = impedance_torque(np.eye(6), p, np.array([0, 0, 0.01, 0, 0, 0]), Z6, Z6)
    assert tau[2] == pytest.approx(2.0, abs=1e-12)
    assert ImpedanceParams().centerline_force == 1.0 and ImpedanceParams().centerline_stiffness == 200.0


def test_contact_constants():
    assert contact_equilibrium() == pytest.approx(0.005)
    assert contact_force(contact_equilibrium()) == pytest.approx(1.0)
    assert contact_force(-0.01) == 0.0


def _spd(rng, scale):
    a = rng.standard_normal((6, 6))
    return scale * (a @ a.T)


def test_superposition_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 8))
        J = rng.standard_normal((6, n))
        p = ImpedanceParams(F_d=rng.standard_normal(6), K=_spd(rng, 50), D=_spd(rng, 5), M=_spd(rng, 1))
        e1, de1, dd1, e2, de2, dd2 = rng.standard_normal((6, 6))
        tau = impedance_torque(J, p, e1, de1, dd1)
        np.testing.assert_allclose(tau, loop_torque_reference(J.tolist(), p.F_d, p.K, p.D, p.M, e1, de1, dd1), atol=1e-9)
        # superposition: the wrench is affine in (F_d, e, de, dde)
        p0 = ImpedanceParams(F_d=np.zeros(6), K=p.K, D=p.D, M=p.M)
        pf = ImpedanceParams(F_d=p.F_d, K=np.zeros((6, 6)), D=np.zeros((6, 6)), M=np.zeros((6, 6)))
        lhs = impedance_torque(J, p, e1 + e2, de1 + de2, dd1 + dd2)
        rhs = impedance_torque(J, pf, Z6, Z6, Z6) + impedance_torque(J, p0, e1, de1, dd1) \
            + impedance_torque(J, p0, e2, de2, dd2)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.integers(0, 1000))
def test_linear_without_feedforward(alpha, seed):
    rng = np.random.default_rng(seed)
    J = rng.standard_normal((6, 7))
    p = ImpedanceParams(F_d=np.zeros(6))
    e, de, dd = rng.standard_normal((3, 6))
    np.testing.assert_allclose(impedance_torque(J, p, alpha * e, alpha * de, alpha * dd),
                               alpha * impedance_torque(J, p, e, de, dd), atol=1e-9)


def test_impedance_validation():
    with pytest.raises(ValueError):
        impedance_torque(np.eye(6), ImpedanceParams(), [np.nan] + [0] * 5, Z6, Z6)
    with pytest.raises(ValueError):
        impedance_torque(np.eye(5), ImpedanceParams(), Z6, Z6, Z6)
    with pytest.raises(ValueError):
        ImpedanceParams(K=-np.eye(6))
    with pytest.raises(ValueError):
        ImpedanceParams(D=np.triu(np.ones((6, 6))))


def test_step_advances_one_mm():
    p = plan()
    pose = sweep_step(p, p.start, 0.1)
    assert pose.position == pytest.approx((0.0, 1.0, 0.0))


def test_hold_keeps_pose():
    p = plan()
    pose = ProbePose.from_tilt((0, 30, 0), 4.0)
    assert sweep_step(p, pose, 0.1, mode=ControlMode.POSITION_HOLD) == pose


def test_rotate_command_holds_and_slews():
    p = plan()
    cmd = OrientationCommand(CommandKind.ROTATE, 5.0, 5.0, 0.0, 1)
    pose = sweep_step(p, ProbePose.from_tilt((0, 30, 0)), 0.1, command=cmd)
    assert pose.position == pytest.approx((0, 30, 0)) and pose.tilt == pytest.approx(2.0)
    with pytest.raises(ValueError, match="limit"):
        sweep_step(p, p.start, 0.1, command=OrientationCommand(CommandKind.ROTATE, 25.0, 10.0, 0.0, 1))
    with pytest.raises(ValueError):
        sweep_step(p, p.start, 0.0)


def test_full_sweep_frame_count():
    p = plan(103.0)
    assert p.n_frames(10) == 103
    ex = SweepExecutor(p, 10.0)
    while not ex.finished:
        ex.step()
    assert ex.steps == 103 and ex.clock == pytest.approx(10.3)
    assert abs(ex.progress - p.length) < 1.0


def test_executor_commands():
    ex = SweepExecutor(plan(), 10.0)
    for _ in range(10):
        ex.step()
    ex.apply(OrientationCommand(CommandKind.ROTATE, 5.0, 5.0, ex.clock, 1))
    for _ in range(20):  # one 2 s dwell
        ex.step()
    assert ex.pose.tilt == pytest.approx(5.0) and ex.progress == pytest.approx(10.0)
    assert ex.mode == ControlMode.POSITION_HOLD
    ex.apply(OrientationCommand(CommandKind.ADOPT, 5.0, 5.0, ex.clock, 1))
    ex.step()
    assert ex.trajectory_tilt == 5.0 and ex.progress == pytest.approx(11.0)
    ex.apply(OrientationCommand(CommandKind.RETURN, 0.0, 0.0, ex.clock, 2))
    for _ in range(3):
        ex.step()
    assert ex.pose.tilt == pytest.approx(0.0) and ex.trajectory_tilt == 5.0
    with pytest.raises(ValueError):
        ex.apply(OrientationCommand(CommandKind.ROTATE, -21.0, -10.0, ex.clock, 3))


def test_plan_validation():
    with pytest.raises(ValueError):
        SweepPlan(ProbePose.from_tilt((0, 0, 0)), ProbePose.from_tilt((0, 0, 0)))
    with pytest.raises(ValueError):
        SweepPlan(ProbePose.from_tilt((0, 0, 0)), ProbePose.from_tilt((0, 1, 0)), speed=0)


def test_pose_trace_csv(tmp_path):
    ex = SweepExecutor(plan(5.0), 10.0)
    ex.step()
    lines = write_pose_trace(ex.trace, tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "t,x,y,z,qw,qx,qy,qz,mode"
    assert lines[2].startswith("0.100,0.000000,1.000000,0.000000,1.000000") and lines[2].endswith("IMPEDANCE")
