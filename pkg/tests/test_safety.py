import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safelora import envs, nn, ppo, safety
from safelora.safety import Box, GateMode, GateState, SafetySpec

SPEC = safety.default_safety_spec("tracker")
REC = safety.default_recovery("tracker")
MAIN = np.array([0.7])


class Tagged:
    """Recovery stub whose action is recognisable in a trace."""

    def act(self, state, obs=None):
        return np.array([-0.123])


def test_boxes_nest_and_validate():
    assert SPEC.nominal.inside(SPEC.soft) and SPEC.soft.inside(SPEC.hard)
    with pytest.raises(ValueError):
        SafetySpec(Box((-1, -1), (1, 1)), Box((-2, -2), (2, 2)), Box((-3, -3), (3, 3)))
    with pytest.raises(ValueError):
        Box((1.0,), (0.0,))
    assert SafetySpec.from_dict(SPEC.to_dict()) == SPEC


def test_grid_covers_box_inclusively():
    g = Box((-1.0, 0.0), (1.0, 2.0)).grid(3)
    assert g.shape == (9, 2)
    assert [-1.0, 0.0] in g.tolist() and [1.0, 2.0] in g.tolist() and [0.0, 1.0] in g.tolist()


def test_gate_passes_main_action_inside_soft_set():
    action, gate = safety.safety_gate([0.0, 0.0], MAIN, GateState(), SPEC, REC)
    assert np.array_equal(action, MAIN) and gate == GateState()


def test_gate_triggers_on_state_or_prediction():
    _, gate = safety.safety_gate([3.5, 0.0], MAIN, GateState(), SPEC, REC)
    assert gate.mode is GateMode.RECOVERY and gate.intervention_count == 1
    _, gate = safety.safety_gate([0.0, 1.9], MAIN, GateState(), SPEC, REC, predicted=[0.0, 2.1])
    assert gate.recovering
    lazy = SafetySpec(SPEC.soft, SPEC.nominal, SPEC.hard, lookahead=False)
    _, gate = safety.safety_gate([0.0, 1.9], MAIN, GateState(), lazy, REC, predicted=[0.0, 2.1])
    assert not gate.recovering


def test_hold_counter_releases_after_hold_steps():
    gate = GateState(GateMode.RECOVERY, 0, 1)
    nominal = [0.0, 0.0]
    modes = []
    for _ in range(12):
        action, gate = safety.safety_gate(nominal, MAIN, gate, SPEC, Tagged())
        modes.append(gate.mode)
    assert modes[:10] == [GateMode.RECOVERY] * 10
    assert modes[10] is GateMode.MAIN and gate.consecutive_nominal == 0


def test_leaving_nominal_resets_hold_counter():
    gate = GateState(GateMode.RECOVERY, 9, 1)
    _, gate = safety.safety_gate([0.0, 1.0], MAIN, gate, SPEC, Tagged())
    assert gate.recovering and gate.consecutive_nominal == 0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-4, 4), st.floats(-2.5, 2.5)), min_size=1, max_size=60))
def test_gate_never_forwards_main_action_in_recovery(states):
    gate = GateState()
    for s in states:
        action, gate = safety.safety_gate(s, MAIN, gate, SPEC, Tagged(), predicted=s)
        if gate.recovering:
            assert action[0] == -0.123
        else:
            assert np.array_equal(action, MAIN)


def test_scripted_recovery_reaches_nominal_from_whole_soft_grid():
    env = envs.TrackerEnv()
    for s in SPEC.soft.grid(20):
        assert safety.reaches_nominal(env, REC, SPEC, s) == (True, False), s


def test_recovery_action_law():
    r = safety.ScriptedRecovery("tracker", kp=2.0, kd=0.5)
    assert safety.recovery_action(r, [0.1, 0.2]) == pytest.approx(-0.3)
    assert safety.recovery_action(r, [5.0, 0.0]) == -1.0
    h = safety.default_recovery("hopper")
    assert safety.recovery_action(h, [0.2, -1.0]) == 0.0
    assert safety.recovery_action(h, [-0.05, -0.5]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        safety.ScriptedRecovery(kp=0.0)


def test_action_rate_and_reduction():
    assert safety.action_rate([[0.0], [1.0], [1.0], [0.0]]) == pytest.approx(2 / 3)
    assert safety.action_rate([[0.0, 0.0], [3.0, 4.0]]) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        safety.action_rate([[1.0]])
    rows = [ppo.RolloutRow(2048 * (i + 1), 0.0, 0.0, 0, 0, 1.0 if i < 1 else 0.5, 0) for i in range(10)]
    assert safety.action_rate_reduction(rows) == pytest.approx(50.0)


def test_count_failures():
    rows = lambda *f: [ppo.RolloutRow(1, 0.0, 0.0, x, 0, 0.0, 0) for x in f]
    per_seed, mean = safety.count_failures({0: rows(1, 2), 1: rows(0, 0), 2: rows(3)})
    assert per_seed == {0: 3, 1: 0, 2: 3} and mean == pytest.approx(2.0)


def test_gated_rollout_masks_intervened_steps():
    rng = np.random.default_rng(0)
    net = nn.build_policy(4, 1, rng)
    tight = SafetySpec(Box((-3, -0.05), (3, 0.05)), Box((-1, -0.01), (1, 0.01)), SPEC.hard)
    collector = ppo.RolloutCollector(lambda: envs.TrackerEnv(), 2, rng, safety.SafetyConfig(tight, REC))
    buf, stats = collector.collect(net, 200, ppo.PpoHyper(rollout_length=400, n_envs=2))
    assert stats["interventions"] > 0 and buf.intervened.any() and not buf.intervened.all()
    buf.finish(ppo.PpoHyper())
    batch = buf.as_batch()
    assert np.all(batch.advantages[batch.mask == 0] == 0.0)


def test_recovery_task_env_penalises_hard_exit():
    env = safety.RecoveryTaskEnv("tracker", envs.default_params("tracker"), SPEC, spread=0.0)
    env.reset(np.random.default_rng(0), state=(4.99, 2.5))
    res = env.step([1.0])
    assert res.failure and res.reward <= safety.TERMINATION_PENALTY


def test_recovery_task_env_randomises_physics_per_episode():
    env = safety.RecoveryTaskEnv("tracker", envs.default_params("tracker"), SPEC)
    rng = np.random.default_rng(0)
    env.reset(rng)
    first = env.env.params
    env.reset(rng)
    assert env.env.params != first
    assert abs(first.mass - 1.0) <= 0.3 and SPEC.soft.contains(env.safety_state())


def test_learned_recovery_trains_and_acts():
    rec, history = safety.train_recovery("tracker", envs.default_params("tracker"), SPEC, 4096,
                                         np.random.default_rng(0))
    assert len(history) == 2
    a = rec.act(np.zeros(2), np.zeros(4))
    assert a.shape == (1,) and -1.0 <= a[0] <= 1.0
