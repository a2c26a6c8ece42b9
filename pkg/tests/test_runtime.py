import numpy as np
import pytest

from ddunet.layers import Context
from ddunet.model import ModelConfig, build
from ddunet.partition import make_layout
from ddunet.runtime import Runtime, RuntimePlan, WorkerError, make_plan
from ddunet.tensor import Tensor
from ddunet.train import Adam, dice_loss


def _batch(n, H, W, seed=0):
    r = np.random.default_rng(seed)
    return Tensor(r.random((n, 1, H, W)).astype(np.float32)), r.integers(0, 3, size=(n, H, W))


def _step(model, plan, x, y, lay, seed):
    model.zero_grads()
    with Runtime(model, plan) as rt:
        logits = rt.run_forward(x, lay, Context(training=True, seed=(seed,)))
        loss = dice_loss(logits, y)
        rt.run_backward(loss)
        sent = rt.comm_values_sent
    return logits.data, loss.item(), [p.grad.copy() for p in model.parameters()], sent


def _sequential(model, x, y, lay, seed):
    """Oracle: the single-graph forward with one ordinary backward."""
    model.zero_grads()
    logits = model(x, lay, Context(training=True, seed=(seed,)))
    loss = dice_loss(logits, y)
    from ddunet.tensor import backward
    backward(loss)
    return logits.data, loss.item(), [p.grad.copy() for p in model.parameters()]


PLANS = {
    "one": RuntimePlan(1, (0, 0, 0, 0)),
    "four": RuntimePlan(4, (0, 1, 2, 3)),
    "two": RuntimePlan(2, (0, 1, 0, 1)),
    "shuffled": RuntimePlan(3, (2, 0, 1, 2)),
}


@pytest.mark.parametrize("comm,F", [(True, 8), (False, 8), (True, 0)])
def test_all_plans_bit_identical(comm, F):
    lay = make_layout(32, 32, 2, 2)
    x, y = _batch(3, 32, 32, seed=1)
    results = {}
    for name, plan in PLANS.items():
        model = build(ModelConfig.synthetic(2, F, comm), seed=11)
        results[name] = _step(model, plan, x, y, lay, seed=5)
        # running BatchNorm statistics are updated in the same order too
        results[name] += (model.encoders[0].conv.unit1.bn.running_var.copy(),)
    ref = results["one"]
    for name, res in results.items():
        np.testing.assert_array_equal(res[0], ref[0], err_msg=name)
        assert res[1] == ref[1]
        for a, b in zip(res[2], ref[2]):
            np.testing.assert_array_equal(a, b, err_msg=name)
        np.testing.assert_array_equal(res[4], ref[4])


@pytest.mark.parametrize("comm", [True, False])
def test_runtime_matches_single_graph_backward(comm):
    lay = make_layout(16, 32, 1, 2)
    x, y = _batch(2, 16, 32, seed=2)
    m1 = build(ModelConfig.synthetic(2, 8, comm), seed=3)
    m2 = build(ModelConfig.synthetic(2, 8, comm), seed=3)
    got = _step(m1, make_plan(lay), x, y, lay, seed=9)
    ref = _sequential(m2, x, y, lay, seed=9)
    np.testing.assert_allclose(got[0], ref[0], atol=1e-6)
    assert got[1] == pytest.approx(ref[1], abs=1e-6)
    for a, b in zip(got[2], ref[2]):
        np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-6)


def test_two_accumulations_double_gradients():
    lay = make_layout(16, 32, 1, 2)
    x, y = _batch(2, 16, 32, seed=4)
    model = build(ModelConfig.synthetic(2, 8), seed=4)
    model.zero_grads()
    with Runtime(model, make_plan(lay)) as rt:
        for _ in range(2):
            loss = dice_loss(rt.run_forward(x, lay, Context(training=False)), y)
            rt.run_backward(loss)
        twice = [p.grad.copy() for p in model.parameters()]
        model.zero_grads()
        rt.run_backward(dice_loss(rt.run_forward(x, lay, Context(training=False)), y))
        once = [p.grad.copy() for p in model.parameters()]
    for a, b in zip(twice, once):
        # float32: ((a+b)+a)+b and 2(a+b) may differ in the last bit
        np.testing.assert_allclose(a, 2 * b, rtol=1e-5, atol=1e-10)


def test_training_trajectory_independent_of_worker_count():
    lay = make_layout(16, 64, 1, 4)
    trajectories = []
    for workers in (1, 2, 4):
        model = build(ModelConfig.synthetic(2, 8), seed=8)
        opt = Adam(model.parameters(), 0.008)
        losses = []
        with Runtime(model, make_plan(lay, workers)) as rt:
            for step in range(4):
                x, y = _batch(4, 16, 64, seed=step)
                model.zero_grads()
                loss = dice_loss(rt.run_forward(x, lay, Context(training=True, seed=(1, step))), y)
                rt.run_backward(loss)
                opt.step()
                rt.broadcast_weights()
                losses.append(loss.item())
        trajectories.append((losses, [p.data.copy() for p in model.parameters()]))
    for losses, params in trajectories[1:]:
        assert losses == trajectories[0][0]
        for a, b in zip(params, trajectories[0][1]):
            np.testing.assert_array_equal(a, b)


def test_comm_volume_per_step():
    # 1x2 layout, F=32, 32x32 subimages, D=3 -> bottleneck 4x4, batch n
    lay = make_layout(32, 64, 1, 2)
    n = 3
    x, y = _batch(n, 32, 64)
    model = build(ModelConfig.synthetic(3, 32))
    with Runtime(model, make_plan(lay)) as rt:
        logits = rt.run_forward(x, lay, Context(training=False))
        assert rt.comm_values_sent == n * 2 * 2 * 32 * 16
        rt.run_backward(dice_loss(logits, y))
        assert rt.comm_values_sent == 2 * n * 2 * 2 * 32 * 16


def test_no_communication_without_maps():
    lay = make_layout(32, 64, 1, 2)
    x, y = _batch(1, 32, 64)
    with Runtime(build(ModelConfig.synthetic(3, 0)), make_plan(lay)) as rt:
        rt.run_backward(dice_loss(rt.run_forward(x, lay), y))
        assert rt.comm_values_sent == 0


def test_backward_before_forward_rejected():
    lay = make_layout(16, 16, 1, 1)
    with Runtime(build(ModelConfig.synthetic(2, 8)), make_plan(lay)) as rt:
        with pytest.raises(RuntimeError):
            rt.run_backward(Tensor(np.ones(1)))


def test_stale_worker_detected():
    lay = make_layout(16, 32, 1, 2)
    x, _ = _batch(1, 16, 32)
    with Runtime(build(ModelConfig.synthetic(2, 8)), make_plan(lay)) as rt:
        rt.weights_version += 1  # an update without the broadcast barrier
        with pytest.raises(WorkerError):
            rt.run_forward(x, lay)


def test_worker_failure_surfaces():
    lay = make_layout(16, 32, 1, 2)
    model = build(ModelConfig.synthetic(2, 8))
    x, _ = _batch(1, 16, 32)
    with Runtime(model, make_plan(lay)) as rt:
        model.input_block.unit1.conv.weight.data = np.zeros((4, 2, 3, 3), np.float32)  # wrong shape
        with pytest.raises(WorkerError):
            rt.run_forward(x, lay)


def test_plan_defaults_and_thread_cap(monkeypatch):
    lay = make_layout(32, 96, 1, 3)
    assert make_plan(lay) == RuntimePlan(3, (0, 1, 2))
    assert make_plan(lay, 2).assignment == (0, 1, 0)
    monkeypatch.setenv("DDU_THREADS", "1")
    assert make_plan(lay).workers == 1
    with pytest.raises(ValueError):
        RuntimePlan(2, (0, 2))
