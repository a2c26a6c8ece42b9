import numpy as np
import pytest

from conftest import FD_TOL, grad_check, leaf
from ddunet.layers import Context
from ddunet.model import DDUNet, ModelConfig, UNet, build, parameter_table, unet_channels
from ddunet.partition import make_layout
from ddunet.tensor import Tensor

DEPTH4 = ModelConfig(4, 64, True, unet_channels(3, 16, 4, 3))


def test_depth4_block_counts():
    names_counts = parameter_table(build(DEPTH4))
    assert [c for _, c in names_counts] == [2800, 13952, 55552, 221696, 885760, 307776,
                                            573952, 143616, 35968, 9024, 51]
    assert names_counts[5][0] == "communication network"


@pytest.mark.parametrize("F,count", [(1, 84), (2, 318), (4, 1236), (8, 4872), (16, 19344),
                                     (32, 77088), (64, 307776)])
def test_comm_net_counts(F, count):
    m = build(ModelConfig(4, F, True, unet_channels(3, 16, 4, 3)))
    assert m.comm_net.num_parameters() == count == 3 * (25 * F * F + F + 2 * F)


@pytest.mark.parametrize("D,target", [(2, 7487), (3, 30470), (4, 122031)])
def test_synthetic_subnetwork_totals_within_half_percent(D, target):
    m = build(ModelConfig.synthetic(D, 0))
    assert abs(m.num_parameters() - target) / target < 0.005


def test_empty_comm_net_contributes_zero():
    assert dict(parameter_table(build(ModelConfig.synthetic(3, 0))))["communication network"] == 0


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig.synthetic(3, 33)  # bottleneck has 32 channels
    with pytest.raises(ValueError):
        ModelConfig(3, 0, True, (1, 4, 8, 3))
    assert ModelConfig.synthetic(3, 32).channels == (1, 4, 8, 16, 32, 32, 16, 8, 4, 3)


def _images(n, H, W, seed=0):
    return Tensor(np.random.default_rng(seed).random((n, 1, H, W)).astype(np.float32))


@pytest.mark.parametrize("D", [1, 2, 3])
@pytest.mark.parametrize("training", [False, True])
def test_zero_comm_on_single_cell_equals_plain_unet(D, training):
    m = build(ModelConfig.synthetic(D, 0, comm=True, dropout=0.1), seed=D)
    x = _images(3, 16, 24, seed=D)
    ctx_a = Context(training=training, seed=(7,) if training else None)
    ctx_b = Context(training=training, seed=(7,) if training else None)
    a = m(x, make_layout(16, 24, 1, 1), ctx_a).data
    b = UNet(m)(x, ctx_b).data
    np.testing.assert_allclose(a, b, atol=1e-6, rtol=0)


def test_output_shape_contract():
    m = build(ModelConfig.synthetic(3, 32))
    out = m(_images(1, 32, 64), make_layout(32, 64, 1, 2))
    assert out.shape == (1, 3, 32, 64)


def test_weights_shared_by_identity():
    m = build(ModelConfig.synthetic(2, 8))
    ids = {id(p) for p in m.parameters()}
    assert len(ids) == len(m.parameters())
    # every clone invocation goes through the same module objects; no copies exist
    assert m.num_parameters() == sum(c for _, c in parameter_table(m))


def _sub(out, lay, i, j):
    rs, cs = lay.cell_slices(i, j)
    return out[..., rs, cs]


def test_no_comm_is_local_per_subimage():
    m = build(ModelConfig.synthetic(2, 8, comm=False), seed=3)
    lay = make_layout(16, 48, 1, 3)
    x = _images(2, 16, 48, seed=3)
    base = m(x, lay).data
    y = x.data.copy()
    y[..., :, 16:32] = 0
    changed = m(Tensor(y), lay).data
    np.testing.assert_array_equal(_sub(changed, lay, 0, 0), _sub(base, lay, 0, 0))
    np.testing.assert_array_equal(_sub(changed, lay, 0, 2), _sub(base, lay, 0, 2))
    assert not np.array_equal(_sub(changed, lay, 0, 1), _sub(base, lay, 0, 1))


def test_no_comm_subimage_alone_matches_oracle():
    m = build(ModelConfig.synthetic(2, 8, comm=False), seed=4)
    lay = make_layout(16, 32, 1, 2)
    x = _images(2, 16, 32, seed=4)
    full = m(x, lay).data
    for j in range(2):
        alone = m(Tensor(x.data[..., 16 * j:16 * (j + 1)].copy()), make_layout(16, 16, 1, 1)).data
        np.testing.assert_allclose(_sub(full, lay, 0, j), alone, atol=1e-6)


def test_no_comm_grid_permutation_permutes_outputs():
    m = build(ModelConfig.synthetic(2, 8, comm=False), seed=5)
    lay = make_layout(32, 32, 2, 2)
    x = _images(1, 32, 32, seed=5).data
    quads = [x[..., :16, :16], x[..., :16, 16:], x[..., 16:, :16], x[..., 16:, 16:]]
    perm = [3, 0, 2, 1]
    p = quads
    y = np.block([[p[perm[0]], p[perm[1]]], [p[perm[2]], p[perm[3]]]])
    out_x = m(Tensor(x), lay).data
    out_y = m(Tensor(y), lay).data
    cells = [(0, 0), (0, 1), (1, 0), (1, 1)]
    for pos, src in enumerate(perm):
        np.testing.assert_allclose(_sub(out_y, lay, *cells[pos]), _sub(out_x, lay, *cells[src]), atol=1e-6)


def test_comm_can_spread_information_across_subimages():
    m = build(ModelConfig.synthetic(2, 8, comm=True), seed=6)
    lay = make_layout(16, 48, 1, 3)
    x = _images(2, 16, 48, seed=6)
    base = m(x, lay).data
    y = x.data.copy()
    y[..., :, 16:32] = 0
    changed = m(Tensor(y), lay).data
    assert not np.array_equal(_sub(changed, lay, 0, 0), _sub(base, lay, 0, 0))


def test_size_agnostic_forward():
    m = build(ModelConfig.synthetic(3, 32), seed=1)
    for H, W, N, M in [(32, 64, 1, 2), (32, 192, 1, 6), (64, 64, 2, 2), (16, 16, 1, 1)]:
        assert m(_images(1, H, W), make_layout(H, W, N, M)).shape == (1, 3, H, W)


def test_layout_errors():
    m = build(ModelConfig.synthetic(3, 32))
    with pytest.raises(ValueError):
        m(_images(1, 32, 60), make_layout(32, 60, 1, 2))  # 30 not divisible by 8
    with pytest.raises(ValueError):
        m(_images(1, 32, 64), make_layout(32, 48, 1, 2))
    # unequal subimages with communication enabled
    with pytest.raises(ValueError):
        m(_images(1, 16, 40), make_layout(16, 40, 1, 2))


@pytest.mark.parametrize("comm", [True, False])
@pytest.mark.parametrize("trial", range(3))
def test_whole_model_gradients_fd(comm, trial):
    r = np.random.default_rng(100 + trial)
    cfg = ModelConfig(1, 2, comm, (1, 2, 3, 3, 2, 3), dropout=0.0)
    m = DDUNet(cfg).astype(np.float64)
    m.init(r)
    x = Tensor(r.random((2, 1, 4, 8)))
    lay = make_layout(4, 8, 1, 2)
    run = lambda: m(x, lay, Context(training=True))  # noqa: E731
    # a conv bias feeding training-mode BatchNorm is cancelled by the mean
    # subtraction, so its exact gradient is zero; check that in absolute terms
    cancelled = [p for name, p in m.named_parameters() if name.startswith("comm_net") and name.endswith("bias")]
    params = [p for p in m.parameters() if all(p is not c for c in cancelled)]
    assert grad_check(run, params) < FD_TOL
    grad_check(run, cancelled)
    for p in cancelled:
        assert np.abs(p.grad).max() < 1e-9
