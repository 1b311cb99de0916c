import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvc3d import oracles, ops
from mvc3d.model import (
    FC_PRESETS,
    LAYER_SEQUENCE,
    SCHEDULES,
    CheckpointError,
    ModelConfig,
    build,
    checkpoint_bytes,
    extract_features,
    flatten_dim,
    load_checkpoint,
    param_count,
    param_shapes,
    resolve_schedule,
    save_checkpoint,
    shape_plan,
)
from mvc3d.tensor import ShapeError, Tape, Tensor, backward, reduce_sum

TOY = dict(channels=(2, 3, 4, 4, 4, 4, 4, 4), fc_dims=(6, 5), image_size=8, init_std=0.3, dropout_rate=0.0)


def toy(**kw):
    return ModelConfig(**{**dict(n_views=2, n_classes=3), **TOY, **kw})


def test_layer_table_rows_for_n12():
    assert shape_plan(ModelConfig(n_views=12, n_classes=40)) == oracles.layer_table_rows(12, 40)
    plan = dict(shape_plan(ModelConfig(n_views=12, n_classes=40)))
    assert plan["Conv1"] == (12, 112, 112, 64)
    assert plan["Pool2"] == (6, 28, 28, 128)
    assert plan["Pool5"] == (1, 4, 4, 512)


@pytest.mark.parametrize("n", [8, 16, 20, 36])
def test_layer_table_rows_other_view_counts(n):
    assert oracles.first_mismatch(shape_plan(ModelConfig(n_views=n, n_classes=40)), oracles.layer_table_rows(n, 40)) is None


def test_ceil_view_rounding_breaks_layer_table():
    plan = shape_plan(ModelConfig(n_views=12, n_classes=40, pool_view_rounding="ceil"))
    diff = oracles.first_mismatch(plan, oracles.layer_table_rows(12, 40))
    assert diff is not None and diff.startswith("Pool4")


def test_view_extents_n16_and_n1():
    views = lambda n: [s[0] for name, s in shape_plan(ModelConfig(n_views=n)) if name.startswith("Pool")]  # noqa: E731
    assert views(16) == [16, 8, 4, 2, 1]
    assert views(1) == [1, 1, 1, 1, 1]


def test_layer_sequence_matches_table():
    names = [name for name, _ in shape_plan(ModelConfig())][1:]
    assert tuple(names) == LAYER_SEQUENCE


def test_fc1_weight_shapes():
    assert param_shapes(ModelConfig(n_views=12, n_classes=40))["Fc1.weight"] == (8192, 4096)
    cfg = ModelConfig(n_views=36, n_classes=10)
    assert flatten_dim(cfg) == 16384
    assert dict(shape_plan(cfg))["Pool5"][0] == 2


def test_fc_estimate_and_k_scaling():
    cfg = ModelConfig(n_views=12, n_classes=40)
    assert param_count(cfg).fc_estimate == 50_495_488
    assert param_count(cfg).total - param_count(cfg.with_(n_classes=10)).total == 30 * 4096 + 30
    assert param_count(cfg).fc_estimate - param_count(cfg.with_(n_classes=10)).fc_estimate == 30 * 4096


def test_complexity_variants_order_and_size():
    # reported sizes 142M / 186M / 299M read as float32 MiB of all parameters
    sizes = [param_count(ModelConfig(n_views=12, n_classes=40, fc_dims=FC_PRESETS[k])).total * 4 / 2**20
             for k in ("MV-C3D-S", "MV-C3D-M", "MV-C3D")]  # fmt: skip
    assert sizes == sorted(sizes)
    for got, reported in zip(sizes, (142, 186, 299)):
        assert abs(got - reported) / reported < 0.01


def test_schedules():
    assert SCHEDULES["increasing"] == (1, 1, 3, 3, 5, 5, 7, 7)
    assert resolve_schedule("decreasing") == (7, 5, 5, 5, 3, 3, 1, 1)
    assert resolve_schedule([1, 3, 5, 7, 7, 5, 3, 1]) == (1, 3, 5, 7, 7, 5, 3, 1)
    for bad in ("fixed-2", [3] * 7, [2] * 8):
        with pytest.raises(ValueError):
            resolve_schedule(bad)


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        ModelConfig(n_views=0)
    with pytest.raises(ValueError):
        ModelConfig(n_classes=1)
    with pytest.raises(ValueError):
        ModelConfig(conv_pattern="lstm")
    cfg = toy(viewpoint_schedule="increasing")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_build_init_and_determinism():
    cfg = ModelConfig(n_views=2, n_classes=4, image_size=16, channels=(8,) * 8, fc_dims=(64, 64), seed=3)
    a, b = build(cfg), build(cfg)
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
    w = np.concatenate([t.data.ravel() for t in a.regularized()])
    assert abs(w.mean()) < 0.005 and abs(w.std() - 0.05) < 0.005
    assert all(not t.data.any() for k, t in a.params.items() if k.endswith(".bias"))


@pytest.mark.parametrize("n", [1, 2, 8, 12, 16, 20, 36])
def test_shape_plan_matches_forward(n):
    cfg = ModelConfig(n_views=n, n_classes=5, channels=(2,) * 8, fc_dims=(4, 4), image_size=16)
    shapes = []
    build(cfg).run(np.zeros((1, 3, n, 16, 16)), shapes=shapes)
    assert shapes == shape_plan(cfg)


def test_forward_output_shape_and_batch_independence():
    cfg = ModelConfig(n_views=4, n_classes=40, channels=(2,) * 8, fc_dims=(8, 8), image_size=8)
    m = build(cfg)
    x = np.random.default_rng(0).uniform(size=(1, 3, 4, 8, 8))
    out = m.forward(np.concatenate([x, x]))
    assert out.shape == (2, 40)
    np.testing.assert_array_equal(out.data[0], out.data[1])
    assert m.forward(x).data.tobytes() == m.forward(x).data.tobytes()


def test_forward_rejects_wrong_view_count():
    m = build(toy())
    with pytest.raises(ShapeError, match=r"N=2.*N=3"):
        m.forward(np.zeros((1, 3, 3, 8, 8)))
    with pytest.raises(ShapeError, match="8x8"):
        m.forward(np.zeros((1, 3, 2, 9, 9)))


def test_view_permutation_locality():
    rng = np.random.default_rng(1)
    n = 4
    # every view holds a different constant per channel
    x = np.broadcast_to(rng.uniform(size=(1, 3, n, 1, 1)), (1, 3, n, 8, 8)).copy()
    perm = np.array([2, 0, 3, 1])
    joint = build(toy(n_views=n, seed=2))
    assert not np.allclose(joint.forward(x).data, joint.forward(x[:, :, perm]).data)

    # independent2d: permuting the views and the per-view kernels together
    # permutes the per-view features before any cross-view pooling
    ind = build(toy(n_views=n, conv_pattern="independent2d", seed=2))
    w, bias = ind.params["Conv1.weight"], ind.params["Conv1.bias"]
    base = ops.conv2d_independent(Tensor(x), w, bias).data
    moved = ops.conv2d_independent(Tensor(x[:, :, perm]), Tensor(w.data[perm]), Tensor(bias.data[perm])).data
    np.testing.assert_allclose(moved, base[:, :, perm], atol=1e-12)


def test_joint_all_v1_equals_tied_independent():
    cfg = toy(n_views=4, viewpoint_schedule="fixed-1", seed=5)
    joint = build(cfg)
    ind = build(cfg.with_(conv_pattern="independent2d"))
    for name, t in joint.params.items():
        if name.startswith("Conv"):
            views = ind.params[name].shape[0]
            if name.endswith(".weight"):
                ind.params[name] = Tensor(np.repeat(t.data[None, :, :, 0], views, axis=0))
            else:
                ind.params[name] = Tensor(np.tile(t.data, (views, 1)))
        else:
            ind.params[name] = t
    x = np.random.default_rng(0).uniform(size=(2, 3, 4, 8, 8))
    np.testing.assert_allclose(joint.forward(x).data, ind.forward(x).data, atol=1e-12)


@pytest.mark.parametrize("pattern", ["joint3d", "independent2d"])
def test_every_parameter_group_gets_gradient(pattern):
    cfg = ModelConfig(n_views=2, n_classes=3, channels=(4,) * 8, fc_dims=(8, 8), image_size=8,
                      init_std=0.3, conv_pattern=pattern, seed=1)  # fmt: skip
    m = build(cfg)
    for t in m.params.values():
        if t.name.endswith(".bias"):
            t.data[...] = 0.1
    x = np.random.default_rng(0).uniform(size=(2, 3, 2, 8, 8))
    with Tape() as tape:
        loss = reduce_sum(m.forward(x)) * (1.0 / 6)
    backward(tape, loss)
    for name, t in m.params.items():
        assert t.grad is not None and np.abs(t.grad).max() > 0, name


def test_extract_features():
    cfg = toy(n_views=2, fc_dims=(6, 5), seed=4)
    m = build(cfg)
    for t in m.params.values():
        if t.name.endswith(".bias"):
            t.data[...] = 0.1
    x = np.random.default_rng(0).uniform(size=(3, 3, 2, 8, 8))
    x[1] = x[0]
    f = extract_features(m, x).data
    assert f.shape == (3, 5)
    np.testing.assert_allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-9)
    assert abs(f[0] @ f[1] - 1.0) < 1e-12
    s = ModelConfig(n_views=12, n_classes=40, fc_dims=FC_PRESETS["MV-C3D-S"])
    assert dict(shape_plan(s))["Fc2"] == (1024,)


def test_checkpoint_round_trip(tmp_path):
    m = build(toy(seed=7))
    digest = save_checkpoint(m, tmp_path / "m.ckpt", {"classes": ["a", "b", "c"]})
    assert len(digest) == 64
    back, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == m.config and extra == {"classes": ["a", "b", "c"]}
    for name in m.params:
        assert back.params[name].data.tobytes() == m.params[name].data.tobytes()
    assert checkpoint_bytes(back, extra) == (tmp_path / "m.ckpt").read_bytes()


def test_checkpoint_corruption_detected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(build(toy()), path)
    blob = bytearray(path.read_bytes())
    blob[100] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)
    path.write_bytes(b"not a checkpoint" * 4)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 64), st.integers(2, 50))
def test_shape_plan_invariants(n, k):
    plan = dict(shape_plan(ModelConfig(n_views=n, n_classes=k)))
    for name in ("Conv1", "Conv2", "Conv3a", "Conv3b", "Conv4a", "Conv4b", "Conv5a", "Conv5b"):
        assert plan[name][0] >= 1
    assert plan["Pool1"][0] == n
    assert plan["Pool5"][0] == max(1, n // 16)
    assert plan["Fc3"] == (k,)
