import numpy as np
import pytest

from conftest import fd_rel_error, perturb
from memextract import container
from memextract.nn import (AdamW, Mlp, MlpConfig, NonFiniteError, ShapeError, add_time_modules,
                           sinusoidal_embedding)

CONFIGS = [
    MlpConfig(3, (5, 4), 2, "relu"),
    MlpConfig(3, (5, 4), 2, "silu"),
    MlpConfig(3, (5, 4), 2, "silu", norm=True),
    MlpConfig(3, (6,), 2, "silu", time_embed_dim=4, time_mode="add"),
    MlpConfig(3, (5, 4), 3, "relu", norm=True, time_embed_dim=6, time_mode="film"),
]


def _t(cfg, n, rng):
    return rng.integers(1, 200, size=n) if cfg.time_conditioned else None


def test_identity_linear_layer():
    net = Mlp(MlpConfig(2, (), 2))
    net.params["out.w"] = np.eye(2)
    net.params["out.b"] = np.zeros(2)
    np.testing.assert_array_equal(net.forward(np.array([[1.0, 2.0]])), [[1.0, 2.0]])


def test_zero_network_outputs_zero(rng):
    net = Mlp(MlpConfig(4, (8, 8), 3, "silu", norm=True))
    for k in net.params:
        net.params[k] = np.zeros_like(net.params[k])
    assert not np.any(net.forward(rng.standard_normal((5, 4))))


def test_forward_matches_scalar_recomputation(rng):
    net = perturb(Mlp(MlpConfig(3, (4,), 2, "relu"), seed=3), rng)
    x = rng.standard_normal((2, 3))
    p = net.params
    expected = np.zeros((2, 2))
    for n in range(2):
        hidden = []
        for j in range(4):
            s = p["l0.b"][j]
            for i in range(3):
                s += x[n, i] * p["l0.w"][i, j]
            hidden.append(max(s, 0.0))
        for k in range(2):
            s = p["out.b"][k]
            for j in range(4):
                s += hidden[j] * p["out.w"][j, k]
            expected[n, k] = s
    np.testing.assert_allclose(net.forward(x), expected, rtol=1e-13, atol=1e-13)


def test_shape_error_names_layer():
    net = Mlp(MlpConfig(3, (4,), 2))
    with pytest.raises(ShapeError, match="l0"):
        net.forward(np.zeros((2, 5)))
    _, cache = net.forward(np.zeros((2, 3)), return_cache=True)
    with pytest.raises(ShapeError, match="out"):
        net.backward(cache, np.zeros((2, 3)))


def test_time_conditioned_net_requires_t():
    net = Mlp(CONFIGS[3])
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 3)))


def test_linear_input_gradient_is_transpose(rng):
    net = Mlp(MlpConfig(3, (), 2))
    up = rng.standard_normal((4, 2))
    _, cache = net.forward(rng.standard_normal((4, 3)), return_cache=True)
    _, dx = net.backward(cache, up)
    np.testing.assert_allclose(dx, up @ net.params["out.w"].T)


@pytest.mark.parametrize("cfg", CONFIGS, ids=lambda c: f"{c.activation}-norm{c.norm}-{c.time_mode if c.time_conditioned else 'notime'}")
def test_gradients_match_finite_differences(cfg, rng):
    net = perturb(Mlp(cfg, seed=1), rng)
    if cfg.norm:
        for k in net.buffers:
            net.buffers[k] = net.buffers[k] + (0.5 if k.endswith("var") else 0.2)
    x = rng.standard_normal((4, cfg.in_dim))
    t = _t(cfg, 4, rng)
    up = rng.standard_normal((4, cfg.out_dim))
    _, cache = net.forward(x, t, return_cache=True)
    grads, dx = net.backward(cache, up)
    f = lambda: float(np.sum(net.forward(x, t) * up))
    for name, p in net.params.items():
        assert fd_rel_error(f, p, grads[name]) < 1e-4, name
    assert fd_rel_error(f, x, dx) < 1e-4
    assert dx.shape == x.shape


def test_zero_upstream_gives_zero_gradients(rng):
    net = perturb(Mlp(CONFIGS[4]), rng)
    _, cache = net.forward(rng.standard_normal((3, 3)), np.array([1, 2, 3]), return_cache=True)
    grads, dx = net.backward(cache, np.zeros((3, 3)))
    assert not np.any(dx)
    assert all(not np.any(g) for g in grads.values())


def test_time_module_is_neutral_at_init(rng):
    base = perturb(Mlp(MlpConfig(5, (8, 8), 3, "silu", norm=True)), rng)
    student = add_time_modules(base, time_embed_dim=16)
    x = rng.standard_normal((6, 5))
    for t in (1, 10, 500, 1000):
        np.testing.assert_array_equal(student.forward(x, t), base.forward(x))


def test_time_projection_width_matches_hidden():
    net = Mlp(MlpConfig(3, (7, 5), 2, time_embed_dim=8, time_mode="add"))
    assert net.params["t0.w"].shape == (8, 7)
    assert net.params["t1.w"].shape == (8, 5)


def test_sinusoidal_embedding_shape_and_t0():
    e = sinusoidal_embedding(np.array([0, 5]), 8)
    assert e.shape == (2, 8)
    np.testing.assert_array_equal(e[0], [1, 1, 1, 1, 0, 0, 0, 0])


class TestAdamW:
    def test_zero_gradient_no_decay_leaves_params(self):
        p = {"w": np.array([1.0, -2.0])}
        opt = AdamW(lr=0.1)
        opt.step(p, {"w": np.zeros(2)})
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])
        assert opt.step_count == 1

    def test_first_step_is_normalized_moment(self):
        g = np.array([0.5, -3.0, 1e-3])
        p = {"w": np.zeros(3)}
        lr, eps = 0.01, 1e-8
        AdamW(lr=lr, eps=eps).step(p, {"w": g})
        # bias-corrected moments after one step are g and g**2
        np.testing.assert_allclose(p["w"], -lr * g / (np.abs(g) + eps), rtol=1e-12)

    def test_pure_weight_decay(self):
        p = {"w": np.array([2.0, -4.0])}
        AdamW(lr=0.01, weight_decay=0.1).step(p, {"w": np.zeros(2)})
        np.testing.assert_allclose(p["w"], np.array([2.0, -4.0]) * (1 - 0.001), rtol=1e-15)

    def test_non_finite_gradient_raises(self):
        p = {"w": np.ones(2)}
        with pytest.raises(NonFiniteError):
            AdamW().step(p, {"w": np.array([1.0, np.nan])})
        np.testing.assert_array_equal(p["w"], [1.0, 1.0])

    def test_storage_order_invariance(self, rng):
        g = rng.standard_normal((4, 3))
        a = {"w": rng.standard_normal((4, 3))}
        b = {"w": np.asfortranarray(a["w"].copy())}
        oa, ob = AdamW(lr=0.1, weight_decay=0.01), AdamW(lr=0.1, weight_decay=0.01)
        for _ in range(3):
            oa.step(a, {"w": g})
            ob.step(b, {"w": np.asfortranarray(g)})
        np.testing.assert_array_equal(a["w"], b["w"])


def _train(seed):
    rng = np.random.default_rng(seed)
    net = Mlp(CONFIGS[4], seed=seed)
    opt = AdamW(lr=1e-2, weight_decay=1e-2)
    x = rng.standard_normal((16, 3))
    for _ in range(20):
        t = rng.integers(1, 100, size=16)
        out, cache = net.forward(x, t, train=True, return_cache=True)
        grads, _ = net.backward(cache, out - 1.0)
        opt.step(net.params, grads)
    return net


def test_training_is_bit_reproducible():
    a, b = _train(7), _train(7)
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    for k in a.buffers:
        assert a.buffers[k].tobytes() == b.buffers[k].tobytes()


def test_checkpoint_roundtrip(tmp_path, rng):
    net = perturb(Mlp(CONFIGS[4], seed=2), rng)
    path = tmp_path / "net.ckpt"
    net.save(path, role="student", seed=2, step=10)
    loaded, meta = Mlp.load(path, role="student")
    assert meta["step"] == 10 and meta["seed"] == 2
    x = rng.standard_normal((3, 3))
    np.testing.assert_array_equal(loaded.forward(x, 4), net.forward(x, 4))
    with pytest.raises(container.ContainerError, match="role"):
        Mlp.load(path, role="teacher")


def test_checkpoint_corruption_detected(tmp_path):
    path = tmp_path / "net.ckpt"
    Mlp(CONFIGS[0]).save(path, role="teacher")
    blob = bytearray(path.read_bytes())
    blob[-3] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(container.ContainerError, match="checksum"):
        Mlp.load(path)
    assert not container.verify_container(path)


def test_checkpoint_header_is_text_and_little_endian(tmp_path):
    path = tmp_path / "c.bin"
    container.write_container(path, {"a": np.arange(3, dtype=">f8")}, {"k": 1})
    head = container.read_header(path)
    assert head["arrays"][0]["dtype"] == "<f8"
    assert path.read_bytes().startswith(b"MEMX-CONTAINER 1\n")
    _, arrays = container.read_container(path)
    np.testing.assert_array_equal(arrays["a"], [0.0, 1.0, 2.0])
