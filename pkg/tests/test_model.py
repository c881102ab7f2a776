import numpy as np
import pytest

from rgmplan import autodiff as ad
from rgmplan.autodiff import Tensor, grad_check
from rgmplan.model import RGM, RGMConfig

TOL = 1e-3


def tiny(T=3, **kw) -> RGM:
    kw.setdefault("base_channels", 8)
    kw.setdefault("n_residual_blocks", 1)
    return RGM(RGMConfig(image_size=16, T=T, **kw), seed=1)


def inputs(model: RGM, n=2, seed=0):
    rng = np.random.default_rng(seed)
    s = model.cfg.image_size
    m = Tensor(rng.random((n, 3, s, s)), dtype=model.dtype)
    q = Tensor(rng.random((n, 3, s, s)), dtype=model.dtype)
    return m, q, model.noise(rng, n)


def probe(y: Tensor, seed=5) -> Tensor:
    return (y * Tensor(np.random.default_rng(seed).standard_normal(y.shape), dtype=y.dtype.type)).sum()


# ------------------------------------------------------------------ config and shapes


def test_config_validation():
    with pytest.raises(ValueError):
        RGMConfig(image_size=40)
    with pytest.raises(ValueError):
        RGMConfig(T=0)
    with pytest.raises(ValueError):
        RGMConfig(upsample="bilinear")
    assert RGMConfig.desk(32).base_channels == 32
    assert RGMConfig().base_channels == 256 and RGMConfig().image_size == 64


@pytest.mark.parametrize("upsample", ["transpose", "nearest"])
def test_generator_output_shapes_and_range(upsample):
    model = tiny(upsample=upsample)
    m, q, z = inputs(model)
    outs = model.generate(m, q, z)
    assert len(outs) == 3
    for h in outs:
        assert h.shape == (2, 3, 16, 16)
        assert np.all((h.data > 0) & (h.data < 1))
    assert model.encoder(m, q, z).shape == (2, 8, 4, 4)


def test_discriminator_scores_shape_and_bottleneck():
    model = tiny()
    m, q, _ = inputs(model)
    score, bott = model.discriminate("d1", m, q, return_bottleneck=True)
    assert score.shape == (2,) and np.all((score.data > 0) & (score.data < 1))
    assert bott.shape == (2, 16, 1, 1)
    with pytest.raises(ValueError):
        model.discriminate("d3", m, q)
    with pytest.raises(ValueError):
        model.d2(m, Tensor(np.zeros((2, 3, 8, 8))))


def test_encoder_rejects_mismatched_sizes():
    model = tiny()
    m, q, _ = inputs(model)
    with pytest.raises(ValueError):
        model.encoder(m, q, Tensor(np.zeros((2, 1, 8, 8))))


# ------------------------------------------------------------------ recurrence wiring


def test_each_pass_consumes_previous_output():
    model = tiny(T=4)
    m, q, z = inputs(model)
    log = []
    outs = model.generate(m, q, z, z_log=log)
    assert log[0] is z
    for i in range(1, 4):
        assert log[i] is outs[i - 1]


def test_single_pass_equals_horizontal():
    model = tiny(T=1)
    model.training = False
    m, q, z = inputs(model)
    (h,) = model.generate(m, q, z)
    direct, state = model.horizontal(m, q, z)
    assert np.array_equal(h.data, direct.data) and state.last_output is direct


def test_hidden_state_carries_between_passes():
    model = tiny(T=2)
    model.training = False
    m, q, z = inputs(model)
    outs = model.generate(m, q, z)
    # second pass with a fresh hidden state gives a different result
    fresh, _ = model.horizontal(m, q, outs[0])
    assert not np.allclose(fresh.data, outs[1].data)


def test_weights_shared_across_passes():
    # the parameter set does not depend on T
    assert tiny(T=1).param_shapes() == tiny(T=5).param_shapes()


def test_noise_affects_output():
    model = tiny(T=1)
    model.training = False
    m, q, _ = inputs(model)
    rng = np.random.default_rng(3)
    a = model.generate(m, q, model.noise(rng, 2))[0].data
    b = model.generate(m, q, model.noise(rng, 2))[0].data
    assert not np.allclose(a, b)


def test_same_seed_same_parameters():
    a, b = tiny(), tiny()
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    c = RGM(RGMConfig(image_size=16, base_channels=8, n_residual_blocks=1), seed=2)
    assert not np.array_equal(a.params["g.out.w"].data, c.params["g.out.w"].data)


def test_attention_is_identity_at_init():
    model = tiny()
    x = Tensor(np.random.default_rng(0).standard_normal((2, 16, 2, 2)))
    y, attn = model.self_attention("d1.attn", x, return_attention=True)
    assert np.allclose(y.data, x.data)
    assert attn.shape == (2, 4, 4) and np.allclose(attn.data.sum(-1), 1.0)


def test_parameter_groups_partition_and_clip_set():
    model = tiny()
    g, d = model.generator_params, model.discriminator_params
    assert len(g) + len(d) == len(model.params)
    assert not {id(p) for p in g} & {id(p) for p in d}
    clip = model.discriminator_weights
    assert clip and all(p.name.startswith(("d1.", "d2.")) and p.name.endswith((".w", ".b")) for p in clip)
    assert not any(p.name.endswith((".gamma", ".beta")) for p in clip)


def test_eval_mode_uses_running_statistics():
    model = tiny(T=1)
    m, q, z = inputs(model)
    model.training = False
    a = model.generate(m[:1], q[:1], z[:1])[0].data
    b = model.generate(m, q, z)[0].data[:1]
    assert np.allclose(a, b, atol=1e-6)


# ------------------------------------------------------------------ gradient checks


@pytest.fixture
def model64():
    with ad.precision(np.float64):
        model = tiny(T=2).astype(np.float64)
        # open the attention paths so their weights receive gradient
        for name, p in model.params.items():
            if name.endswith("attn.gamma"):
                p.data[...] = 0.7
        yield model


def _check(fn, params, n=6):
    return grad_check(fn, params, eps=1e-6, n_samples=n, rng=np.random.default_rng(0))


def test_encoder_gradients(model64):
    m, q, z = inputs(model64)
    ps = model64.group("g.enc")
    assert _check(lambda: probe(model64.encoder(m, q, z)), ps) < TOL


def test_gru_gradients(model64):
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((2, 8, 4, 4)))
    h = Tensor(rng.standard_normal((2, 8, 4, 4)))
    ps = model64.group("g.gru1")
    assert _check(lambda: probe(model64.gru_step("g.gru1", h, x)), ps) < TOL
    assert _check(lambda: probe(model64.gru_step("g.gru1", None, x)), ps) < TOL


def test_residual_gradients(model64):
    x = Tensor(np.random.default_rng(2).standard_normal((2, 8, 4, 4)))
    assert _check(lambda: probe(model64.residual_stack(x)), model64.group("g.res0")) < TOL


def test_attention_gradients(model64):
    x = Tensor(np.random.default_rng(3).standard_normal((2, 16, 2, 2)), requires_grad=True)
    ps = model64.group("d1.attn") + [x]
    assert _check(lambda: probe(model64.self_attention("d1.attn", x)), ps) < TOL


def test_full_generator_gradients(model64):
    m, q, z = inputs(model64)
    fn = lambda: probe(model64.generate(m, q, z)[-1])  # noqa: E731
    assert _check(fn, model64.generator_params, n=2) < TOL


@pytest.mark.parametrize("which", ["d1", "d2"])
def test_discriminator_gradients(model64, which):
    m, q, _ = inputs(model64)
    h = Tensor(np.random.default_rng(4).random(m.shape), requires_grad=True)
    fn = lambda: probe(model64.discriminate(which, h, m))  # noqa: E731
    assert _check(fn, model64.group(which) + [h], n=3) < TOL


def test_desk_bottleneck_shape():
    model = RGM(RGMConfig(image_size=32, base_channels=64, n_residual_blocks=1))
    h = Tensor(np.random.default_rng(0).random((1, 3, 32, 32)), dtype=model.dtype)
    _, bott = model.discriminate("d2", h, h, return_bottleneck=True)
    assert bott.shape == (1, 128, 2, 2)


def test_generator_norm_keeps_running_stats_per_pass():
    model = tiny(T=3)
    m, q, z = inputs(model)
    model.generate(m, q, z)
    # the z stage sees noise on pass 1 and images afterwards
    first = model.buffers["g.enc.z.bn.running_mean"]
    for i in (2, 3):
        assert not np.allclose(first, model.buffers[f"g.enc.z.bn.running_mean@{i}"])
    assert not any(k.startswith("d") and "@" in k for k in model.buffers)
    assert model.pass_index == 0
