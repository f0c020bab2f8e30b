import numpy as np
import pytest
import torch

from mp3restore import model
from mp3restore.model import (ArchConfig, ConvLayer, Critic, FrequencyAggregation, Generator, LayerSpec, ModelError,
                              tiny_arch)
from mp3restore.spectral import ComplexSpectrogram


def micro_arch(stochastic=True, **kw):
    cfg = dict(n_bins=16, front_maps=(2, 2, 2), agg_filters=16, agg_maps=4, remap_maps=4, gated_maps=4,
               dilations=(1, 1), noise_dim=2, critic_maps=4)
    cfg.update(kw)
    return tiny_arch(stochastic=stochastic, **cfg)


def fd_check(loss_fn, params, n_coords=5, h=1e-5, seed=0):
    """Compare autograd against central differences on random parameter coordinates."""
    rng = np.random.default_rng(seed)
    loss = loss_fn()
    # unused parameters (e.g. output biases under an input-gradient loss) get zero
    grads = [torch.zeros_like(p) if g is None else g
             for p, g in zip(params, torch.autograd.grad(loss, params, allow_unused=True))]
    errs = []
    for _ in range(n_coords):
        k = int(rng.integers(len(params)))
        p = params[k]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        orig = p[idx].item()
        values = []
        for v in (orig + h, orig - h, orig):
            with torch.no_grad():
                p[idx] = v
            values.append(loss_fn().item())  # with grad: some losses differentiate internally
        up, down = values[:2]
        num = (up - down) / (2 * h)
        ana = grads[k][idx].item()
        errs.append(abs(num - ana) / max(abs(num), abs(ana), 1e-8))
    return max(errs)


# --- building blocks --------------------------------------------------------


def test_prelu_examples():
    assert model.prelu(torch.tensor([2.0]), torch.tensor(0.25)).item() == 2.0
    assert model.prelu(torch.tensor([-2.0]), torch.tensor(0.25)).item() == -0.5
    x = torch.randn(2, 3, 4, 5)
    assert torch.equal(model.prelu(x, torch.ones(3)), x)


def test_gated_conv_scalar_oracle():
    spec = LayerSpec("G", 1, 2, (1, 1), 1, (0, 0), gated=True)
    layer = ConvLayer(spec)
    with torch.no_grad():
        layer.conv.weight[:] = torch.tensor([1.5, -0.7]).reshape(2, 1, 1, 1)
        layer.conv.bias[:] = torch.tensor([-0.2, 0.3])
        layer.prelu.weight.fill_(0.1)
    for x in (-1.3, 0.4, 2.0):
        a = 1.5 * x - 0.2
        b = -0.7 * x + 0.3
        expected = (a if a > 0 else 0.1 * a) / (1 + np.exp(-b))
        out = layer(torch.tensor([[[[x]]]]))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == pytest.approx(expected, rel=1e-6)


def test_gate_saturates_to_activation_path():
    spec = LayerSpec("G", 4, 8, (3, 3), 1, (1, 1), gated=True)
    layer = ConvLayer(spec)
    x = torch.randn(1, 4, 6, 6)
    with torch.no_grad():
        layer.conv.bias[4:] = 1e4
        h = layer.conv(torch.nn.functional.pad(x, (1, 1, 1, 1)))
    out = layer(x)
    assert torch.allclose(out, model.prelu(h[:, :4], layer.prelu.weight))


def test_odd_gated_maps_rejected():
    with pytest.raises(ModelError):
        LayerSpec("G", 4, 7, (3, 3), 1, (1, 1), gated=True)


def test_gating_halves_channels_everywhere():
    for arch in (ArchConfig(), tiny_arch()):
        for role, n in (("generator", 336), ("critic", 212)):
            specs = model.generator_specs(arch) if role == "generator" else model.critic_specs(arch)
            rows = model.output_sizes(specs, arch, role, n)
            for (prev, pshape), (name, shape) in zip(rows, rows[1:]):
                if name == "SelfGating":
                    assert shape[0] * 2 == pshape[0]


def test_reshape_bijection():
    x = torch.randn(2, 4096, 1, 7)
    for groups in (1, 2):
        b = model.to_bands(x, 128, groups)
        assert b.shape == (2, 128, 32, 7)
        assert torch.equal(model.from_bands(b, groups), x)
    # index rule for one group: channel c -> (c mod 128, c // 128)
    idx = torch.arange(4096.0).reshape(1, 4096, 1, 1)
    b = model.to_bands(idx, 128)[0, :, :, 0]
    c = torch.arange(4096)
    assert torch.equal(b[c % 128, c // 128], c.float())


def test_grouped_reshape_keeps_groups_apart():
    idx = torch.arange(64.0).reshape(1, 64, 1, 1)
    b = model.to_bands(idx, 8, groups=2)[0, :, :, 0]
    assert b[:4].max() < 32 <= b[4:].min()


def test_delta_kernel_selects_bin():
    arch = tiny_arch()
    by = {s.name: s for s in model.generator_specs(arch)}
    block = FrequencyAggregation(by["Conv4"], by["ReMap"], arch.n_bins, arch.agg_maps)
    x = torch.rand(1, 4, 1024, 9)
    f = 321
    with torch.no_grad():
        block.conv4.conv.weight.zero_()
        block.conv4.conv.bias.zero_()
        block.conv4.conv.weight[5, 2, f, 0] = 1.0
    trace = []
    block.conv4(x, trace)
    h = block.conv4.conv(x)
    assert torch.equal(h[0, 5, 0], x[0, 2, f])
    assert not h[0, torch.arange(64) != 5].any()


def test_aggregation_shape_and_errors():
    arch = ArchConfig()
    by = {s.name: s for s in model.generator_specs(arch)}
    block = FrequencyAggregation(by["Conv4"], by["ReMap"], 1024, 128)
    out = model.frequency_aggregate(torch.zeros(1, 38, 1024, 2), block)
    assert out.shape == (1, 256, 32, 2)
    with pytest.raises(ModelError):
        block(torch.zeros(1, 38, 1000, 2))


# --- generator / critic -----------------------------------------------------


def test_golden_tables_match_layer_lists():
    arch = ArchConfig()
    for name, text in (("generator_T336_train.txt", model.layer_table(arch, "generator", 336)),
                       ("critic_T212.txt", model.layer_table(arch, "critic", 212))):
        assert model.golden_path(name).read_text() == text


def test_tiny_forward_trace_matches_table():
    arch = tiny_arch()
    G, D = model.build_models(arch, 0)
    trace = []
    y = torch.randn(1, 2, 1024, 40)
    out = G(y, torch.randn(1, 8), train_mode=True, trace=trace)
    assert out.shape == (1, 2, 1024, 10)
    assert trace == model.output_sizes(model.generator_specs(arch), arch, "generator", 40)
    trace = []
    scores = D(out, y[..., 15:25], trace=trace)
    assert scores.shape == (1, 10)
    assert trace == model.output_sizes(model.critic_specs(arch), arch, "critic", 10)


@pytest.mark.parametrize("T", [31, 50])
def test_train_mode_shrink(T):
    arch = tiny_arch(stochastic=False)
    G = Generator(arch)
    assert G(torch.zeros(1, 2, 1024, T)).shape[-1] == T - arch.time_shrink
    assert G(torch.zeros(1, 2, 1024, T), train_mode=False).shape[-1] == T


def test_generator_errors():
    arch = tiny_arch(stochastic=False)
    G = Generator(arch)
    with pytest.raises(ModelError):
        G(torch.zeros(1, 2, 1024, 30))
    with pytest.raises(ModelError):
        G(torch.zeros(1, 2, 1024, 40), torch.zeros(1, 8))
    with pytest.raises(ModelError):
        Generator(tiny_arch())(torch.zeros(1, 2, 1024, 40))


def test_deterministic_conv6_has_no_noise_maps():
    by = {s.name: s for s in model.generator_specs(ArchConfig(stochastic=False))}
    assert by["Conv6"].in_maps == 256
    by = {s.name: s for s in model.generator_specs(ArchConfig())}
    assert by["Conv6"].in_maps == 320
    assert ArchConfig().noise_dim == 320 - 256


def test_noise_changes_output_and_has_gradient():
    arch = tiny_arch()
    G, _ = model.build_models(arch, 0, torch.float64)
    y = torch.randn(1, 2, 1024, 34, dtype=torch.float64)
    z1 = torch.randn(1, 8, dtype=torch.float64, requires_grad=True)
    z2 = torch.randn(1, 8, dtype=torch.float64)
    o1 = G(y, z1)
    assert (o1 - G(y, z2)).abs().max() > 0
    (g,) = torch.autograd.grad(o1.sum(), z1)
    assert g.norm() > 0


def test_critic_shift_equivariance():
    arch = tiny_arch()
    D = model.he_init(Critic(arch, time_padding_mode="circular"), 3).double()
    c = torch.randn(1, 2, 1024, 24, dtype=torch.float64)
    m = torch.randn(1, 2, 1024, 24, dtype=torch.float64)
    k = 5
    s = D(c, m)
    s_shift = D(torch.roll(c, k, -1), torch.roll(m, k, -1))
    assert torch.allclose(torch.roll(s, k, -1), s_shift, atol=1e-10)


def test_critic_rejects_linear_spectrogram():
    arch = tiny_arch()
    D = Critic(arch)
    lin = ComplexSpectrogram(np.zeros((2, 1024, 4)))
    with pytest.raises(ModelError):
        model.critic_forward(D, lin, lin)
    sq = lin.to_signed_sqrt()
    assert model.critic_forward(D, sq, sq).shape == (1, 4)


def test_critic_groups_independent_until_output():
    # perturbing only the complex view leaves the root-magnitude group's pre-output maps unchanged
    arch = micro_arch()
    D = model.he_init(Critic(arch), 0).double()
    x = torch.randn(1, 8, 16, 6, dtype=torch.float64)
    x2 = x.clone()
    x2[:, :4] += 1.0

    def trunk(inp):
        h = inp
        for layer in D.front:
            h = layer(h)
        h = D.aggregate(h)
        for i, layer in enumerate(D.band_convs):
            out = layer(h)
            h = out + h if i > 1 else out
        return D.head(h)

    a, b = trunk(x), trunk(x2)
    half = a.shape[1] // 2
    assert torch.equal(a[:, half:], b[:, half:])
    assert not torch.equal(a[:, :half], b[:, :half])


def test_he_init_statistics_and_determinism():
    spec = LayerSpec("L", 128, 512, (1, 1), 1, (0, 0))
    layer = model.he_init(ConvLayer(spec), 0)
    std = layer.conv.weight.std().item()
    assert abs(std - (2 / 128) ** 0.5) < 0.1 * (2 / 128) ** 0.5
    assert not layer.conv.bias.any()
    assert torch.all(layer.prelu.weight == 0.25)
    G1, _ = model.build_models(tiny_arch(), 7)
    G2, _ = model.build_models(tiny_arch(), 7)
    assert model.state_digest(G1) == model.state_digest(G2)


def test_full_layer_graph_gradient_check():
    arch = micro_arch()
    G, D = model.build_models(arch, 0, torch.float64)
    y = torch.randn(1, 2, 16, 9, dtype=torch.float64)
    z = torch.randn(1, 2, dtype=torch.float64)
    w = torch.randn(1, 2, 16, 5, dtype=torch.float64)

    def g_loss():
        return (G(y, z) * w).sum()

    assert fd_check(g_loss, list(G.parameters()), seed=1) < 1e-4

    def d_loss():
        return D(G(y, z), y[..., 2:7]).sum()

    assert fd_check(d_loss, list(D.parameters()), seed=2) < 1e-4


def test_checkpoint_round_trip(tmp_path):
    G, D = model.build_models(tiny_arch(), 0)
    p = model.save_checkpoint(tmp_path / "c.pt", G, D, step=3)
    G2, D2, payload = model.load_checkpoint(p)
    assert payload["step"] == 3
    assert model.state_digest(G2) == model.state_digest(G) == payload["id"]
    assert model.state_digest(D2) == model.state_digest(D)


def test_checkpoint_table_mismatch_refused(tmp_path):
    G, D = model.build_models(tiny_arch(), 0)
    p = model.save_checkpoint(tmp_path / "c.pt", G, D)
    payload = torch.load(p, weights_only=False)
    payload["tables"]["generator"] = payload["tables"]["generator"].replace("Conv5", "ConvX")
    torch.save(payload, p)
    with pytest.raises(ModelError, match="layer table"):
        model.load_checkpoint(p)
