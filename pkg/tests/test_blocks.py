import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from attnseg.blocks import (
    AttentionGate, BlockConfig, ChannelSE, ConcurrentSCSE, ConfigError, DualAttentiveBlock,
    MultiscaleDWSBlock, SpatialSE, init_weights,
)
from oracles import central_difference_check

torch.set_num_threads(1)


def _seeded(module, seed=0):
    torch.manual_seed(seed)
    init_weights(module)
    return module


def _saturate(excite, value):
    """Drive every excitation path's final bias so its sigmoid saturates."""
    for path in excite.paths:
        last = [m for m in path if isinstance(m, (torch.nn.Linear, torch.nn.Conv2d))][-1]
        with torch.no_grad():
            last.weight.zero_()
            last.bias.fill_(value)


sigmoid = lambda z: 1 / (1 + np.exp(-z))
relu = lambda z: np.maximum(z, 0)


class TestBlockConfig:
    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            BlockConfig(4, 16, kernel_sizes=(3, 4))

    def test_uneven_pointwise_split_rejected(self):
        with pytest.raises(ConfigError):
            BlockConfig(4, 17)

    def test_ratio_too_large_for_channels(self):
        with pytest.raises(ConfigError):
            BlockConfig(4, 8, se_ratio_pair=(4, 16))

    def test_ratio_order(self):
        with pytest.raises(ConfigError):
            BlockConfig(4, 32, se_ratio_pair=(16, 4))


class TestMultiscale:
    def test_shape(self):
        block = MultiscaleDWSBlock(BlockConfig(8, 16))
        assert block(torch.rand(1, 8, 16, 16)).shape == (1, 16, 16, 16)

    def test_channel_mismatch(self):
        block = MultiscaleDWSBlock(BlockConfig(8, 16))
        with pytest.raises(ConfigError):
            block(torch.rand(1, 4, 16, 16))

    def test_zero_input_zero_output(self):
        block = _seeded(MultiscaleDWSBlock(BlockConfig(8, 16)))
        assert torch.equal(block(torch.zeros(2, 8, 8, 8)), torch.zeros(2, 16, 8, 8))

    def test_single_pixel_hand_arithmetic(self):
        cfg = BlockConfig(2, 16, batch_norm=False)
        block = _seeded(MultiscaleDWSBlock(cfg), 3).double()
        with torch.no_grad():
            for p in block.parameters():
                p.normal_()
        x = np.array([0.7, -1.3])
        out = block(torch.tensor(x).view(1, 2, 1, 1)).detach().numpy().ravel()

        parts = []
        for k, branch in zip(cfg.kernel_sizes, block.branches):
            sep = branch[0]
            dw_w = sep.depthwise.weight.detach().numpy()[:, 0, k // 2, k // 2]
            dw = dw_w * x + sep.depthwise.bias.detach().numpy()
            pw = sep.pointwise.weight.detach().numpy()[:, :, 0, 0] @ dw + sep.pointwise.bias.detach().numpy()
            parts.append(relu(pw))
        one = block.branches[-1][0]
        parts.append(relu(one.weight.detach().numpy()[:, :, 0, 0] @ x + one.bias.detach().numpy()))
        cat = np.concatenate(parts)
        proj = block.project[0]
        expected = relu(proj.weight.detach().numpy()[:, :, 0, 0] @ cat + proj.bias.detach().numpy())
        np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)
        assert len(cat) == 16 + 16 + 8


class TestChannelSE:
    def test_gates_saturated_identity(self):
        cse = _seeded(ChannelSE(16)).double()
        _saturate(cse.excite, 50.0)
        x = torch.randn(2, 16, 4, 4, dtype=torch.float64)
        assert torch.allclose(cse(x), x, rtol=0, atol=1e-15)

    def test_constant_channel_scaled_uniformly(self):
        cse = _seeded(ChannelSE(16)).double()
        x = torch.randn(1, 16, 5, 5, dtype=torch.float64)
        x[0, 3] = 2.5
        g = cse.gates(x)[0, 3].item()
        out = cse(x)[0, 3]
        assert torch.allclose(out, torch.full_like(out, 2.5 * g), rtol=1e-14)
        assert 0 < g < 1

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(1)
        cse = _seeded(ChannelSE(16), 1).double()
        with torch.no_grad():
            cse.excite.alpha.fill_(0.3)
        x = torch.randn(2, 16, 4, 4, dtype=torch.float64, requires_grad=True)
        err = central_difference_check(lambda: cse(x), [x, *cse.parameters()])
        assert err < 1e-4

    def test_sum_output_gradient(self):
        # the plain sum(output) objective from the contract, via autograd vs FD on alpha
        cse = _seeded(ChannelSE(16), 2).double()
        x = torch.randn(2, 16, 4, 4, dtype=torch.float64)
        cse.zero_grad()
        cse(x).sum().backward()
        a = cse.excite.alpha.grad.item()
        h = 1e-6
        with torch.no_grad():
            cse.excite.alpha += h
            up = cse(x).sum().item()
            cse.excite.alpha -= 2 * h
            down = cse(x).sum().item()
        assert abs(a - (up - down) / (2 * h)) <= 1e-4 * max(abs(a), 1e-8)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_spatial_permutation_equivariance(self, seed):
        gen = torch.Generator().manual_seed(seed)
        cse = _seeded(ChannelSE(16), 0).double()
        x = torch.randn(1, 16, 4, 4, generator=gen, dtype=torch.float64)
        perm = torch.randperm(16, generator=gen)
        xp = x.view(1, 16, 16)[:, :, perm].view(1, 16, 4, 4)
        out_p = cse(xp).view(1, 16, 16)
        assert torch.allclose(out_p, cse(x).view(1, 16, 16)[:, :, perm], rtol=1e-12, atol=1e-14)

    def test_alpha_blend(self):
        cse = _seeded(ChannelSE(16), 4).double()
        x = torch.randn(1, 16, 3, 3, dtype=torch.float64)
        z = x.mean(dim=(2, 3))
        g_low, g_high = (p(z) for p in cse.excite.paths)
        with torch.no_grad():
            cse.excite.alpha.fill_(0.8)
        w = torch.sigmoid(torch.tensor(0.8, dtype=torch.float64))
        assert torch.allclose(cse.gates(x), w * g_low + (1 - w) * g_high)

    def test_fixed_ratio_variant_has_no_blend(self):
        cse = ChannelSE(16, learnable_ratio=False)
        assert cse.excite.alpha is None
        assert len(cse.excite.paths) == 1
        assert cse.excite.paths[0][0].out_features == 1


class TestSpatialSE:
    def test_map_one_identity(self):
        sse = _seeded(SpatialSE(16)).double()
        _saturate(sse.excite, 50.0)
        x = torch.randn(2, 16, 4, 4, dtype=torch.float64)
        assert torch.allclose(sse(x), x, rtol=0, atol=1e-15)

    def test_map_zero_annihilates(self):
        sse = _seeded(SpatialSE(16)).double()
        _saturate(sse.excite, -800.0)
        x = torch.randn(2, 16, 4, 4, dtype=torch.float64)
        assert torch.equal(sse(x), torch.zeros_like(x))

    def test_single_pixel_hand_arithmetic(self):
        sse = _seeded(SpatialSE(16), 5).double()
        with torch.no_grad():
            for p in sse.parameters():
                p.normal_(0, 0.5)
        x = np.random.default_rng(0).normal(size=16)
        out = sse(torch.tensor(x).view(1, 16, 1, 1)).detach().numpy().ravel()
        maps = []
        for path in sse.excite.paths:
            c1, c2 = path[0], path[2]
            hidden = relu(c1.weight.detach().numpy()[:, :, 0, 0] @ x + c1.bias.detach().numpy())
            maps.append(sigmoid(c2.weight.detach().numpy()[0, :, 0, 0] @ hidden + c2.bias.item()))
        w = sigmoid(sse.excite.alpha.item())
        expected = (w * maps[0] + (1 - w) * maps[1]) * x
        np.testing.assert_allclose(out, expected, rtol=1e-12)

    def test_pixel_permutation_commutes(self):
        sse = _seeded(SpatialSE(16), 0).double()
        # the map is computed pixel by pixel, so pixel permutations commute
        x = torch.randn(1, 16, 4, 4, dtype=torch.float64)
        perm = torch.randperm(16)
        xp = x.view(1, 16, 16)[:, :, perm].view(1, 16, 4, 4)
        assert torch.allclose(sse(xp).view(1, 16, 16), sse(x).view(1, 16, 16)[:, :, perm])

    def test_gradients_match_finite_differences(self):
        sse = _seeded(SpatialSE(16), 6).double()
        x = torch.randn(2, 16, 4, 4, dtype=torch.float64, requires_grad=True)
        assert central_difference_check(lambda: sse(x), [x, *sse.parameters()]) < 1e-4


class TestConcurrentSCSE:
    def test_both_gates_one(self):
        scse = _seeded(ConcurrentSCSE(16)).double()
        _saturate(scse.cse.excite, 50.0)
        _saturate(scse.sse.excite, 50.0)
        x = torch.randn(1, 16, 4, 4, dtype=torch.float64)
        assert torch.allclose(scse(x), 2 * x, rtol=0, atol=1e-14)

    def test_zero_input(self):
        scse = _seeded(ConcurrentSCSE(16))
        assert torch.equal(scse(torch.zeros(1, 16, 4, 4)), torch.zeros(1, 16, 4, 4))

    def test_compositional(self):
        scse = _seeded(ConcurrentSCSE(16), 7).double()
        x = torch.randn(2, 16, 3, 3, dtype=torch.float64)
        assert torch.equal(scse(x), scse.cse(x) + scse.sse(x))


class TestDualAttentiveBlock:
    def test_shape(self):
        dab = DualAttentiveBlock(BlockConfig(4, 16))
        assert dab(torch.rand(1, 4, 32, 32)).shape == (1, 16, 32, 32)

    def test_zero_gates_reduce_to_multiscale(self):
        dab = _seeded(DualAttentiveBlock(BlockConfig(4, 16))).double()
        _saturate(dab.scse.cse.excite, -800.0)
        _saturate(dab.scse.sse.excite, -800.0)
        x = torch.randn(2, 4, 8, 8, dtype=torch.float64)
        assert torch.equal(dab(x), dab.multiscale(x))

    def test_gradients_match_finite_differences(self):
        dab = _seeded(DualAttentiveBlock(BlockConfig(4, 16)), 8).double()
        x = torch.randn(2, 4, 4, 4, dtype=torch.float64, requires_grad=True)
        assert central_difference_check(lambda: dab(x), [x, *dab.parameters()]) < 1e-4

    def test_attention_coefficients_in_open_unit_interval(self):
        dab = _seeded(DualAttentiveBlock(BlockConfig(4, 16)), 9)
        x = torch.randn(2, 4, 8, 8) * 3
        m = dab.multiscale(x)
        g = dab.scse.cse.gates(m)
        s = dab.scse.sse.attention_map(m)
        assert ((g > 0) & (g < 1)).all() and ((s > 0) & (s < 1)).all()


class TestAttentionGate:
    def test_shape_and_ratio_check(self):
        gate = AttentionGate(8, 16, 4)
        assert gate(torch.rand(1, 8, 8, 8), torch.rand(1, 16, 4, 4)).shape == (1, 8, 8, 8)
        with pytest.raises(ConfigError):
            gate(torch.rand(1, 8, 8, 8), torch.rand(1, 16, 8, 8))

    def test_coefficients_one_and_zero(self):
        gate = _seeded(AttentionGate(8, 16, 4)).double()
        skip = torch.randn(1, 8, 4, 4, dtype=torch.float64)
        g = torch.randn(1, 16, 2, 2, dtype=torch.float64)
        with torch.no_grad():
            gate.psi.weight.zero_()
            gate.psi.bias.fill_(50.0)
        assert torch.allclose(gate(skip, g), skip, rtol=0, atol=1e-15)
        with torch.no_grad():
            gate.psi.bias.fill_(-800.0)
        assert torch.equal(gate(skip, g), torch.zeros_like(skip))

    def test_hand_arithmetic_2x2(self):
        gate = _seeded(AttentionGate(3, 2, 4), 11).double()
        with torch.no_grad():
            for p in gate.parameters():
                p.normal_()
        rng = np.random.default_rng(1)
        skip = rng.normal(size=(3, 2, 2))
        g = rng.normal(size=(2,))
        out = gate(torch.tensor(skip)[None], torch.tensor(g).view(1, 2, 1, 1)).detach().numpy()[0]
        wx = gate.theta_skip.weight.detach().numpy()[:, :, 0, 0]
        wg = gate.phi_gating.weight.detach().numpy()[:, :, 0, 0]
        bg = gate.phi_gating.bias.detach().numpy()
        wp = gate.psi.weight.detach().numpy()[0, :, 0, 0]
        bp = gate.psi.bias.item()
        expected = np.empty_like(skip)
        for i in range(2):
            for j in range(2):
                s = skip[:, i, j]
                a = sigmoid(wp @ relu(wx @ s + wg @ g + bg) + bp)
                expected[:, i, j] = s * a
        np.testing.assert_allclose(out, expected, rtol=1e-12)

    def test_gradients_match_finite_differences(self):
        gate = _seeded(AttentionGate(8, 16, 4), 12).double()
        skip = torch.randn(2, 8, 8, 8, dtype=torch.float64, requires_grad=True)
        g = torch.randn(2, 16, 4, 4, dtype=torch.float64, requires_grad=True)
        assert central_difference_check(lambda: gate(skip, g), [skip, g, *gate.parameters()]) < 1e-4
