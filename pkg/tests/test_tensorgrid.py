import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from layersep.tensorgrid import (
    build_pyramid,
    downsample_2x,
    downsample_flow,
    spatial_gradient,
    upsample_flow_2x,
    visibility_mask,
    warp_bilinear,
)


def const_flow(h, w, u, v, dtype=torch.float64):
    flow = torch.zeros(1, 2, h, w, dtype=dtype)
    flow[:, 0] = u
    flow[:, 1] = v
    return flow


def ramp(h, w):
    x = torch.arange(w, dtype=torch.float64) / (w - 1)
    return x.view(1, 1, 1, w).expand(1, 1, h, w).clone()


def box_average_oracle(img):
    h, w = img.shape
    out = np.zeros((h // 2, w // 2))
    for y in range(h // 2):
        for x in range(w // 2):
            out[y, x] = (img[2 * y, 2 * x] + img[2 * y + 1, 2 * x] + img[2 * y, 2 * x + 1] + img[2 * y + 1, 2 * x + 1]) / 4
    return out


class TestWarp:
    def test_zero_flow_is_exact_identity(self):
        img = torch.rand(2, 3, 7, 9, dtype=torch.float64)
        out = warp_bilinear(img, torch.zeros(2, 2, 7, 9, dtype=torch.float64))
        assert torch.equal(out, img)

    def test_bilinear_midpoint(self):
        a, b = 0.2, 0.9
        img = torch.tensor([[[[a, b]]]], dtype=torch.float64)
        flow = torch.zeros(1, 2, 1, 2, dtype=torch.float64)
        flow[0, 0, 0, 0] = 0.5
        out = warp_bilinear(img, flow)
        assert out[0, 0, 0, 0].item() == pytest.approx((a + b) / 2, abs=1e-12)

    def test_integer_shift_against_direct_oracle(self):
        img = ramp(8, 8)
        out = warp_bilinear(img, const_flow(8, 8, 1.0, 0.0))
        f = img[0, 0].numpy()
        expected = np.zeros((8, 8))
        for y in range(8):
            for x in range(8):
                expected[y, x] = f[y, x + 1] if x + 1 < 8 else 0.0
        np.testing.assert_allclose(out[0, 0].numpy(), expected, atol=1e-12)
        assert torch.all(out[0, 0, :, 7] == 0)

    def test_size_mismatch_rejected(self):
        with pytest.raises(ValueError, match="spatial sizes differ"):
            warp_bilinear(torch.rand(1, 1, 4, 4), torch.zeros(1, 2, 4, 5))

    def test_linear_in_image(self):
        g = torch.Generator().manual_seed(0)
        i1 = torch.rand(1, 3, 10, 12, generator=g, dtype=torch.float64)
        i2 = torch.rand(1, 3, 10, 12, generator=g, dtype=torch.float64)
        flow = (torch.rand(1, 2, 10, 12, generator=g, dtype=torch.float64) - 0.5) * 6
        lhs = warp_bilinear(0.3 * i1 - 1.7 * i2, flow)
        rhs = 0.3 * warp_bilinear(i1, flow) - 1.7 * warp_bilinear(i2, flow)
        assert torch.allclose(lhs, rhs, atol=1e-6)

    def test_gradients_flow_to_image_and_flow(self):
        img = torch.rand(1, 1, 5, 5, dtype=torch.float64, requires_grad=True)
        flow = (0.3 * torch.rand(1, 2, 5, 5, dtype=torch.float64)).requires_grad_()
        assert torch.autograd.gradcheck(warp_bilinear, (img, flow))

    def test_unbatched_input(self):
        img = torch.rand(3, 4, 4)
        out = warp_bilinear(img, torch.zeros(2, 4, 4))
        assert out.shape == (3, 4, 4)


class TestVisibility:
    def test_zero_flow_all_ones(self):
        assert torch.all(visibility_mask(const_flow(5, 6, 0, 0)) == 1)

    def test_flow_of_width_all_zeros(self):
        assert torch.all(visibility_mask(const_flow(5, 6, 6, 0)) == 0)

    def test_right_column_drops_out(self):
        m = visibility_mask(const_flow(3, 4, 1, 0))[0, 0]
        assert torch.all(m[:, 3] == 0)
        assert torch.all(m[:, :3] == 1)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_visible_pixels_read_no_padding(self, seed):
        g = torch.Generator().manual_seed(seed)
        flow = (torch.rand(1, 2, 6, 7, generator=g, dtype=torch.float64) - 0.5) * 12
        ones = torch.ones(1, 1, 6, 7, dtype=torch.float64)
        warped = warp_bilinear(ones, flow)
        mask = visibility_mask(flow)
        assert torch.allclose(warped[mask == 1], torch.ones_like(warped[mask == 1]), atol=1e-12)


class TestFlowResampling:
    def test_zero_flow(self):
        up = upsample_flow_2x(torch.zeros(1, 2, 3, 5))
        assert up.shape == (1, 2, 6, 10)
        assert torch.all(up == 0)

    def test_constant_rescaled(self):
        up = upsample_flow_2x(const_flow(3, 4, 1.0, 2.0))
        assert torch.all(up[:, 0] == 2.0)
        assert torch.all(up[:, 1] == 4.0)

    def test_explicit_target_size(self):
        up = upsample_flow_2x(const_flow(5, 5, 1.0, 1.0), size=(11, 10))
        assert up.shape[-2:] == (11, 10)
        assert torch.allclose(up[:, 0], torch.full((1, 11, 10), 2.0, dtype=torch.float64))
        assert torch.allclose(up[:, 1], torch.full((1, 11, 10), 2.2, dtype=torch.float64))

    def test_up_then_down_round_trip_on_constants(self):
        f = const_flow(4, 6, -0.75, 3.25)
        back = downsample_flow(upsample_flow_2x(f), 2)
        assert torch.equal(back, f)

    def test_downsample_constant_exact(self):
        f = const_flow(64, 64, 32.0, 0.0)
        down = downsample_flow(f, 32)
        assert down.shape[-2:] == (2, 2)
        assert torch.all(down[:, 0] == 1.0)
        assert torch.all(down[:, 1] == 0.0)

    def test_non_power_of_two_rejected(self):
        with pytest.raises(ValueError):
            downsample_flow(torch.zeros(1, 2, 8, 8), 3)


class TestPyramid:
    def test_constant_two_levels(self):
        img = torch.full((1, 1, 4, 4), 0.37, dtype=torch.float64)
        pyr = build_pyramid(img, 1)
        assert [p.shape[-2:] for p in pyr] == [(2, 2), (4, 4)]
        assert all(torch.all(p == 0.37) for p in pyr)

    def test_full_resolution_coarsest(self):
        img = torch.zeros(1, 3, 192, 320)
        pyr = build_pyramid(img, 5)
        assert len(pyr) == 6
        assert pyr[0].shape[-2:] == (6, 10)
        assert pyr[-1] is img

    def test_box_average_oracle(self):
        img = ramp(8, 8) + 0.1 * torch.arange(8, dtype=torch.float64).view(1, 1, 8, 1)
        pyr = build_pyramid(img, 2)
        lvl1 = box_average_oracle(img[0, 0].numpy())
        lvl0 = box_average_oracle(lvl1)
        np.testing.assert_allclose(pyr[1][0, 0].numpy(), lvl1, atol=1e-6)
        np.testing.assert_allclose(pyr[0][0, 0].numpy(), lvl0, atol=1e-6)

    def test_too_small_rejected(self):
        with pytest.raises(ValueError, match="too small"):
            build_pyramid(torch.zeros(1, 1, 8, 40), 4)

    def test_odd_sizes_round_down(self):
        assert downsample_2x(torch.zeros(1, 1, 11, 7)).shape[-2:] == (5, 3)


class TestGradient:
    def test_constant(self):
        gx, gy = spatial_gradient(torch.full((1, 2, 5, 5), 0.4))
        assert torch.all(gx == 0) and torch.all(gy == 0)

    def test_ramp(self):
        x = torch.arange(6, dtype=torch.float64).view(1, 1, 1, 6).expand(1, 1, 4, 6)
        gx, gy = spatial_gradient(x)
        assert torch.all(gx[..., :5] == 1)
        assert torch.all(gx[..., 5] == 0)
        assert torch.all(gy == 0)

    def test_difference_oracle(self):
        rng = np.random.default_rng(3)
        img = rng.random((8, 8))
        gx, gy = spatial_gradient(torch.from_numpy(img))
        ex = np.zeros_like(img)
        ey = np.zeros_like(img)
        for y in range(8):
            for x in range(8):
                if x < 7:
                    ex[y, x] = img[y, x + 1] - img[y, x]
                if y < 7:
                    ey[y, x] = img[y + 1, x] - img[y, x]
        assert np.array_equal(gx.numpy(), ex)
        assert np.array_equal(gy.numpy(), ey)
