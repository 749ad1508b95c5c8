import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorcfd.embed import _frequency_ladder, rope_rotate, sincos_embed


def test_frequency_ladder_closed_form():
    num, wl = 8, 10_000.0
    omega = _frequency_ladder(num, wl)
    assert omega.dtype == torch.float64
    assert omega[0].item() == 1.0  # exactly
    for i in range(num):
        assert omega[i].item() == pytest.approx(wl ** (-i / num), rel=1e-15)
    assert (omega[1:] < omega[:-1]).all()


def test_sincos_unit_position_first_pair_is_sin1_cos1():
    # first frequency is exactly 1 rad per network unit, so a coordinate of
    # 1.0 lands on sin(1), cos(1) in that axis's leading channel pair
    emb = sincos_embed(np.array([[1.0, 0.0, 0.0]]), dim=12, dtype=torch.float64)
    assert emb[0, 0].item() == pytest.approx(math.sin(1.0), abs=1e-15)
    assert emb[0, 1].item() == pytest.approx(math.cos(1.0), abs=1e-15)
    # the other axes sit at 0 -> (sin 0, cos 0) = (0, 1) for every pair
    per_axis = 12 // 3
    for axis in (1, 2):
        block = emb[0, axis * per_axis : (axis + 1) * per_axis]
        assert torch.equal(block[0::2], torch.zeros(per_axis // 2, dtype=torch.float64))
        assert torch.equal(block[1::2], torch.ones(per_axis // 2, dtype=torch.float64))


def test_sincos_axis_blocks_are_separable():
    a = sincos_embed(np.array([[3.0, 5.0, 7.0]]), dim=24, dtype=torch.float64)
    b = sincos_embed(np.array([[3.0, -2.0, 7.0]]), dim=24, dtype=torch.float64)
    w = 24 // 3
    assert torch.equal(a[0, :w], b[0, :w])  # x block untouched
    assert not torch.equal(a[0, w : 2 * w], b[0, w : 2 * w])
    assert torch.equal(a[0, 2 * w :], b[0, 2 * w :])  # z block untouched


def test_sincos_values_against_direct_formula():
    pos = np.array([[250.0, -3.25, 999.0]])
    dim, wl = 30, 10_000.0
    emb = sincos_embed(pos, dim, max_wavelength=wl, dtype=torch.float64).numpy()[0]
    nf = dim // 6
    for axis in range(3):
        for i in range(nf):
            angle = pos[0, axis] * wl ** (-i / nf)
            base = axis * 2 * nf + 2 * i
            assert emb[base] == pytest.approx(math.sin(angle), abs=1e-12)
            assert emb[base + 1] == pytest.approx(math.cos(angle), abs=1e-12)


def test_sincos_rejects_bad_dim_and_positions():
    with pytest.raises(ValueError):
        sincos_embed(np.zeros((2, 3)), dim=16)  # not divisible by 6
    with pytest.raises(ValueError):
        sincos_embed(np.zeros((2, 2)), dim=12)
    with pytest.raises(ValueError):
        sincos_embed(np.array([[np.inf, 0, 0]]), dim=12)


def test_sincos_dtype_control():
    emb32 = sincos_embed(np.zeros((1, 3)), dim=12)
    assert emb32.dtype == torch.float32
    emb64 = sincos_embed(np.zeros((1, 3)), dim=12, dtype=torch.float64)
    assert emb64.dtype == torch.float64


def test_rope_identity_at_origin():
    x = torch.randn(2, 5, 12, generator=torch.Generator().manual_seed(0))
    out = rope_rotate(x, torch.zeros(5, 3, dtype=torch.float64))
    assert torch.allclose(out, x, atol=0.0)


def test_rope_preserves_norm():
    gen = torch.Generator().manual_seed(1)
    x = torch.randn(4, 7, 18, generator=gen, dtype=torch.float64)
    pos = torch.rand(7, 3, generator=gen, dtype=torch.float64) * 1000
    out = rope_rotate(x, pos)
    assert torch.allclose(out.norm(dim=-1), x.norm(dim=-1), rtol=1e-12)


def test_rope_partial_channels_pass_through():
    # head_dim 16 -> 2 pairs per axis cover 12 channels; the last 4 pass through
    gen = torch.Generator().manual_seed(2)
    x = torch.randn(1, 3, 16, generator=gen)
    pos = torch.rand(3, 3, dtype=torch.float64) * 100
    out = rope_rotate(x, pos)
    assert torch.equal(out[..., 12:], x[..., 12:])
    assert not torch.allclose(out[..., :12], x[..., :12])


def test_rope_pairwise_rotation_matches_direct_formula():
    head_dim = 12
    x = torch.arange(head_dim, dtype=torch.float64).reshape(1, 1, head_dim) / 7.0
    pos = torch.tensor([[2.0, 3.0, 5.0]], dtype=torch.float64)
    out = rope_rotate(x, pos)[0, 0]
    nf = head_dim // 6
    wl = 10_000.0
    for axis in range(3):
        for i in range(nf):
            angle = pos[0, axis].item() * wl ** (-i / nf)
            base = axis * 2 * nf + 2 * i
            e, o = x[0, 0, base].item(), x[0, 0, base + 1].item()
            assert out[base].item() == pytest.approx(
                math.cos(angle) * e - math.sin(angle) * o, rel=1e-12
            )
            assert out[base + 1].item() == pytest.approx(
                math.sin(angle) * e + math.cos(angle) * o, rel=1e-12
            )


@given(
    shift=st.tuples(
        st.floats(-500, 500), st.floats(-500, 500), st.floats(-500, 500)
    ),
    seed=st.integers(0, 10_000),
)
@settings(max_examples=40, deadline=None)
def test_rope_dot_products_depend_only_on_relative_position(shift, seed):
    gen = torch.Generator().manual_seed(seed)
    q = torch.randn(1, 4, 12, generator=gen)
    k = torch.randn(1, 4, 12, generator=gen)
    pos = torch.rand(4, 3, generator=gen, dtype=torch.float64) * 1000
    shifted = pos + torch.tensor(shift, dtype=torch.float64)
    dots = torch.einsum("hnd,hmd->hnm", rope_rotate(q, pos), rope_rotate(k, pos))
    dots_shifted = torch.einsum(
        "hnd,hmd->hnm", rope_rotate(q, shifted), rope_rotate(k, shifted)
    )
    assert torch.allclose(dots, dots_shifted, atol=1e-5)


def test_rope_half_precision_math_runs_in_float32():
    # positions near 1000 would alias badly if angles were computed in fp16
    x16 = torch.randn(1, 3, 12, generator=torch.Generator().manual_seed(3)).half()
    pos = torch.full((3, 3), 997.0, dtype=torch.float64)
    out16 = rope_rotate(x16, pos)
    out32 = rope_rotate(x16.float(), pos)
    assert out16.dtype == torch.float16
    assert torch.allclose(out16.float(), out32, atol=2e-3)


def test_rope_rejects_small_head_dim_and_mismatched_counts():
    with pytest.raises(ValueError):
        rope_rotate(torch.zeros(1, 2, 4), torch.zeros(2, 3))
    with pytest.raises(ValueError):
        rope_rotate(torch.zeros(1, 2, 12), torch.zeros(3, 3))


def test_rope_zero_rows_pass():
    out = rope_rotate(torch.zeros(1, 0, 12), torch.zeros(0, 3))
    assert out.shape == (1, 0, 12)
