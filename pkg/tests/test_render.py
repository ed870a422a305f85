import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import autograd_of, central_difference, random_warp, rel_error
from facealbedo import render
from facealbedo.render import WarpField


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


unit_vectors = st.tuples(*[st.floats(-1, 1, allow_nan=False)] * 3).filter(lambda v: np.linalg.norm(v) > 0.1).map(unit)


@given(unit_vectors)
def test_y00_is_constant(n):
    assert float(render.sh_basis(torch.tensor(n))[0]) == pytest.approx(0.282095, abs=1e-7)


def test_y20_at_pole():
    y = render.sh_basis(torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64))
    assert float(y[6]) == pytest.approx(0.630784, abs=1e-9)


@given(unit_vectors)
def test_band1_odd_parity(n):
    a = render.sh_basis(torch.tensor(n))
    b = render.sh_basis(torch.tensor([-n[0], -n[1], n[2]]))
    # Y1-1 ~ y and Y11 ~ x flip, Y10 ~ z does not
    assert torch.allclose(b[1], -a[1]) and torch.allclose(b[3], -a[3])
    assert torch.allclose(b[2], a[2])


def test_sh_basis_rejects_non_unit():
    with pytest.raises(ValueError):
        render.sh_basis(torch.tensor([0.0, 0.0, 1.1]))


def test_ambient_inverse_gives_unit_shading(rng):
    w = random_warp(rng)
    s = render.shade(w, render.ambient_lighting(1.0, torch.float64))
    assert torch.equal(s[w.mask], torch.ones_like(s[w.mask]))
    assert torch.equal(s[~w.mask], torch.zeros_like(s[~w.mask]))


def test_zero_light_hits_floor(rng):
    w = random_warp(rng)
    s = render.shade(w, torch.zeros(3, 9, dtype=torch.float64))
    assert torch.allclose(s[w.mask], torch.full_like(s[w.mask], 1e-3))


def test_shading_is_linear_above_floor(rng):
    w = random_warp(rng)
    light = render.ambient_lighting(1.0, torch.float64)
    light[:, 1:4] = torch.tensor(rng.uniform(-0.3, 0.3, size=(3, 3)))
    s1, s2 = render.shade(w, light), render.shade(w, 2 * light)
    assert torch.allclose(s2, 2 * s1)


def test_batched_shading_matches_single(rng):
    w = random_warp(rng)
    lights = torch.tensor(rng.normal(size=(2, 3, 9)))
    batched = render.shade(w, lights)
    assert torch.allclose(batched[1], render.shade(w, lights[1]))


def test_lower_bound_matches_dense_sphere(rng):
    from facealbedo.synth import sample_lighting

    pts = rng.normal(size=(20000, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    basis = render.sh_basis(torch.tensor(pts)).numpy()
    for _ in range(5):
        c = np.asarray(sample_lighting(rng), dtype=np.float64)
        lb = render.shading_lower_bound(c)
        assert np.all((basis @ c.T).min(axis=0) >= lb - 1e-9)


def test_constant_texture_warps_to_constant(rng):
    w = random_warp(rng)
    tex = torch.full((8, 8, 3), 0.37, dtype=torch.float64)
    img = render.warp_uv_to_image(tex, w)
    assert torch.allclose(img[w.mask], torch.full_like(img[w.mask], 0.37))
    assert torch.all(img[~w.mask] == 0)


def test_identity_warp_reproduces_texture(rng):
    ys, xs = torch.meshgrid(torch.arange(8, dtype=torch.float64), torch.arange(8, dtype=torch.float64), indexing="ij")
    uv = torch.stack([xs / 7, ys / 7], dim=-1)
    w = WarpField(uv, torch.tensor([0.0, 0.0, 1.0]).expand(8, 8, 3), torch.ones(8, 8, dtype=torch.bool))
    tex = torch.tensor(rng.random((8, 8, 3)))
    assert torch.allclose(render.warp_uv_to_image(tex, w), tex, atol=1e-12)


def test_warp_gradient_matches_finite_differences(rng):
    w = random_warp(rng)
    weights = torch.tensor(rng.normal(size=(8, 8, 3)))
    tex = torch.tensor(rng.random((8, 8, 3)))
    fn = lambda t: (render.warp_uv_to_image(t, w) * weights).sum()
    assert rel_error(autograd_of(fn, tex), central_difference(fn, tex)) < 1e-3


def test_shade_gradient_matches_finite_differences(rng):
    w = random_warp(rng)
    light = render.ambient_lighting(1.0, torch.float64)
    light[:, 1:] = torch.tensor(rng.uniform(-0.1, 0.1, size=(3, 8)))
    weights = torch.tensor(rng.normal(size=(8, 8, 3)))
    fn = lambda c: (render.shade(w, c) * weights).sum()
    assert rel_error(autograd_of(fn, light), central_difference(fn, light)) < 1e-3


def test_compose_examples():
    a = torch.full((4, 4, 3), 0.5)
    assert torch.equal(render.lambertian_compose(a, torch.ones_like(a)), a)
    assert torch.equal(render.lambertian_compose(torch.zeros_like(a), a), torch.zeros_like(a))
    assert torch.allclose(render.lambertian_compose(a, torch.full_like(a, 0.8)), torch.full_like(a, 0.4))
    with pytest.raises(ValueError):
        render.lambertian_compose(a, torch.ones(4, 4, 1))


def test_compose_with_ambient_inverse_is_exact(rng):
    w = random_warp(rng, dtype=torch.float32)
    tex = torch.tensor(rng.random((8, 8, 3)), dtype=torch.float32)
    warped = render.warp_uv_to_image(tex, w)
    out = render.lambertian_compose(warped, render.shade(w, render.ambient_lighting(1.0)))
    assert torch.equal(out[w.mask], warped[w.mask])


def test_masked_pixels_contribute_no_gradient(rng):
    w = random_warp(rng, mask_frac=0.5)
    weights = torch.tensor(rng.normal(size=(8, 8, 3))) * (~w.mask)[..., None]
    tex = torch.tensor(rng.random((8, 8, 3)), requires_grad=True)
    light = render.ambient_lighting(1.0, torch.float64).requires_grad_(True)
    (render.render(tex, light, w) * weights).sum().backward()
    assert torch.all(tex.grad == 0) and torch.all(light.grad == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_warp_is_convex_combination(seed):
    r = np.random.default_rng(seed)
    w = random_warp(r)
    tex = torch.tensor(r.random((8, 8, 3)))
    img = render.warp_uv_to_image(tex, w)[w.mask]
    assert torch.all(img >= tex.min() - 1e-12) and torch.all(img <= tex.max() + 1e-12)


def test_warp_field_validation():
    bad = WarpField(torch.full((2, 2, 2), 1.5), torch.tensor([0.0, 0.0, 1.0]).expand(2, 2, 3), torch.ones(2, 2))
    with pytest.raises(ValueError):
        bad.validate()
