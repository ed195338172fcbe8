from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpa.synthbench import (
    DomainSpec,
    gen_sample,
    get_preset,
    load_specs,
    preset_domains,
    sample_episode,
    save_png,
    save_specs,
)

PRESETS = [s.name for s in preset_domains()]


def test_deterministic():
    spec = get_preset("aerial-like")
    a, b = gen_sample(spec, 2, 17), gen_sample(spec, 2, 17)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)


def test_noise_free_flat_uses_palette():
    spec = DomainSpec("clean", (0.9, 0.1, 0.2), (0.1, 0.2, 0.8), noise=0.0, texture="flat")
    s = gen_sample(spec, 0, 3)
    fg = s.image[:, s.mask.astype(bool)]
    assert fg.size and np.array_equal(fg, np.broadcast_to(np.array(spec.fg_color)[:, None], fg.shape))


@pytest.mark.parametrize("name", PRESETS)
def test_area_within_range(name):
    spec = get_preset(name)
    lo, hi = spec.fg_area_range
    fracs = np.array([gen_sample(spec, s % 5, s).mask.mean() for s in range(200)])
    assert fracs.min() >= lo - 1e-9 and fracs.max() <= hi + 1e-9


@pytest.mark.slow
def test_area_within_range_1000_samples():
    spec = get_preset("lesion-like")
    lo, hi = spec.fg_area_range
    fracs = np.array([gen_sample(spec, s % 5, s).mask.mean() for s in range(1000)])
    assert fracs.min() >= lo and fracs.max() <= hi


@pytest.mark.parametrize("name", PRESETS)
def test_presets_generate_valid_samples(name):
    spec = get_preset(name)
    for seed in range(100):
        s = gen_sample(spec, seed % 5, seed)
        assert s.image.shape == (3, 32, 32) and s.mask.shape == (32, 32)
        assert s.image.min() >= 0 and s.image.max() <= 1 and np.isfinite(s.image).all()
        assert 0 < s.mask.sum() < s.mask.size


def test_presets_contract():
    specs = preset_domains()
    assert len(specs) == 5 and len({s.name for s in specs}) == 5
    assert get_preset("lesion-like").fg_area_range[0] >= 0.2
    xray = get_preset("xray-like")
    assert len(set(xray.fg_color)) == 1 and len(set(xray.bg_color)) == 1
    with pytest.raises(KeyError):
        get_preset("mars-like")


def test_categories_differ():
    spec = get_preset("lesion-like")
    a, b = gen_sample(spec, 0, 5), gen_sample(spec, 1, 5)
    assert not np.array_equal(a.mask, b.mask)


def test_episode_contract():
    spec = get_preset("lesion-like")
    ep = sample_episode(spec, 3, k=1, n_eval=5, seed=9)
    assert len(ep.supports) == 1 and len(ep.eval_queries) == 5
    assert len(set(ep.sample_seeds)) == 6 and ep.category_id == 3
    ep2 = sample_episode(spec, 3, k=1, n_eval=5, seed=9)
    assert ep.sample_seeds == ep2.sample_seeds
    for (i1, m1), (i2, m2) in zip(ep.supports + ep.eval_queries, ep2.supports + ep2.eval_queries):
        assert np.array_equal(i1, i2) and np.array_equal(m1, m2)


def test_episode_rejects_bad_sizes():
    with pytest.raises(ValueError):
        sample_episode(get_preset("lesion-like"), 0, k=0, n_eval=1, seed=0)


@given(st.floats(0.0, 0.15), st.floats(0.01, 0.1))
def test_noise_increases_pixel_variance(noise, extra):
    base = DomainSpec("knob", (0.5, 0.4, 0.3), (0.3, 0.4, 0.5), noise=noise)
    louder = replace(base, noise=noise + extra)

    def var(spec):
        return np.mean([gen_sample(spec, 0, s).image.var(axis=(1, 2)).mean() for s in range(40)])

    assert var(louder) > var(base)


@pytest.mark.slow
def test_noise_variance_1000_samples():
    def var(noise):
        spec = DomainSpec("knob", (0.5, 0.4, 0.3), (0.3, 0.4, 0.5), noise=noise)
        return np.mean([gen_sample(spec, s % 5, s).image.var(axis=(1, 2)).mean() for s in range(1000)])

    levels = [var(n) for n in (0.0, 0.05, 0.1, 0.2)]
    assert all(b > a for a, b in zip(levels, levels[1:]))


@pytest.mark.parametrize("bad", [
    dict(fg_area_range=(0.5, 0.2)),
    dict(fg_color=(1.5, 0, 0)),
    dict(texture="plaid"),
    dict(shape_family="cube"),
    dict(noise=-0.1),
    dict(size=8),
])
def test_spec_validation(bad):
    kwargs = dict(name="x", fg_color=(0.5, 0.5, 0.5), bg_color=(0.1, 0.1, 0.1))
    kwargs.update(bad)
    with pytest.raises(ValueError):
        DomainSpec(**kwargs)


def test_spec_roundtrip(tmp_path):
    specs = preset_domains(64)
    save_specs(specs, tmp_path / "d.json")
    assert load_specs(tmp_path / "d.json") == specs


def test_size_64_supported():
    s = gen_sample(get_preset("objects-like", 64), 0, 1)
    assert s.image.shape == (3, 64, 64)


def test_save_png(tmp_path):
    from PIL import Image

    save_png(gen_sample(get_preset("lesion-like"), 0, 1), tmp_path / "s.png")
    assert Image.open(tmp_path / "s.png").size == (64, 32)
