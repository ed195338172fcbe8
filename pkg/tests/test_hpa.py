import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpa.hpa import (
    DEFAULT_LADDER,
    AugChain,
    AugConfig,
    AugOp,
    SchedulerConfig,
    SchedulerState,
    apply_aug,
    apply_chain,
    apply_geometric,
    build_chain,
    generate_views,
    scheduler_step,
    view_chain,
)


def pair(seed=0, h=12, w=12):
    r = np.random.default_rng(seed)
    return r.random((3, h, w)), (r.random((h, w)) > 0.6).astype(np.uint8)


# single ops ---------------------------------------------------------------------


def test_hflip_involution():
    img, m = pair()
    op = AugOp("hflip")
    i2, m2 = apply_aug(*apply_aug(img, m, op), op)
    assert np.array_equal(i2, img) and np.array_equal(m2, m)


def test_rot90_cyclic():
    img, m = pair()
    op = AugOp("rot90", 1.0)
    for _ in range(4):
        img2, m2 = apply_aug(img if _ == 0 else img2, m if _ == 0 else m2, op)
    assert np.array_equal(img2, img) and np.array_equal(m2, m)


def test_brightness_clamps_and_keeps_mask():
    img = np.full((3, 2, 2), 0.95)
    m = np.eye(2, dtype=np.uint8)
    out, m2 = apply_aug(img, m, AugOp("brightness", 0.2))
    np.testing.assert_array_equal(out, np.ones_like(img))
    np.testing.assert_array_equal(m2, m)


def test_hue_keeps_mask_and_range():
    img, m = pair(1)
    out, m2 = apply_aug(img, m, AugOp("hue", 25.0))
    assert np.array_equal(m2, m)
    assert out.min() >= 0 and out.max() <= 1 and not np.allclose(out, img)


def test_hue_full_turn_is_identity():
    img, m = pair(2)
    out, _ = apply_aug(img, m, AugOp("hue", 360.0))
    np.testing.assert_allclose(out, img, atol=1e-9)


@pytest.mark.parametrize("kind", ["hflip", "vflip", "rot90", "grid_shuffle"])
@pytest.mark.parametrize("size", [(12, 12), (13, 10)])
def test_geometric_ops_move_image_and_mask_together(kind, size):
    # encode pixel identity into the image; the mask must follow the same permutation
    h, w = size
    ident = np.arange(h * w, dtype=float).reshape(h, w)
    img = np.stack([ident] * 3)
    m = (np.random.default_rng(0).random((h, w)) > 0.5).astype(np.uint8)
    out, m2 = apply_aug(img, m, AugOp(kind, 3.0 if kind == "grid_shuffle" else 1.0, seed=4))
    src = out[0].astype(int)
    assert sorted(src.ravel()) == list(range(h * w))  # a permutation
    np.testing.assert_array_equal(m2, m.ravel()[src])


@given(st.integers(8, 33), st.integers(8, 33), st.sampled_from([2, 3, 4]), st.integers(0, 1000))
def test_grid_shuffle_is_permutation(h, w, cells, seed):
    ident = np.arange(h * w, dtype=float).reshape(1, h, w)
    out, _ = apply_aug(ident, np.zeros((h, w)), AugOp("grid_shuffle", float(cells), seed))
    assert np.array_equal(np.sort(out.ravel()), ident.ravel())


@given(st.sampled_from(["hflip", "vflip", "rot90", "brightness", "hue", "grid_shuffle"]),
       st.floats(-0.3, 0.3), st.integers(0, 1000))
def test_ops_deterministic(kind, mag, seed):
    img, m = pair(seed % 7)
    if kind == "grid_shuffle":
        mag = 3.0
    op = AugOp(kind, mag, seed)
    a, b = apply_aug(img, m, op), apply_aug(img, m, op)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_unknown_op():
    with pytest.raises(ValueError):
        AugOp("blur")


# chains ---------------------------------------------------------------------------


def test_level_one_is_flip():
    assert build_chain(1, 0).kinds() == ["hflip"]


def test_level_six_has_every_kind_once():
    kinds = build_chain(6, 0).kinds()
    assert sorted(kinds) == sorted(DEFAULT_LADDER) and len(set(kinds)) == 6


@given(st.integers(0, 2**31 - 1))
def test_chains_are_prefixes(seed):
    chains = [build_chain(level, seed) for level in range(1, 7)]
    for a, b in zip(chains, chains[1:]):
        assert b.ops[: len(a.ops)] == a.ops and len(b.ops) == len(a.ops) + 1


@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_application_order_stages(seed, level):
    order = build_chain(level, seed).application_order()
    stages = [op.stage for op in order]
    assert stages == sorted(stages)
    assert [op.stage for op in order if op.kind == "grid_shuffle"] in ([], [2])


@pytest.mark.parametrize("level", [0, 7])
def test_level_out_of_range(level):
    with pytest.raises(ValueError):
        build_chain(level, 0)


def test_view_chain_modes():
    assert view_chain(4, 9, AugConfig(mode="cumulative")).kinds() == list(DEFAULT_LADDER[:4])
    assert view_chain(4, 9, AugConfig(mode="simple")).kinds() == ["hflip"]
    rep = view_chain(4, 9, AugConfig(mode="replacement"))
    assert rep.kinds() == [DEFAULT_LADDER[3]] and rep.level == 4


def test_config_validation():
    with pytest.raises(ValueError):
        AugConfig(ladder=("hflip", "hflip"))
    with pytest.raises(ValueError):
        AugConfig(mode="random")


# views ----------------------------------------------------------------------------


def test_single_view_is_flipped_support():
    img, m = pair(3)
    vs = generate_views(img, m, 1, seed=5)
    assert len(vs) == 1
    np.testing.assert_array_equal(vs[0].mask, m[:, ::-1])
    np.testing.assert_array_equal(vs[0].image, img[:, :, ::-1])


def test_views_deterministic():
    img, m = pair(3)
    a, b = generate_views(img, m, 6, seed=11), generate_views(img, m, 6, seed=11)
    for va, vb in zip(a, b):
        assert np.array_equal(va.image, vb.image) and np.array_equal(va.mask, vb.mask) and va.chain == vb.chain


@given(st.integers(0, 10_000), st.integers(1, 6), st.sampled_from(["cumulative", "replacement", "simple"]))
def test_view_invariants(seed, n, mode):
    img, m = pair(seed % 13, 16, 20)
    vs = generate_views(img, m, n, seed=seed, config=AugConfig(mode=mode))
    assert len(vs) == n
    for i, v in enumerate(vs, start=1):
        # level, foreground-count and geometric-permutation consistency
        assert v.chain.level == (1 if mode == "simple" else i)
        assert int(v.mask.sum()) == int(m.sum())
        assert np.array_equal(apply_geometric(m, v.chain), v.mask)
        assert v.image.shape[0] == 3 and v.image.min() >= 0 and v.image.max() <= 1


def test_generate_views_bounds():
    img, m = pair()
    with pytest.raises(ValueError):
        generate_views(img, m, 7, seed=0)


def test_apply_chain_empty():
    img, m = pair()
    out, m2 = apply_chain(img, m, AugChain(0, ()))
    assert np.array_equal(out, img) and np.array_equal(m2, m)


# scheduler ------------------------------------------------------------------------


def run(metrics, config=SchedulerConfig()):
    s = SchedulerState()
    trace = []
    for x in metrics:
        s = scheduler_step(s, x, config)
        trace.append(s)
    return s, trace


def test_three_stagnant_epochs_add_a_view():
    s, _ = run([1.0, 1.0, 1.0, 1.0])
    assert s.current_n == 2 and s.increments == [4] and s.stagnation_count == 0


def test_improving_metric_never_adds_views():
    s, _ = run(np.arange(50, dtype=float))
    assert s.current_n == 1 and s.increments == []


def test_ceiling():
    s, trace = run([0.0] * 40)
    assert s.current_n == 6
    counts = [t.stagnation_count for t in trace if t.current_n == 6]
    assert counts[-1] > 3 and counts == sorted(counts)


def test_two_plateaus_scripted():
    metrics = [1, 2, 3, 3, 3, 3, 4, 5, 6, 6, 6, 6, 7, 8]
    s, trace = run([float(x) for x in metrics])
    assert s.increments == [6, 12] and s.current_n == 3


def test_delta_threshold():
    s, _ = run([1.0, 1.0 + 5e-5, 1.0 + 9e-5, 1.0 + 9.9e-5])
    assert s.current_n == 2


def test_non_progressive_never_grows():
    s, _ = run([0.0] * 20, SchedulerConfig(progressive=False))
    assert s.current_n == 1


@given(st.lists(st.floats(-10, 10, allow_nan=False), max_size=80))
def test_curriculum_monotone_and_bounded(metrics):
    prev = SchedulerState()
    for x in metrics:
        nxt = scheduler_step(prev, x)
        assert prev.current_n <= nxt.current_n <= 6
        if nxt.current_n > prev.current_n or x > prev.best_metric + 1e-4:
            assert nxt.stagnation_count == 0
        prev = nxt


def test_step_does_not_mutate_input():
    s = SchedulerState()
    scheduler_step(s, 1.0)
    assert s.epoch == 0 and s.best_metric == -np.inf
