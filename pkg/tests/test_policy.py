import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from langsteer.policy import (
    KernelShaper, OrbitLift, Policy, PolicyConfig, PixelAction, SteerableHead, decode, extract_crop,
    fft_correlate, load_checkpoint, save_checkpoint, stitch_and_split, theta_bin,
)
from langsteer.groups import GroupElement
from langsteer.steerable import check_steerability, cross_correlate, lift_orbit

SMALL = dict(n_rot=36, n_theta=12, max_freq=5, kernel_size=11, crop_size=15, width=4, n_blocks=2,
             embed_dim=8, smooth_sigma=2.0)
N = 32


@pytest.fixture(scope="module")
def small():
    torch.manual_seed(0)
    return Policy(PolicyConfig(**SMALL)).double().eval()


def _scene(seed, size=N, margin=9):
    """Random observation plus a semantic map supported on one small blob away from the border."""
    rng = np.random.default_rng(seed)
    obs = rng.random((4, size, size))
    sem = np.zeros((size, size))
    u, v = rng.integers(margin, size - margin - 3, size=2)
    sem[u:u + 3, v:v + 2] = rng.random((3, 2)) + 0.5
    return obs, sem, rng.standard_normal(SMALL["embed_dim"])


# ---------------------------------------------------------------------------
# config


def test_config_rejects_even_sides_and_aliasing():
    with pytest.raises(ValueError):
        PolicyConfig(kernel_size=40)
    with pytest.raises(ValueError):
        PolicyConfig(crop_size=64)
    with pytest.raises(ValueError):
        PolicyConfig(n_rot=36, max_freq=18)


def test_default_config_sizes():
    cfg = PolicyConfig()
    assert len(cfg.frequencies) == 32 and 2 * cfg.max_freq < cfg.n_rot
    assert cfg.n_theta % 4 == 0 and cfg.n_rot % 4 == 0


# ---------------------------------------------------------------------------
# decoding


def test_decode_hand_example():
    vol = np.zeros((72, 5, 6))
    vol[36, 3, 4] = 1.0
    a = decode(vol)
    assert (a.u, a.v, a.bin) == (3, 4, 36)
    assert a.theta == pytest.approx(math.pi)


def test_decode_ties_take_lowest_linear_index():
    vol = np.zeros((4, 3, 3))
    vol[2, 0, 0] = vol[1, 2, 2] = vol[1, 2, 1] = 5.0
    assert decode(vol) == PixelAction(2, 1, math.pi / 2, 1)


def test_decode_rejects_non_finite_and_wrong_rank():
    vol = np.zeros((2, 2, 2))
    vol[0, 0, 1] = np.nan
    with pytest.raises(ValueError):
        decode(vol)
    with pytest.raises(ValueError):
        decode(np.zeros((3, 3)))


def test_theta_bin_snaps_to_nearest():
    assert theta_bin(0.0, 72) == 0
    assert theta_bin(2 * math.pi - 1e-9, 72) == 0
    assert theta_bin(math.radians(7.4), 72) == 1
    assert theta_bin(math.radians(7.6), 72) == 2
    assert theta_bin(-math.pi / 2, 4) == 3


def test_extract_crop_centres_and_pads():
    obs = np.arange(2 * 8 * 8, dtype=float).reshape(2, 8, 8)
    c = extract_crop(obs, 4, 4, 3)
    assert np.array_equal(c, obs[:, 3:6, 3:6])
    edge = extract_crop(obs, 0, 7, 3)
    assert edge.shape == (2, 3, 3)
    assert np.all(edge[:, 0] == 0) and np.all(edge[:, :, 2] == 0)
    assert np.array_equal(edge[:, 1:, :2], obs[:, :2, 6:])


# ---------------------------------------------------------------------------
# stitch and split


def test_stitch_picks_the_global_max_and_maps_back():
    a, b = np.zeros((4, 3, 5)), np.zeros((4, 3, 7))
    a[1, 1, 1] = 2.0
    b[3, 2, 6] = 3.0
    ws, act = stitch_and_split([(10, a), (11, b)])
    assert ws == 11 and (act.u, act.v, act.bin) == (2, 6, 3)


def test_stitch_tie_goes_to_the_first_workspace():
    a, b = np.zeros((2, 3, 3)), np.zeros((2, 3, 3))
    a[0, 1, 2] = b[0, 1, 0] = 1.0
    ws, act = stitch_and_split([(0, a), (1, b)])
    assert ws == 0 and (act.u, act.v) == (1, 2)


def test_stitch_single_workspace_is_plain_decode():
    vol = np.random.default_rng(0).random((6, 4, 4))
    assert stitch_and_split([(0, vol)]) == (0, decode(vol))


def test_stitch_errors():
    with pytest.raises(ValueError):
        stitch_and_split([])
    with pytest.raises(ValueError):
        stitch_and_split([(0, np.zeros((2, 3, 3))), (1, np.zeros((2, 4, 3)))])


# ---------------------------------------------------------------------------
# kernel machinery


def test_fft_correlate_matches_direct_correlation():
    rng = np.random.default_rng(1)
    field = rng.standard_normal((1, 2, 12, 10))
    ker = rng.standard_normal((1, 3, 2, 5, 5))
    out = fft_correlate(torch.tensor(field), torch.tensor(ker))[0].numpy()
    pad = np.pad(field[0], ((0, 0), (2, 2), (2, 2)))
    ref = np.zeros((3, 12, 10))
    for d in range(3):
        for u in range(12):
            for v in range(10):
                ref[d, u, v] = np.sum(pad[:, u:u + 5, v:v + 5] * ker[0, d])
    assert np.abs(out - ref).max() < 1e-10


def test_torch_lift_matches_reference_lift():
    base = np.random.default_rng(2).standard_normal((3, 11, 11))
    ours = OrbitLift(11, 36)(torch.tensor(base)[None])[0].numpy()
    ref = lift_orbit(base, 36, "bilinear").spatial_form
    assert np.abs(ours - ref).max() < 1e-12


def test_head_equals_reference_correlation_at_sampled_angles():
    """Fourier projection then resampling matches direct correlation with the band-limited orbit."""
    cfg = PolicyConfig(**SMALL)
    head = SteerableHead(cfg).double()
    rng = np.random.default_rng(3)
    field = rng.standard_normal((3, 20, 20))
    base = rng.standard_normal((3, 11, 11))
    out = head(torch.tensor(field)[None], torch.tensor(base)[None])[0].numpy()
    stack = OrbitLift(11, 36)(torch.tensor(base)[None])[0].numpy()
    fk = np.einsum("dn,nchw->dchw", head.fwd.numpy(), stack)
    orbit = np.einsum("td,dchw->tchw", head.inv.numpy(), fk)
    for t in (0, 5, 11):
        assert np.abs(out[t] - cross_correlate(field, orbit[t][None])[0]).max() < 1e-9


def test_delta_field_response_stays_inside_kernel_footprint():
    cfg = PolicyConfig(**SMALL)
    head = SteerableHead(cfg).double()
    field = np.zeros((1, 3, 25, 25))
    field[0, :, 12, 12] = 1.0
    base = np.zeros((1, 3, 11, 11))
    base[0, :, 5, 5] = 1.0
    out = head(torch.tensor(field), torch.tensor(base))[0].numpy()
    mask = np.zeros((25, 25), bool)
    mask[7:18, 7:18] = True
    assert np.abs(out[:, ~mask]).max() < 1e-12
    assert np.abs(out[:, mask]).max() > 0.1


def test_kernel_shaper_is_unit_norm_and_rotation_invariant():
    shaper = KernelShaper(11, 2.0).double()
    raw = torch.tensor(np.random.default_rng(4).standard_normal((2, 3, 11, 11)))
    out = shaper(raw)
    assert torch.allclose(out.flatten(1).norm(dim=1), torch.ones(2, dtype=torch.float64))
    assert torch.allclose(shaper(torch.rot90(raw, 1, (-2, -1))), torch.rot90(out, 1, (-2, -1)), atol=1e-14)


def test_generated_kernels_pass_quarter_turn_steerability(small):
    pick = small.lifted_kernel("pick", np.random.default_rng(5).standard_normal(SMALL["embed_dim"]))
    place = small.lifted_kernel("place", np.random.default_rng(6).random((4, 15, 15)))
    for k in (pick, place):
        for i in range(4):
            assert check_steerability(k, GroupElement(4, i)).residual == 0.0


# ---------------------------------------------------------------------------
# semantic gating


def test_zero_semantic_map_gives_zero_volume(small):
    obs, _, lang = _scene(0)
    zero = np.zeros((N, N))
    assert np.all(small.pick_volume(obs, lang, zero, fuse=False) == 0)
    assert np.all(small.place_volume(obs, lang, zero, obs[:, :15, :15], fuse=False) == 0)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.05, 20.0), st.integers(0, 50))
def test_volume_is_linear_in_the_gate(scale, seed):
    torch.manual_seed(0)
    pol = Policy(PolicyConfig(**SMALL)).double().eval()
    obs, sem, lang = _scene(seed)
    a = pol.pick_volume(obs, lang, sem, fuse=False)
    b = pol.pick_volume(obs, lang, scale * sem, fuse=False)
    assert np.allclose(b, scale * a, rtol=1e-9, atol=1e-12)
    assert decode(a) == decode(b)


def test_fusion_head_starts_as_identity(small):
    obs, sem, lang = _scene(1)
    assert np.allclose(small.pick_volume(obs, lang, sem, fuse=True),
                       small.pick_volume(obs, lang, sem, fuse=False), atol=1e-12)


# ---------------------------------------------------------------------------
# equivariance, float64 with frozen random weights


@pytest.mark.parametrize("seed", range(4))
def test_pick_translation_is_exact(small, seed):
    obs, sem, lang = _scene(seed)
    du, dv = 3, -2
    vol = small.pick_volume(obs, lang, sem, fuse=False)
    moved = small.pick_volume(np.roll(obs, (du, dv), (1, 2)), lang, np.roll(sem, (du, dv), (0, 1)), fuse=False)
    # compare away from the zero-padded border
    inner = (slice(None), slice(5, N - 5), slice(5, N - 5))
    shifted = (slice(None), slice(5 + du, N - 5 + du), slice(5 + dv, N - 5 + dv))
    assert np.abs(moved[shifted] - vol[inner]).max() < 1e-10
    a, b = decode(vol), decode(moved)
    assert (b.u, b.v, b.bin) == (a.u + du, a.v + dv, a.bin)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_pick_quarter_turn_is_exact(small, k):
    obs, sem, lang = _scene(10 + k)
    vol = small.pick_volume(obs, lang, sem, fuse=False)
    rot = small.pick_volume(np.rot90(obs, k, (1, 2)), lang, np.rot90(sem, k), fuse=False)
    q = k * SMALL["n_theta"] // 4
    expect = np.rot90(np.roll(vol, q, axis=0), k, (1, 2))
    assert np.abs(rot - expect).max() < 1e-10


@pytest.mark.parametrize("k", [1, 3])
def test_place_follows_the_placement_rotation(small, k):
    obs, sem, lang = _scene(20 + k)
    crop = np.random.default_rng(k).random((4, 15, 15))
    vol = small.place_volume(obs, lang, sem, crop, fuse=False)
    rot = small.place_volume(np.rot90(obs, k, (1, 2)), lang, np.rot90(sem, k), crop, fuse=False)
    q = k * SMALL["n_theta"] // 4
    assert np.abs(rot - np.rot90(np.roll(vol, q, axis=0), k, (1, 2))).max() < 1e-10


@pytest.mark.parametrize("k", [1, 2, 3])
def test_place_undoes_the_picked_object_rotation(small, k):
    obs, sem, lang = _scene(30 + k)
    crop = np.random.default_rng(40 + k).random((4, 15, 15))
    vol = small.place_volume(obs, lang, sem, crop, fuse=False)
    rot = small.place_volume(obs, lang, sem, np.rot90(crop, k, (1, 2)), fuse=False)
    q = k * SMALL["n_theta"] // 4
    assert np.abs(rot - np.roll(vol, -q, axis=0)).max() < 1e-10


def test_place_generator_commutes_with_quarter_turns(small):
    crop = torch.tensor(np.random.default_rng(7).random((1, 4, 15, 15)))
    gen = small.place.kernel
    assert torch.allclose(gen(torch.rot90(crop, 1, (-2, -1))), torch.rot90(gen(crop), 1, (-2, -1)), atol=1e-13)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path, small):
    torch.manual_seed(3)
    pol = Policy(PolicyConfig(**SMALL)).eval()
    man = save_checkpoint(pol, tmp_path / "ck", {"backend_id": "mock"})
    assert man["n_rot"] == 36 and man["h"] == 11 and man["h_c"] == 15 and man["backend_id"] == "mock"
    back, man2 = load_checkpoint(tmp_path / "ck")
    assert man2 == man
    for (k, a), (_, b) in zip(pol.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), k
    obs, sem, lang = _scene(2)
    assert np.array_equal(pol.pick_volume(obs, lang, sem), back.pick_volume(obs, lang, sem))


def test_checkpoint_shape_mismatch_is_reported(tmp_path):
    import json

    pol = Policy(PolicyConfig(**SMALL))
    save_checkpoint(pol, tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    name = next(iter(man["shapes"]))
    man["shapes"][name] = [1, 2, 3]
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(ValueError, match=name):
        load_checkpoint(tmp_path)
