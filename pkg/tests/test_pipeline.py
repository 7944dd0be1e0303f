"""Training loops, cue inference, sliding-window stitching and fusion."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from locseg import pipeline as PL
from locseg import tensor as T
from locseg.model import UNetConfig, build_unet
from locseg.phantom import PhantomSpec, generate_case
from locseg.tensor import OptimConfig, Tensor
from locseg.volume import LocationCue, Volume

SPEC = PhantomSpec(shape=(16, 24, 16), spacing=(4.0, 4.0, 4.0),
                   lesion_count=(1, 2), lesion_radius_mm=(8.0, 12.0),
                   decoy_count=(1, 1), decoy_radius_mm=(12.0, 14.0))
MODEL_2D = UNetConfig(rank=2, in_channels=1, levels=2, channels=(4, 8))
MODEL_3D = UNetConfig(rank=3, in_channels=2, levels=2, channels=(4, 8))


@pytest.fixture(scope="module")
def tiny_dataset():
    return [generate_case(SPEC, seed=s) for s in range(3)]


def p1cfg(**kw):
    defaults = dict(crop=(16, 16), batch=4, rotation_deg_max=0.0, flip_prob=0.0,
                    optimizer=OptimConfig(alpha0=1e-2, epochs=2), seed=0,
                    steps_per_epoch=1)
    defaults.update(kw)
    return PL.Phase1Config(**defaults)


def p2cfg(**kw):
    defaults = dict(patch=(8, 8, 8), batch=2,
                    optimizer=OptimConfig(alpha0=1e-2, epochs=2), seed=0,
                    steps_per_epoch=1)
    defaults.update(kw)
    return PL.Phase2Config(**defaults)


# ---------------------------------------------------------------------------
# batch sampling


def test_batch_lesion_quota(tiny_dataset):
    cfg = p1cfg(batch=32, lesion_fraction=0.2)
    rng = np.random.default_rng(0)
    batch = PL.sample_phase1_batch(tiny_dataset, cfg, rng)
    lesion_draws = sum(1 for _, m in batch if m.sum() > 0)
    assert len(batch) == 32
    assert lesion_draws >= round(32 * 0.2)


def test_batch_fraction_zero_plain_uniform(tiny_dataset):
    cfg = p1cfg(batch=16, lesion_fraction=0.0)
    batch = PL.sample_phase1_batch(tiny_dataset, cfg, np.random.default_rng(1))
    assert len(batch) == 16  # no quota enforced


def test_batch_fraction_one_all_lesion(tiny_dataset):
    cfg = p1cfg(batch=8, lesion_fraction=1.0)
    batch = PL.sample_phase1_batch(tiny_dataset, cfg, np.random.default_rng(2))
    assert all(m.sum() > 0 for _, m in batch)


def test_batch_errors_without_lesion_slices():
    spec = PhantomSpec(shape=(16, 24, 16), lesion_count=(0, 0))
    dataset = [generate_case(spec, seed=0)]
    with pytest.raises(ValueError, match="no lesion-bearing slices"):
        PL.sample_phase1_batch(dataset, p1cfg(lesion_fraction=0.5),
                               np.random.default_rng(0))


# ---------------------------------------------------------------------------
# augmentation


def test_augment_identity_when_disabled():
    rng = np.random.default_rng(3)
    img = rng.random((16, 16)).astype(np.float32)
    msk = (rng.random((16, 16)) > 0.8).astype(np.float32)
    cfg = p1cfg(crop=(16, 16), flip_prob=0.0, rotation_deg_max=0.0)
    out_i, out_m = PL.augment_2d(img, msk, cfg, rng)
    np.testing.assert_array_equal(out_i, img)
    np.testing.assert_array_equal(out_m, msk)


def test_augment_flip_is_involution():
    rng = np.random.default_rng(4)
    img = rng.random((8, 8)).astype(np.float32)
    msk = (rng.random((8, 8)) > 0.5).astype(np.float32)
    cfg = p1cfg(crop=(8, 8), flip_prob=1.0, rotation_deg_max=0.0)
    once_i, once_m = PL.augment_2d(img, msk, cfg, rng)
    twice_i, twice_m = PL.augment_2d(once_i, once_m, cfg, rng)
    np.testing.assert_array_equal(twice_i, img)
    np.testing.assert_array_equal(twice_m, msk)


def test_augment_rotate_90_hand_permutation(monkeypatch):
    # at exactly 90 degrees the resample lands on grid points:
    # out[i, j] = in[j, N-1-i]
    img = np.arange(9, dtype=np.float32).reshape(3, 3)
    msk = (img > 4).astype(np.float32)
    cfg = p1cfg(crop=(3, 3), flip_prob=0.0, rotation_deg_max=90.0)

    class FixedAngle:
        def integers(self, *a, **k):
            return 0
        def random(self):
            return 1.0
        def uniform(self, lo, hi):
            return 90.0

    out_i, out_m = PL.augment_2d(img, msk, cfg, FixedAngle())
    want = np.zeros_like(img)
    for i in range(3):
        for j in range(3):
            want[i, j] = img[j, 2 - i]
    np.testing.assert_allclose(out_i, want, atol=1e-5)
    np.testing.assert_array_equal(out_m, (want > 4).astype(np.float32))


def test_augment_pad_when_crop_larger():
    rng = np.random.default_rng(5)
    img = np.ones((4, 4), dtype=np.float32)
    cfg = p1cfg(crop=(8, 8), flip_prob=0.0, rotation_deg_max=0.0)
    out_i, out_m = PL.augment_2d(img, img.copy(), cfg, rng)
    assert out_i.shape == (8, 8)
    assert out_i.sum() == 16.0  # content preserved, zero padding around


def test_augment_mask_stays_binary():
    rng = np.random.default_rng(6)
    img = rng.random((12, 12)).astype(np.float32)
    msk = (rng.random((12, 12)) > 0.5).astype(np.float32)
    cfg = p1cfg(crop=(12, 12), flip_prob=0.5, rotation_deg_max=30.0)
    for _ in range(5):
        _, out_m = PL.augment_2d(img, msk, cfg, rng)
        assert set(np.unique(out_m)) <= {0.0, 1.0}


# ---------------------------------------------------------------------------
# stage-1 training


def test_train_phase1_zero_epochs(tiny_dataset):
    model, history = PL.train_phase1(tiny_dataset, MODEL_2D, p1cfg(epochs=0))
    assert history == []
    init = build_unet(MODEL_2D, seed=0)
    np.testing.assert_array_equal(model.params["enc1.conv1.w"].data,
                                  init.params["enc1.conv1.w"].data)


def test_train_phase1_deterministic(tiny_dataset):
    cfg = p1cfg()
    m1, h1 = PL.train_phase1(tiny_dataset, MODEL_2D, cfg)
    m2, h2 = PL.train_phase1(tiny_dataset, MODEL_2D, cfg)
    assert h1 == h2
    for (_, a), (_, b) in zip(m1.params, m2.params):
        np.testing.assert_array_equal(a.data, b.data)


def test_train_phase1_records_schedule(tiny_dataset):
    cfg = p1cfg(optimizer=OptimConfig(alpha0=1e-2, epochs=4))
    _, history = PL.train_phase1(tiny_dataset, MODEL_2D, cfg)
    assert [r.epoch for r in history] == [0, 1, 2, 3]
    assert history[0].lr == pytest.approx(1e-2)
    assert all(a.lr >= b.lr for a, b in zip(history, history[1:]))


# ---------------------------------------------------------------------------
# cue inference


def test_cue_shape_matches_case(tiny_dataset):
    model = build_unet(MODEL_2D, seed=0).eval()
    cue = PL.infer_cue(model, tiny_dataset[0], axis=1)
    assert cue.shape == tiny_dataset[0].shape


def test_cue_zeroed_head_is_half(tiny_dataset):
    model = build_unet(MODEL_2D, seed=0)
    model.params["head.w"].data[:] = 0.0
    model.params["head.b"].data[:] = 0.0
    cue = PL.infer_cue(model, tiny_dataset[0], axis=1)
    np.testing.assert_allclose(cue.data, 0.5, atol=1e-6)


def test_cue_slice_order_round_trip(tiny_dataset):
    # a model that echoes its input reproduces the windowed PET slice by slice
    class Echo:
        config = MODEL_2D
        def eval(self):
            return self
        def forward(self, x):
            return Tensor(np.clip(np.asarray(x)[:, :1], 0.0, 1.0))

    case = tiny_dataset[0]
    cue = PL.infer_cue(Echo(), case, axis=2)
    from locseg.volume import window_scale
    np.testing.assert_allclose(cue.data, window_scale(case.pet, *PL.PET_WINDOW).data,
                               atol=1e-6)


def test_cue_inference_pads_odd_slices():
    spec = PhantomSpec(shape=(10, 9, 11), spacing=(4, 4, 4), lesion_count=(0, 0))
    case = generate_case(spec, seed=0)
    model = build_unet(MODEL_2D, seed=0)
    cue = PL.infer_cue(model, case, axis=1)
    assert cue.shape == (10, 9, 11)


# ---------------------------------------------------------------------------
# stage-2 training


def test_train_phase2_zero_cue_equals_uncued(tiny_dataset):
    zero_cues = [LocationCue(Volume(np.zeros(c.shape, dtype=np.float32),
                                    c.spacing, "PROB")) for c in tiny_dataset]
    cfg = p2cfg(epochs=2)
    _, h_zero = PL.train_phase2(tiny_dataset, zero_cues, MODEL_3D, cfg)
    _, h_none = PL.train_phase2(tiny_dataset, None, MODEL_3D, cfg)
    assert [r.loss for r in h_zero] == [r.loss for r in h_none]


def test_train_phase2_zero_epochs(tiny_dataset):
    model, history = PL.train_phase2(tiny_dataset, None, MODEL_3D, p2cfg(epochs=0))
    assert history == []


def test_train_phase2_rejects_misaligned_cue(tiny_dataset):
    bad = [LocationCue(Volume(np.zeros((4, 4, 4), dtype=np.float32),
                              (4, 4, 4), "PROB")) for _ in tiny_dataset]
    with pytest.raises(ValueError, match="misaligned"):
        PL.train_phase2(tiny_dataset, bad, MODEL_3D, p2cfg())


def test_train_phase2_rejects_bad_patch(tiny_dataset):
    with pytest.raises(ValueError, match="divisible"):
        PL.train_phase2(tiny_dataset, None, MODEL_3D, p2cfg(patch=(7, 8, 8)))


# ---------------------------------------------------------------------------
# sliding-window inference


class ConstModel:
    """Stub returning a fixed value per forward call (one window at a time)."""

    def __init__(self, values):
        self.values = list(values)
        self.calls = 0

    def eval(self):
        return self

    def forward(self, x):
        out = np.full((x.shape[0], 1) + x.shape[2:], self.values[self.calls],
                      dtype=np.float32)
        self.calls += 1
        return Tensor(out)


def _flat_case(extent=4):
    zeros = np.zeros((1, 1, extent), dtype=np.float32)
    return __import__("locseg.volume", fromlist=["Case"]).Case(
        "flat", Volume(zeros + 150.0, (1, 1, 1), "CT"),
        Volume(zeros + 1.0, (1, 1, 1), "PET"))


def test_infer3d_exact_tiling_no_overlap(tiny_dataset):
    model = build_unet(MODEL_3D, seed=1)
    case = tiny_dataset[0]
    icfg = PL.InferenceConfig(patch=(16, 24, 16), stride=(16, 24, 16))
    out = PL.infer_3d(model, case, icfg)
    assert out.shape == case.shape
    assert out.modality == "PROB"


def test_infer3d_constant_model_constant_output(tiny_dataset):
    case = tiny_dataset[0]
    icfg = PL.InferenceConfig(patch=(8, 8, 8), stride=(4, 4, 4), window_batch=1)
    n_windows = len(PL.tile_positions(case.shape, icfg.patch, icfg.stride))
    model = ConstModel([0.7] * n_windows)
    out = PL.infer_3d(model, case, icfg)
    np.testing.assert_allclose(out.data, 0.7, atol=1e-6)


def test_infer3d_two_window_overlap_is_mean():
    case = _flat_case(extent=4)
    icfg = PL.InferenceConfig(patch=(1, 1, 3), stride=(1, 1, 1), window_batch=1)
    model = ConstModel([0.2, 0.6])
    out = PL.infer_3d(model, case, icfg)
    np.testing.assert_allclose(out.data[0, 0], [0.2, 0.4, 0.4, 0.6], atol=1e-6)


def test_infer3d_pads_small_volume():
    case = _flat_case(extent=4)
    icfg = PL.InferenceConfig(patch=(8, 8, 8), window_batch=1)
    model = ConstModel([0.3])
    out = PL.infer_3d(model, case, icfg)
    assert out.shape == (1, 1, 4)
    np.testing.assert_allclose(out.data, 0.3, atol=1e-6)


# ---------------------------------------------------------------------------
# fusion


def _prob(data):
    return Volume(np.asarray(data, dtype=np.float32), (1, 1, 1), "PROB")


def _cue(data):
    return LocationCue(_prob(data))


def test_fuse_truth_table():
    shape = (1, 1, 1)
    do = lambda p, c, **kw: int(PL.fuse(_prob(np.full(shape, p)),
                                        _cue(np.full(shape, c)),
                                        PL.FusionConfig(**kw)).data[0, 0, 0])
    assert do(0.2, 0.6) == 1                      # cue confident: low bar
    assert do(0.2, 0.4, high=0.5) == 0            # cue quiet, below default
    assert do(0.6, 0.4, high=0.9) == 0            # cue-vetoed
    assert do(1.0 - 1e-6, 1.0) == 1               # both certain


def test_fuse_equal_thresholds_is_plain_thresholding():
    rng = np.random.default_rng(33)
    pred = _prob(rng.random((6, 6, 6)))
    cue = _cue(rng.random((6, 6, 6)))
    fused = PL.fuse(pred, cue, PL.FusionConfig(gate=0.5, low=0.5, high=0.5))
    np.testing.assert_array_equal(fused.data, (pred.data > 0.5).astype(np.uint8))


def test_fuse_rejects_misalignment():
    with pytest.raises(ValueError, match="misaligned"):
        PL.fuse(_prob(np.zeros((2, 2, 2))), _cue(np.zeros((2, 2, 3))),
                PL.FusionConfig())


def test_fusion_config_validation():
    with pytest.raises(ValueError, match="low <= gate <= high"):
        PL.FusionConfig(gate=0.5, low=0.6, high=0.9)
    with pytest.raises(ValueError, match="low <= gate <= high"):
        PL.FusionConfig(high=1.0)


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 0.5), st.floats(0.5, 0.89))
@settings(max_examples=30, deadline=None)
def test_fuse_monotone_in_pred_and_cue(seed, low, high):
    rng = np.random.default_rng(seed)
    cfg = PL.FusionConfig(gate=0.5, low=low, high=high)
    pred = rng.random((4, 4, 4)).astype(np.float32)
    cue = rng.random((4, 4, 4)).astype(np.float32)
    base = PL.fuse(_prob(pred), _cue(cue), cfg).data
    # raising a prediction never flips a voxel on->off
    bumped = np.clip(pred + rng.random((4, 4, 4)).astype(np.float32) * 0.3, 0, 1)
    up = PL.fuse(_prob(bumped), _cue(cue), cfg).data
    assert np.all(up >= base)
    # raising the cue across the gate never flips on->off when low <= high
    cue_up = np.clip(cue + 0.6, 0, 1).astype(np.float32)
    up2 = PL.fuse(_prob(pred), _cue(cue_up), cfg).data
    assert np.all(up2 >= base)
