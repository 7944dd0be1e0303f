"""The two training stages, cue inference, sliding-window 3D inference and
the adaptive-threshold fusion of both predictions.

Stage 1 trains the 2D net on coronal PET slices with lesion-biased
re-sampling; its per-slice predictions stack into a location cue.  Stage 2
trains the 3D net on PET+CT patches with the cue-weighted loss (or the plain
loss when no cues are given, which is the 3D-only baseline).  Inference
tiles the volume with overlapping windows, averages the overlaps, and fusion
binarizes the 3D prediction with a per-voxel threshold: low where the cue is
confident, high where it is not.

All loops are single-threaded and bit-reproducible given (config, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .losses import LossConfig, phase1_loss, phase2_loss
from .model import Model, UNetConfig, build_unet
from .tensor import OptimConfig, Tensor, backward, lr_at_epoch, sgd_update
from .volume import Case, LocationCue, Volume, stack_to_cue, tile_positions, window_scale

__all__ = ["Phase1Config", "Phase2Config", "FusionConfig", "InferenceConfig",
           "TrainingDivergedError", "EpochRecord", "sample_phase1_batch",
           "augment_2d", "train_phase1", "infer_cue", "train_phase2",
           "infer_3d", "fuse", "PET_WINDOW", "CT_WINDOW"]

PET_WINDOW = (0.0, 15.0)
CT_WINDOW = (100.0, 250.0)


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the epoch index in its message."""


@dataclass(frozen=True)
class Phase1Config:
    """Slice-wise localization training: sampling, augmentation, optimizer.

    ``epochs`` is how many epochs actually run; ``optimizer.epochs`` is the
    decay horizon of the schedule (usually the same number, but a shorter run
    against a longer horizon is permitted).
    """

    crop: tuple[int, int] = (64, 80)
    lesion_fraction: float = 0.2
    flip_prob: float = 0.5
    rotation_deg_max: float = 15.0
    batch: int = 8
    axis: int = 1                      # coronal by convention
    pet_window: tuple[float, float] = PET_WINDOW
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    epochs: int | None = None          # None: run the full schedule horizon
    steps_per_epoch: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.lesion_fraction <= 1.0:
            raise ValueError(f"lesion_fraction must be in [0, 1], got {self.lesion_fraction}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if self.axis not in (0, 1, 2):
            raise ValueError(f"axis must be 0, 1 or 2, got {self.axis}")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.epochs is not None and self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    @property
    def run_epochs(self) -> int:
        return self.optimizer.epochs if self.epochs is None else self.epochs


@dataclass(frozen=True)
class Phase2Config:
    """Patch-wise segmentation training with cue-weighted loss."""

    patch: tuple[int, int, int] = (32, 48, 48)
    batch: int = 2
    lesion_center_prob: float = 0.5
    pet_window: tuple[float, float] = PET_WINDOW
    ct_window: tuple[float, float] = CT_WINDOW
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    epochs: int | None = None
    steps_per_epoch: int | None = None

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not 0.0 <= self.lesion_center_prob <= 1.0:
            raise ValueError("lesion_center_prob must be in [0, 1]")
        if self.epochs is not None and self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    @property
    def run_epochs(self) -> int:
        return self.optimizer.epochs if self.epochs is None else self.epochs


@dataclass(frozen=True)
class FusionConfig:
    """Per-voxel threshold choice: ``low`` where cue > gate, else ``high``.

    ``high`` = 0.9 reads the post-process symmetrically (suppress where the
    cue is quiet); ``high`` = gate = 0.5 recovers the lower-only rule, and
    ``low`` = ``high`` = 0.5 is plain thresholding with no post-process.
    """

    gate: float = 0.5
    low: float = 0.1
    high: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.low <= self.gate <= self.high < 1.0:
            raise ValueError(
                f"fusion thresholds must satisfy 0 < low <= gate <= high < 1, "
                f"got low={self.low}, gate={self.gate}, high={self.high}")

    def to_dict(self) -> dict:
        return {"gate": self.gate, "low": self.low, "high": self.high}


@dataclass(frozen=True)
class InferenceConfig:
    """Sliding-window tiling; overlaps aggregate by mean, padding is zero."""

    patch: tuple[int, int, int] = (32, 48, 48)
    stride: tuple[int, int, int] | None = None   # None: half the patch
    window_batch: int = 4

    def effective_stride(self) -> tuple[int, int, int]:
        if self.stride is not None:
            return self.stride
        return tuple(max(1, p // 2) for p in self.patch)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    loss: float


# ---------------------------------------------------------------------------
# stage 1: slice sampling, augmentation, training


def _windowed_pet(case: Case, window) -> np.ndarray:
    return window_scale(case.pet, *window).data


def _slice_index(dataset: list[Case], axis: int):
    """(case, slice) pairs for every slice and for lesion-bearing slices."""
    all_slices, lesion_slices = [], []
    for ci, case in enumerate(dataset):
        n = case.shape[axis]
        has = None
        if case.label is not None:
            has = case.label.data.any(axis=tuple(a for a in range(3) if a != axis))
        for k in range(n):
            all_slices.append((ci, k))
            if has is not None and has[k]:
                lesion_slices.append((ci, k))
    return all_slices, lesion_slices


def sample_phase1_batch(dataset: list[Case], cfg: Phase1Config, rng,
                        _index=None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Draw ``cfg.batch`` (PET slice, mask slice) pairs, with replacement.

    round(batch * lesion_fraction) draws come from lesion-bearing slices, the
    remainder uniformly from all slices.  Slices are windowed PET.
    """
    all_slices, lesion_slices = _index if _index is not None else _slice_index(
        dataset, cfg.axis)
    n_lesion = int(round(cfg.batch * cfg.lesion_fraction))
    if n_lesion > 0 and not lesion_slices:
        raise ValueError(
            "lesion_fraction > 0 but the dataset contains no lesion-bearing slices")
    pets = {}
    out = []

    def fetch(ci, k):
        if ci not in pets:
            pets[ci] = _windowed_pet(dataset[ci], cfg.pet_window)
        img = np.take(pets[ci], k, axis=cfg.axis)
        if dataset[ci].label is None:
            msk = np.zeros_like(img)
        else:
            msk = np.take(dataset[ci].label.data, k, axis=cfg.axis).astype(np.float32)
        return img, msk

    for _ in range(n_lesion):
        ci, k = lesion_slices[rng.integers(len(lesion_slices))]
        out.append(fetch(ci, k))
    for _ in range(cfg.batch - n_lesion):
        ci, k = all_slices[rng.integers(len(all_slices))]
        out.append(fetch(ci, k))
    return out


def _crop_or_pad_2d(img: np.ndarray, msk: np.ndarray, crop, rng):
    """Random-position crop; content placed at a random offset when padding."""
    out_i = np.zeros(crop, dtype=np.float32)
    out_m = np.zeros(crop, dtype=np.float32)
    src, dst = [], []
    for ax in range(2):
        have, want = img.shape[ax], crop[ax]
        if have >= want:
            o = int(rng.integers(0, have - want + 1))
            src.append(slice(o, o + want))
            dst.append(slice(0, want))
        else:
            o = int(rng.integers(0, want - have + 1))
            src.append(slice(0, have))
            dst.append(slice(o, o + have))
    out_i[tuple(dst)] = img[tuple(src)]
    out_m[tuple(dst)] = msk[tuple(src)]
    return out_i, out_m


def augment_2d(img: np.ndarray, msk: np.ndarray, cfg: Phase1Config,
               rng) -> tuple[np.ndarray, np.ndarray]:
    """Identical geometric transform on slice and mask.

    Crop (random position, zero-pad when smaller), horizontal flip with
    ``flip_prob``, rotation by a uniform angle in +-rotation_deg_max degrees
    (bilinear for the image, nearest for the mask, zero fill).
    """
    if img.shape != msk.shape:
        raise ValueError(f"slice {img.shape} and mask {msk.shape} differ")
    img, msk = _crop_or_pad_2d(img, msk, cfg.crop, rng)
    if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        img = img[:, ::-1].copy()
        msk = msk[:, ::-1].copy()
    if cfg.rotation_deg_max > 0:
        angle = float(rng.uniform(-cfg.rotation_deg_max, cfg.rotation_deg_max))
        img = ndimage.rotate(img, angle, reshape=False, order=1,
                             mode="constant", cval=0.0)
        msk = ndimage.rotate(msk, angle, reshape=False, order=0,
                             mode="constant", cval=0.0)
        msk = (msk > 0.5).astype(np.float32)
    return img.astype(np.float32), msk.astype(np.float32)


def _run_epochs(model: Model, cfg, step_fn, n_steps: int) -> list[EpochRecord]:
    history = []
    opt = cfg.optimizer
    for epoch in range(cfg.run_epochs):
        lr = lr_at_epoch(opt.alpha0, min(epoch, opt.epochs), opt.epochs)
        losses = []
        for _ in range(n_steps):
            loss = step_fn()
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch}")
            backward(loss)
            sgd_update(model.params, opt, lr)
            losses.append(value)
        history.append(EpochRecord(epoch=epoch, lr=lr, loss=float(np.mean(losses))))
    return history


def train_phase1(dataset: list[Case], model_cfg: UNetConfig,
                 cfg: Phase1Config) -> tuple[Model, list[EpochRecord]]:
    """Train the slice-wise localization net; deterministic per seed."""
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    model = build_unet(model_cfg, seed=cfg.seed)
    rng = np.random.default_rng([0x9A5E1, cfg.seed])
    index = _slice_index(dataset, cfg.axis)
    n_steps = cfg.steps_per_epoch or max(1, math.ceil(len(index[0]) / cfg.batch))

    def step():
        pairs = sample_phase1_batch(dataset, cfg, rng, _index=index)
        pairs = [augment_2d(i, m, cfg, rng) for i, m in pairs]
        x = np.stack([p[0] for p in pairs])[:, None]
        y = np.stack([p[1] for p in pairs])[:, None]
        pred = model.train().forward(x)
        return phase1_loss(pred, Tensor(y), batch_axis=0)

    history = _run_epochs(model, cfg, step, n_steps)
    return model.eval(), history


# ---------------------------------------------------------------------------
# cue inference


def _pad_to_multiple_2d(img: np.ndarray, div: int) -> tuple[np.ndarray, tuple[int, int]]:
    pads = tuple((-n) % div for n in img.shape)
    if any(pads):
        img = np.pad(img, [(0, p) for p in pads])
    return img, pads


def infer_cue(model2d: Model, case: Case, axis: int = 1,
              pet_window=PET_WINDOW, slice_batch: int = 16) -> LocationCue:
    """Per-slice eval-mode forward over the whole volume, restacked as a cue."""
    model2d.eval()
    pet = _windowed_pet(case, pet_window)
    div = model2d.config.divisor
    n = case.shape[axis]
    results = []
    for start in range(0, n, slice_batch):
        ks = range(start, min(start + slice_batch, n))
        imgs, pads = [], None
        for k in ks:
            img, pads = _pad_to_multiple_2d(np.take(pet, k, axis=axis), div)
            imgs.append(img)
        x = np.stack(imgs)[:, None]
        try:
            pred = model2d.forward(x).data[:, 0]
        except Exception as exc:
            raise RuntimeError(
                f"cue inference failed on slices {ks.start}..{ks.stop - 1} "
                f"of case {case.id!r}: {exc}") from exc
        for i in range(pred.shape[0]):
            sl = pred[i]
            if pads and any(pads):
                sl = sl[:sl.shape[0] - pads[0] or None, :sl.shape[1] - pads[1] or None]
            results.append(np.clip(sl, 0.0, 1.0))
    return stack_to_cue(results, axis, case.spacing)


# ---------------------------------------------------------------------------
# stage 2: patch training


def _windowed_channels(case: Case, cfg) -> np.ndarray:
    pet = _windowed_pet(case, cfg.pet_window)
    ct = window_scale(case.ct, *cfg.ct_window).data
    return np.stack([pet, ct])


def _patch_origin(rng, case: Case, patch, lesion_voxels, p_centered: float):
    shape = case.shape
    max_origin = tuple(n - p for n, p in zip(shape, patch))
    if lesion_voxels is not None and len(lesion_voxels) and rng.random() < p_centered:
        # keep a lesion voxel inside the window at a uniform offset; anchoring
        # it to the center would teach a position shortcut that sliding-window
        # inference then averages away
        vox = lesion_voxels[rng.integers(len(lesion_voxels))]
        return tuple(int(np.clip(v - rng.integers(0, p), 0, m))
                     for v, p, m in zip(vox, patch, max_origin))
    return tuple(int(rng.integers(0, m + 1)) for m in max_origin)


def train_phase2(dataset: list[Case], cues: list[LocationCue] | None,
                 model_cfg: UNetConfig, cfg: Phase2Config
                 ) -> tuple[Model, list[EpochRecord]]:
    """Train the patch-wise 3D net.

    ``cues`` must align one-to-one with ``dataset`` (precomputed from the
    frozen stage-1 model); passing ``None`` trains with the unweighted
    stage-1 objective instead, which is the plain 3D baseline.
    """
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    if cues is not None:
        if len(cues) != len(dataset):
            raise ValueError(
                f"got {len(cues)} cues for {len(dataset)} cases")
        for case, cue in zip(dataset, cues):
            cue.check_aligned(case)
    patch = tuple(cfg.patch)
    div = model_cfg.divisor
    if any(p % div != 0 for p in patch):
        raise ValueError(f"patch {patch} must be divisible by {div} per axis")
    for case in dataset:
        if any(n < p for n, p in zip(case.shape, patch)):
            raise ValueError(
                f"case {case.id!r} shape {case.shape} smaller than patch {patch}")

    model = build_unet(model_cfg, seed=cfg.seed)
    rng = np.random.default_rng([0x9A5E2, cfg.seed])
    channels = [_windowed_channels(case, cfg) for case in dataset]
    lesions = [np.argwhere(case.label.data > 0) if case.label is not None else None
               for case in dataset]
    n_steps = cfg.steps_per_epoch or max(1, math.ceil(len(dataset) / cfg.batch))

    def step():
        xs, ys, ws = [], [], []
        for _ in range(cfg.batch):
            ci = int(rng.integers(len(dataset)))
            case = dataset[ci]
            origin = _patch_origin(rng, case, patch, lesions[ci],
                                   cfg.lesion_center_prob)
            sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
            xs.append(channels[ci][(slice(None),) + sl])
            label = (case.label.data[sl] if case.label is not None
                     else np.zeros(patch, dtype=np.uint8))
            ys.append(label.astype(np.float32)[None])
            if cues is not None:
                ws.append(cues[ci].data[sl][None])
        x = np.stack(xs)
        y = np.stack(ys)
        pred = model.train().forward(x)
        if cues is None:
            return phase1_loss(pred, Tensor(y), LossConfig(lambda_=1.0), batch_axis=0)
        return phase2_loss(pred, Tensor(y), np.stack(ws), batch_axis=0)

    history = _run_epochs(model, cfg, step, n_steps)
    return model.eval(), history


# ---------------------------------------------------------------------------
# 3D inference and fusion


def infer_3d(model3d: Model, case: Case, icfg: InferenceConfig,
             pet_window=PET_WINDOW, ct_window=CT_WINDOW) -> Volume:
    """Sliding-window eval-mode prediction over the whole case.

    The volume is zero-padded up to the patch size when needed, windows are
    visited in sorted origin order, and overlapping predictions average; the
    mean makes the result independent of visiting order.
    """
    model3d.eval()
    x = _windowed_channels(
        case, Phase2Config(patch=icfg.patch, pet_window=pet_window,
                           ct_window=ct_window))
    patch = tuple(icfg.patch)
    shape = case.shape
    pads = tuple(max(0, p - n) for p, n in zip(patch, shape))
    if any(pads):
        x = np.pad(x, [(0, 0)] + [(0, p) for p in pads])
    padded_shape = x.shape[1:]
    origins = tile_positions(padded_shape, patch, icfg.effective_stride())

    acc = np.zeros(padded_shape, dtype=np.float64)
    cnt = np.zeros(padded_shape, dtype=np.float64)
    for start in range(0, len(origins), icfg.window_batch):
        group = origins[start:start + icfg.window_batch]
        batch = np.stack([x[(slice(None),) + tuple(
            slice(o, o + p) for o, p in zip(origin, patch))] for origin in group])
        pred = model3d.forward(batch).data[:, 0]
        for origin, window in zip(group, pred):
            sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
            acc[sl] += window
            cnt[sl] += 1.0
    prob = (acc / cnt).astype(np.float32)
    prob = prob[tuple(slice(0, n) for n in shape)]
    return Volume(np.clip(prob, 0.0, 1.0), case.spacing, "PROB")


def fuse(pred: Volume, cue: LocationCue, fcfg: FusionConfig) -> Volume:
    """Adaptive binarization: threshold ``low`` where cue > gate, else ``high``."""
    if pred.shape != cue.shape:
        raise ValueError(f"prediction {pred.shape} misaligned with cue {cue.shape}")
    if pred.modality != "PROB":
        raise ValueError(f"fuse expects a PROB prediction, got {pred.modality}")
    thresholds = np.where(cue.data > fcfg.gate, fcfg.low, fcfg.high)
    mask = (pred.data > thresholds).astype(np.uint8)
    return Volume(mask, pred.spacing, "MASK")
