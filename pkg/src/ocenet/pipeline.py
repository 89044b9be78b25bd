"""Data preparation, the training loop and full-image inference.

Preprocessing follows the common fundus recipe: luminosity grayscale, gamma
correction on normalized intensities, then contrast-limited adaptive
histogram equalization.  The CLAHE here is the classic tiled algorithm:
per-tile clipped histograms with the excess redistributed uniformly, a
255-scaled cumulative LUT per tile, and bilinear blending between the four
surrounding tile LUTs.  With a 1x1 grid and a clip limit too high to bite it
degenerates to plain histogram equalization, which is what the tests pin it
against.

Training is plain mini-batch Adam under a cosine learning-rate schedule with
patience-based early stopping on validation loss.  Inference stitches
overlapping 48x48 windows and averages their probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, DimensionError, IoError, NumericError
from .network import OCENet, ce_loss


# -- preprocessing ------------------------------------------------------------

@dataclass(frozen=True)
class PreprocessRecord:
    """Everything needed to reproduce a preprocessing run bit-identically."""

    gamma: float = 1.2
    clip_limit: float = 2.0
    grid: tuple[int, int] = (8, 8)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Luminosity grayscale as uint8; accepts uint8 or [0,1] float arrays."""
    arr = np.asarray(image)
    if arr.ndim not in (2, 3) or arr.size == 0:
        raise DimensionError(f"expected (H, W) or (H, W, C) image, got {arr.shape}")
    if arr.dtype.kind == "f":
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    elif arr.dtype != np.uint8:
        raise ContractError(f"image must be uint8 or [0,1] float, got {arr.dtype}")
    if arr.ndim == 3:
        if arr.shape[2] not in (3, 4):
            raise DimensionError(f"expected 3 or 4 channels, got {arr.shape[2]}")
        rgb = arr[:, :, :3].astype(np.float64)
        lum = 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
        arr = np.clip(np.round(lum), 0, 255).astype(np.uint8)
    return arr


def gamma_correct(gray: np.ndarray, gamma: float) -> np.ndarray:
    """v -> v**gamma on normalized intensities, back to uint8."""
    if gamma <= 0:
        raise ContractError(f"gamma must be positive, got {gamma}")
    scaled = (gray.astype(np.float64) / 255.0) ** gamma
    return np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)


def _tile_edges(extent: int, tiles: int) -> np.ndarray:
    return np.linspace(0, extent, tiles + 1).round().astype(np.int64)


def _tile_lut(tile: np.ndarray, clip_limit: float) -> np.ndarray:
    """Clipped-histogram equalization LUT for one tile."""
    npix = tile.size
    hist = np.bincount(tile.ravel(), minlength=256).astype(np.int64)
    clip = max(1, int(clip_limit * npix / 256.0))
    excess = int((hist - clip).clip(min=0).sum())
    hist = np.minimum(hist, clip)
    hist += excess // 256
    hist[:excess % 256] += 1
    cdf = hist.cumsum()
    return np.clip(np.round(cdf * 255.0 / npix), 0, 255).astype(np.uint8)


def clahe(gray: np.ndarray, clip_limit: float = 2.0,
          grid: tuple[int, int] = (8, 8)) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization on a uint8 image."""
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ContractError(f"clahe expects a uint8 (H, W) image, got "
                            f"{gray.dtype} {gray.shape}")
    gh, gw = grid
    h, w = gray.shape
    if gh < 1 or gw < 1:
        raise ContractError(f"tile grid must be at least 1x1, got {grid}")
    if h < gh or w < gw:
        raise ContractError(f"image {gray.shape} smaller than tile grid {grid}")
    ys = _tile_edges(h, gh)
    xs = _tile_edges(w, gw)
    luts = np.empty((gh, gw, 256), dtype=np.uint8)
    for i in range(gh):
        for j in range(gw):
            luts[i, j] = _tile_lut(gray[ys[i]:ys[i + 1], xs[j]:xs[j + 1]], clip_limit)

    # Bilinear blend between the four nearest tile LUTs, clamped at borders.
    cy = (ys[:-1] + ys[1:] - 1) / 2.0
    cx = (xs[:-1] + xs[1:] - 1) / 2.0

    def _axis_mix(coords: np.ndarray, centers: np.ndarray):
        hi = np.searchsorted(centers, coords, side="left")
        hi = np.clip(hi, 1, len(centers) - 1) if len(centers) > 1 else np.zeros_like(hi)
        lo = hi - 1 if len(centers) > 1 else hi
        span = centers[hi] - centers[lo]
        frac = np.where(span > 0, (coords - centers[lo]) / np.where(span == 0, 1, span), 0.0)
        return lo, hi, np.clip(frac, 0.0, 1.0)

    ry, rx = np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64)
    iy0, iy1, fy = _axis_mix(ry, cy)
    ix0, ix1, fx = _axis_mix(rx, cx)
    fy = fy[:, None]
    fx = fx[None, :]
    v = gray
    top = (1 - fx) * luts[iy0[:, None], ix0[None, :], v] + fx * luts[iy0[:, None], ix1[None, :], v]
    bot = (1 - fx) * luts[iy1[:, None], ix0[None, :], v] + fx * luts[iy1[:, None], ix1[None, :], v]
    out = (1 - fy) * top + fy * bot
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def preprocess(image: np.ndarray,
               record: PreprocessRecord = PreprocessRecord()) -> np.ndarray:
    """Grayscale, gamma, CLAHE; returns a float32 (H, W) map in [0, 1]."""
    gray = to_grayscale(image)
    gray = gamma_correct(gray, record.gamma)
    gray = clahe(gray, record.clip_limit, record.grid)
    return (gray.astype(np.float32)) / 255.0


# -- patch sampling -----------------------------------------------------------

@dataclass
class PatchDataset:
    images: np.ndarray            # (N, 1, size, size) float32
    labels: np.ndarray            # (N, size, size) int64, values {0, 1}
    index: list                   # (image id, top, left) per patch
    record: PreprocessRecord

    def __len__(self) -> int:
        return len(self.images)


def sample_patches(images, labels, n: int, size: int, seed: int = 0,
                   record: PreprocessRecord = PreprocessRecord()) -> PatchDataset:
    """Crop ``n`` patches uniformly over images and valid top-left corners."""
    if len(images) != len(labels) or not images:
        raise ContractError(f"need matching non-empty image/label lists, got "
                            f"{len(images)} and {len(labels)}")
    if n < 1 or size < 1:
        raise ContractError(f"need positive patch count and size, got n={n} size={size}")
    for k, (img, lab) in enumerate(zip(images, labels)):
        if img.shape != lab.shape:
            raise DimensionError(f"image {k}: label shape {lab.shape} does not "
                                 f"match image {img.shape}")
        if img.shape[0] < size or img.shape[1] < size:
            raise ContractError(f"image {k} of size {img.shape} is smaller than "
                                f"patch size {size}")
    rng = np.random.default_rng(seed)
    out_x = np.empty((n, 1, size, size), dtype=np.float32)
    out_y = np.empty((n, size, size), dtype=np.int64)
    index = []
    for k in range(n):
        i = int(rng.integers(len(images)))
        h, w = images[i].shape
        top = int(rng.integers(h - size + 1))
        left = int(rng.integers(w - size + 1))
        out_x[k, 0] = images[i][top:top + size, left:left + size]
        out_y[k] = labels[i][top:top + size, left:left + size]
        index.append((i, top, left))
    return PatchDataset(out_x, out_y, index, record)


# -- optimization -------------------------------------------------------------

class Adam(object):
    """Standard Adam with bias correction; state tracks the parameter dtype."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if not 0 < beta1 < 1 or not 0 < beta2 < 1:
            raise ConfigError(f"betas must lie in (0, 1), got {beta1}, {beta2}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self._m[i] = b1 * self._m[i] + (1 - b1) * g
            self._v[i] = b2 * self._v[i] + (1 - b2) * (g * g)
            mhat = self._m[i] / (1 - b1 ** self.t)
            vhat = self._v[i] / (1 - b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def cosine_lr(t: int, total: int, lr0: float = 1e-3, lr_min: float = 1e-6) -> float:
    """lr_min + (lr0 - lr_min) * (1 + cos(pi t / total)) / 2, clamped past total."""
    if total < 1:
        raise ContractError(f"schedule length must be positive, got {total}")
    frac = min(max(t, 0), total) / total
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * frac))


class EarlyStopper:
    """Stop after ``patience`` consecutive epochs without improvement."""

    def __init__(self, patience: int = 8):
        if patience < 1:
            raise ContractError(f"patience must be positive, got {patience}")
        self.patience = patience
        self.best = math.inf
        self.stale = 0

    def update(self, loss: float) -> bool:
        if loss < self.best:
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


# -- training -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    patch_size: int = 48
    num_patches: int = 15000
    batch_size: int = 32
    epochs: int = 50
    early_stop_patience: int = 8
    lr: float = 1e-3
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.1
    temperature_start: float = 30.0
    temperature_end: float = 1.0
    seed: int = 0

    def validate(self) -> "TrainConfig":
        for name in ("patch_size", "num_patches", "batch_size", "epochs",
                     "early_stop_patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.lr <= 0 or self.lr_min < 0:
            raise ConfigError(f"learning rates must be positive, got "
                              f"{self.lr} and {self.lr_min}")
        return self


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    history: list
    best_state: dict
    best_val: float
    stopped_epoch: int


def _batch_loss(model, x: np.ndarray, y: np.ndarray) -> Tensor:
    return ce_loss(model(Tensor(x)), y)


def train(model: OCENet, dataset: PatchDataset, config: TrainConfig) -> TrainResult:
    """Mini-batch Adam over the patch set; keeps the best validation state.

    The validation split is the trailing ``val_fraction`` of the dataset (the
    patches are already randomly ordered).  When the split is empty the
    training loss doubles as the monitored quantity.
    """
    config.validate()
    n = len(dataset)
    if n == 0:
        raise ContractError("cannot train on an empty dataset")
    n_val = int(round(n * config.val_fraction))
    n_train = n - n_val
    if n_train < 1:
        raise ContractError(f"validation split leaves no training patches "
                            f"(n={n}, val_fraction={config.val_fraction})")

    opt = Adam(model.parameters(), lr=config.lr, beta1=config.beta1,
               beta2=config.beta2, eps=config.eps)
    stopper = EarlyStopper(config.early_stop_patience)
    rng = np.random.default_rng(config.seed)
    history: list[EpochStats] = []
    best_state: dict = model.state_dict()
    best_val = math.inf
    step = 0

    for epoch in range(config.epochs):
        opt.lr = cosine_lr(epoch, config.epochs, config.lr, config.lr_min)
        if config.epochs > 1:
            ramp = epoch / (config.epochs - 1)
        else:
            ramp = 1.0
        model.set_temperature(config.temperature_start
                              + ramp * (config.temperature_end - config.temperature_start))

        model.train()
        order = rng.permutation(n_train)
        total, batches = 0.0, 0
        for start in range(0, n_train, config.batch_size):
            pick = order[start:start + config.batch_size]
            step += 1
            try:
                loss = _batch_loss(model, dataset.images[pick], dataset.labels[pick])
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError("loss is not finite")
                opt.zero_grad()
                loss.backward()
                opt.step()
            except NumericError as exc:
                raise NumericError(
                    f"training aborted at epoch {epoch}, step {step}: {exc}") from exc
            total += value
            batches += 1
        train_loss = total / batches

        if n_val:
            model.eval()
            with ag.no_grad():
                vals = []
                for start in range(n_train, n, config.batch_size):
                    xb = dataset.images[start:start + config.batch_size]
                    yb = dataset.labels[start:start + config.batch_size]
                    vals.append(_batch_loss(model, xb, yb).item() * len(xb))
            val_loss = sum(vals) / n_val
            model.train()
        else:
            val_loss = train_loss

        history.append(EpochStats(epoch, opt.lr, train_loss, val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_state = model.state_dict()
        if stopper.update(val_loss):
            break

    model.load_state_dict(best_state)
    return TrainResult(history, best_state, best_val, history[-1].epoch)


# -- inference ----------------------------------------------------------------

def _window_starts(extent: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, extent - patch + 1, stride))
    last = extent - patch
    if starts[-1] != last:
        starts.append(last)
    return starts


def coverage_map(h: int, w: int, patch: int = 48, stride: int = 24) -> np.ndarray:
    """How many sliding windows cover each pixel; the stitching divisor."""
    counts = np.zeros((h, w), dtype=np.int64)
    for top in _window_starts(h, patch, stride):
        for left in _window_starts(w, patch, stride):
            counts[top:top + patch, left:left + patch] += 1
    return counts


def stitch_windows(window_fn, image: np.ndarray, *, patch: int = 48,
                   stride: int = 24, batch_size: int = 4) -> np.ndarray:
    """Slide 48x48-style windows, average ``window_fn`` values over overlaps.

    ``window_fn`` maps a (N, 1, patch, patch) float32 batch to per-pixel
    values of shape (N, patch, patch).  Images smaller than the window are
    edge-padded up to window size and the result is cropped back, so every
    input size is serviceable.
    """
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 2:
        raise DimensionError(f"expected a (H, W) preprocessed image, got {arr.shape}")
    if stride < 1 or patch < 1:
        raise ContractError(f"patch and stride must be positive, got {patch}, {stride}")
    h, w = arr.shape
    pad_h, pad_w = max(0, patch - h), max(0, patch - w)
    if pad_h or pad_w:
        arr = np.pad(arr, ((0, pad_h), (0, pad_w)), mode="edge")

    ph, pw = arr.shape
    tops = _window_starts(ph, patch, stride)
    lefts = _window_starts(pw, patch, stride)
    corners = [(t, l) for t in tops for l in lefts]
    acc = np.zeros((ph, pw), dtype=np.float64)
    cover = np.zeros((ph, pw), dtype=np.int64)
    for start in range(0, len(corners), batch_size):
        group = corners[start:start + batch_size]
        stack = np.stack([arr[t:t + patch, l:l + patch] for t, l in group])
        values = np.asarray(window_fn(stack[:, None, :, :]))
        if values.shape != (len(group), patch, patch):
            raise DimensionError(f"window_fn returned {values.shape}, expected "
                                 f"{(len(group), patch, patch)}")
        for (t, l), win in zip(group, values):
            acc[t:t + patch, l:l + patch] += win
            cover[t:t + patch, l:l + patch] += 1
    return (acc / cover)[:h, :w].astype(np.float32)


def infer_full_image(model, image: np.ndarray, *, patch: int = 48,
                     stride: int = 24, threshold: float = 0.5,
                     batch_size: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Average overlapping window probabilities; returns (prob map, mask)."""

    def vessel_prob(windows: np.ndarray) -> np.ndarray:
        with ag.no_grad():
            logits = model(Tensor(windows))
            return ag.softmax(logits, axis=1).data[:, 1]

    prob_map = stitch_windows(vessel_prob, image, patch=patch, stride=stride,
                              batch_size=batch_size)
    mask = (prob_map >= threshold).astype(np.uint8)
    return prob_map, mask


# -- dataset files ------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """Read a PNG (or other raster file) as a numpy array via Pillow."""
    from PIL import Image, UnidentifiedImageError

    path = Path(path)
    try:
        with Image.open(path) as img:
            return np.asarray(img)
    except FileNotFoundError as exc:
        raise IoError(f"image file {path} does not exist") from exc
    except (UnidentifiedImageError, OSError) as exc:
        raise IoError(f"cannot decode image file {path}: {exc}") from exc


def save_png(path, array: np.ndarray) -> None:
    """Write a uint8 grayscale (or RGB) array as PNG."""
    from PIL import Image

    path = Path(path)
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ContractError(f"save_png expects uint8 data, got {arr.dtype}")
    try:
        Image.fromarray(arr).save(path)
    except OSError as exc:
        raise IoError(f"cannot write image file {path}: {exc}") from exc


def load_dataset(root) -> list:
    """Pair ``images/`` and ``labels/`` files by stem.

    Returns a list of (stem, image array, binary label array) sorted by stem;
    labels binarize at >127.  Missing directories, empty listings and
    unpaired stems are I/O errors naming the offenders.
    """
    root = Path(root)
    image_dir, label_dir = root / "images", root / "labels"
    for d in (image_dir, label_dir):
        if not d.is_dir():
            raise IoError(f"dataset directory {d} does not exist")
    images = {p.stem: p for p in sorted(image_dir.iterdir()) if p.is_file()}
    labels = {p.stem: p for p in sorted(label_dir.iterdir()) if p.is_file()}
    if not images:
        raise IoError(f"no image files in {image_dir}")
    odd = sorted(set(images) ^ set(labels))
    if odd:
        raise IoError(f"unpaired dataset stems: {', '.join(odd)}")
    out = []
    for stem in sorted(images):
        img = load_image(images[stem])
        lab = to_grayscale(load_image(labels[stem]))
        if img.shape[:2] != lab.shape[:2]:
            raise IoError(f"stem {stem}: image {img.shape[:2]} and label "
                          f"{lab.shape[:2]} sizes differ")
        out.append((stem, img, (lab > 127).astype(np.uint8)))
    return out
