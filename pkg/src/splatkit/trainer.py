"""Fitting a GaussianCloud to posed, masked views.

Objective per view: (1 - lambda) * L1 + lambda * (1 - SSIM) against the
mask-applied target (background painted black outside the mask).
Optimizer: Adam with per-parameter-class learning rates and an exponential
decay on the means.  Density control clones/splits Gaussians with large
screen-space gradients and prunes nearly transparent ones.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .dataprep import apply_mask
from .errors import DataError, EmptyMask, NonFiniteLoss, ShapeMismatch
from .gaussians import GaussianCloud, load_cloud, logit, save_cloud, sigmoid
from .geometry import PinholeCamera
from .metrics import aggregate_psnr, binarize, psnr
from .rasterizer import ParamGradients, render, render_with_grad
from .utils.io import atomic_write_text

logger = logging.getLogger(__name__)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


# ---------------------------------------------------------------------------
# SSIM

def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _blur(img, win):
    out = correlate1d(img, win, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, win, axis=1, mode="constant", cval=0.0)


def _ssim_terms(a, b, window, c1, c2):
    win = gaussian_window(window)
    mu_a = _blur(a, win)
    mu_b = _blur(b, win)
    e_aa = _blur(a * a, win)
    e_bb = _blur(b * b, win)
    e_ab = _blur(a * b, win)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + c1
    A2 = 2 * cov + c2
    B1 = mu_a * mu_a + mu_b * mu_b + c1
    B2 = var_a + var_b + c2
    return win, mu_a, mu_b, A1, A2, B1, B2


def ssim(a, b, window: int = 11, C1: float = SSIM_C1, C2: float = SSIM_C2) -> float:
    """Mean structural similarity with an 11x11 Gaussian (sigma 1.5) window.

    Windows are zero-padded at the borders.  Works on (H, W) or (H, W, C).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    _, _, _, A1, A2, B1, B2 = _ssim_terms(a, b, window, C1, C2)
    return float(np.mean(A1 * A2 / (B1 * B2)))


def ssim_with_grad(a, b, window: int = 11, C1: float = SSIM_C1, C2: float = SSIM_C2):
    """Mean SSIM and its gradient with respect to ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    win, mu_a, mu_b, A1, A2, B1, B2 = _ssim_terms(a, b, window, C1, C2)
    S = A1 * A2 / (B1 * B2)
    n = S.size
    denom = B1 * B2
    # S as a function of (mu_a, E[a^2], E[ab]); the blur is self-adjoint.
    d_mu = (2 * mu_b * A2 - 2 * mu_b * A1) / denom - S * (2 * mu_a / B1 - 2 * mu_a / B2)
    d_eaa = -S / B2
    d_eab = 2 * A1 / denom
    grad = (_blur(d_mu, win) + 2 * a * _blur(d_eaa, win) + b * _blur(d_eab, win)) / n
    return float(np.mean(S)), grad


def photometric_loss(rendered, target, lam: float = 0.2):
    """(1 - lam) * mean|r - t| + lam * (1 - SSIM(r, t)) and d loss / d rendered."""
    r = np.asarray(rendered, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise ShapeMismatch(f"image shapes differ: {r.shape} vs {t.shape}")
    diff = r - t
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - lam) * np.sign(diff) / diff.size
    loss = (1.0 - lam) * l1
    if lam:
        s, g_s = ssim_with_grad(r, t)
        loss += lam * (1.0 - s)
        grad = grad - lam * g_s
    return loss, grad


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lr, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``lr`` is a float or a mapping from parameter name to a float or an
    array broadcastable against the parameter.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None or m.shape != p.shape:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        rate = lr[name] if isinstance(lr, dict) else lr
        p -= rate * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


def remap_adam_state(state: AdamState, source: np.ndarray) -> None:
    """Re-index moments after density control; rows with source -1 start at zero."""
    keep = source >= 0
    for store in (state.m, state.v):
        for name, arr in store.items():
            new = np.zeros((len(source),) + arr.shape[1:])
            new[keep] = arr[source[keep]]
            store[name] = new


# ---------------------------------------------------------------------------
# configuration

@dataclass
class TrainConfig:
    iterations: int = 7000
    lambda_dssim: float = 0.2
    lr_means: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_sh: float = 2.5e-3
    lr_sh_rest_factor: float = 1.0 / 20.0
    lr_opacity: float = 5e-2
    lr_scales: float = 5e-3
    lr_rotation: float = 1e-3
    densify_from: int = 500
    densify_until: int = 15000
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    opacity_reset_interval: int = 3000
    max_gaussians: int = 200_000
    eval_interval: int = 500
    sh_degree: int = 3
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.background = tuple(float(c) for c in self.background)
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ValueError("lambda_dssim must lie in [0, 1]")
        if self.eval_interval <= 0 or self.densify_interval <= 0:
            raise ValueError("intervals must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return d


TRAIN_CONFIG_HELP = {
    "iterations": "optimization steps",
    "lambda_dssim": "weight of the (1 - SSIM) term in the loss, in [0, 1]",
    "lr_means": "initial learning rate of the means, times the scene extent",
    "lr_means_final": "final learning rate of the means (log-linear decay)",
    "lr_sh": "learning rate of the DC color coefficients",
    "lr_sh_rest_factor": "multiplier on lr_sh for higher SH bands",
    "lr_opacity": "learning rate of the opacity logits",
    "lr_scales": "learning rate of the log scales",
    "lr_rotation": "learning rate of the quaternions",
    "densify_from": "first iteration of density control",
    "densify_until": "last iteration of density control",
    "densify_interval": "iterations between density-control passes",
    "densify_grad_threshold": "mean screen-space gradient (NDC units) that triggers clone/split",
    "percent_dense": "fraction of the scene extent separating clone from split",
    "prune_opacity": "Gaussians with opacity below this are removed",
    "opacity_reset_interval": "iterations between opacity resets (0 disables)",
    "max_gaussians": "no densification beyond this many Gaussians",
    "eval_interval": "iterations between loss/PSNR log points and checkpoint checks",
    "sh_degree": "spherical-harmonic degree of the colors (0..3)",
    "seed": "seed of the view-order generator",
    "background": "RGB background in [0, 1]",
}


# ---------------------------------------------------------------------------
# views, checkpoints, traces

@dataclass
class TrainView:
    image: np.ndarray   # (H, W, 3) float in [0, 1]
    mask: np.ndarray    # (H, W) foreground where >= 0.5
    camera: PinholeCamera
    name: str = ""


def check_views(views: Sequence[TrainView], min_views: int = 1) -> List[TrainView]:
    views = list(views)
    if len(views) < min_views:
        raise DataError(f"need at least {min_views} views, got {len(views)}")
    for v in views:
        v.camera.check_image(v.image)
        if np.shape(v.mask)[:2] != np.shape(v.image)[:2]:
            raise ShapeMismatch(f"view {v.name!r}: mask {np.shape(v.mask)} does not match image")
        if not binarize(v.mask).any():
            raise EmptyMask(f"view {v.name!r} has an empty mask")
    return views


@dataclass
class Checkpoint:
    cloud: GaussianCloud
    iteration: int
    train_loss: float
    eval_psnr: Optional[float]
    metadata: dict = field(default_factory=dict)

    def sidecar(self) -> dict:
        return {"iteration": self.iteration, "train_loss": self.train_loss,
                "eval_psnr": _json_float(self.eval_psnr), "n_gaussians": len(self.cloud),
                "sh_degree": self.cloud.sh_degree, **self.metadata}


def _json_float(x):
    if x is None:
        return None
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Splat PLY at ``path`` plus a JSON metadata sidecar next to it."""
    save_cloud(ckpt.cloud, path)
    atomic_write_text(sidecar_path(path), json.dumps(ckpt.sidecar(), indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> Checkpoint:
    cloud = load_cloud(path)
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
    psnr_value = meta.pop("eval_psnr", None)
    if isinstance(psnr_value, str):
        psnr_value = float(psnr_value)
    return Checkpoint(cloud, int(meta.pop("iteration", 0)), float(meta.pop("train_loss", math.nan)),
                      psnr_value, meta)


@dataclass
class LossTrace:
    iterations: List[int] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    psnrs: List[float] = field(default_factory=list)

    def append(self, iteration: int, loss: float, psnr_value: float) -> None:
        if self.iterations and iteration <= self.iterations[-1]:
            raise ValueError("trace iterations must strictly increase")
        self.iterations.append(iteration)
        self.losses.append(loss)
        self.psnrs.append(psnr_value)

    def __len__(self):
        return len(self.iterations)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "loss", "psnr"])
        for it, loss, p in zip(self.iterations, self.losses, self.psnrs):
            w.writerow([it, repr(loss), "inf" if math.isinf(p) else repr(p)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LossTrace":
        rows = list(csv.reader(io.StringIO(text)))
        trace = cls()
        for r in rows[1:]:
            if r:
                trace.append(int(r[0]), float(r[1]), float(r[2]))
        return trace


class BestCheckpointTracker:
    """Keeps the checkpoint with the highest eval PSNR seen so far.

    Ties keep the earlier checkpoint; NaN scores never win.
    """

    def __init__(self):
        self.best: Optional[Checkpoint] = None

    def update(self, iteration: int, eval_psnr: float, train_loss: float,
               cloud: GaussianCloud, metadata=None) -> bool:
        if eval_psnr is None or math.isnan(eval_psnr):
            if self.best is None:
                self.best = Checkpoint(cloud.copy(), iteration, train_loss, eval_psnr, dict(metadata or {}))
                return True
            return False
        current = self.best.eval_psnr if self.best is not None else None
        if current is None or math.isnan(current) or eval_psnr > current:
            self.best = Checkpoint(cloud.copy(), iteration, train_loss, eval_psnr, dict(metadata or {}))
            return True
        return False


@dataclass
class TrainResult:
    best: Checkpoint
    trace: LossTrace
    final: GaussianCloud
    seconds: float = 0.0


# ---------------------------------------------------------------------------
# density control

def densify_and_prune(cloud: GaussianCloud, grad_accum, config: TrainConfig, scene_extent: float,
                      return_source: bool = False):
    """Clone small / split large high-gradient Gaussians, then prune faint ones.

    ``grad_accum`` holds the mean screen-space gradient norm per Gaussian.
    With ``return_source`` also returns, for every output Gaussian, the
    input index it inherits optimizer state from (-1 for new Gaussians).
    """
    n = len(cloud)
    grad_accum = np.asarray(grad_accum, dtype=np.float64).reshape(n)
    high = grad_accum >= config.densify_grad_threshold
    if n >= config.max_gaussians:
        high[:] = False
    max_scale = np.exp(cloud.log_scales).max(axis=1) if n else np.zeros(0)
    big = max_scale > config.percent_dense * scene_extent
    clone = np.flatnonzero(high & ~big)
    split = np.flatnonzero(high & big)

    parts = [cloud.subset(np.setdiff1d(np.arange(n), split))]
    source = [np.setdiff1d(np.arange(n), split)]
    if len(clone):
        parts.append(cloud.subset(clone))
        source.append(np.full(len(clone), -1))
    if len(split):
        parts.append(_split_children(cloud.subset(split)))
        source.append(np.full(2 * len(split), -1))
    out = parts[0]
    for p in parts[1:]:
        out = out.concat(p)
    source = np.concatenate(source)

    keep = sigmoid(out.opacity_logits) >= config.prune_opacity
    out = out.subset(keep)
    source = source[keep]
    return (out, source) if return_source else out


def _split_children(parents: GaussianCloud) -> GaussianCloud:
    from .geometry import quat_to_rotmat

    q = parents.rotations / np.linalg.norm(parents.rotations, axis=1, keepdims=True)
    R = quat_to_rotmat(q)
    scales = np.exp(parents.log_scales)
    major = np.argmax(scales, axis=1)
    axis = R[np.arange(len(parents)), :, major]
    offset = 0.5 * scales[np.arange(len(parents)), major][:, None] * axis
    children = []
    for sign in (1.0, -1.0):
        c = parents.copy()
        c.means = parents.means + sign * offset
        c.log_scales = parents.log_scales - np.log(1.6)
        children.append(c)
    return children[0].concat(children[1])


# ---------------------------------------------------------------------------
# training loop

def camera_extent(cameras: Sequence[PinholeCamera]) -> float:
    """1.1 x the largest distance of a camera centre from their mean."""
    centers = np.array([c.center for c in cameras])
    radius = np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()
    return float(1.1 * radius) if radius > 0 else 1.0


def mean_loss(cloud, views, targets, config: TrainConfig) -> float:
    total = 0.0
    for view, target in zip(views, targets):
        out = render(cloud, view.camera, config.background)
        total += photometric_loss(out.color, target, config.lambda_dssim)[0]
    return total / len(views)


def mean_psnr(cloud, views, targets, config: TrainConfig) -> float:
    values = [psnr(t, render(cloud, v.camera, config.background).color, 1.0)
              for v, t in zip(views, targets)]
    return aggregate_psnr(values)[0]


def _learning_rates(cloud: GaussianCloud, config: TrainConfig, lr_means: float) -> dict:
    sh_lr = np.full((1, cloud.sh.shape[1], 1), config.lr_sh * config.lr_sh_rest_factor)
    sh_lr[:, 0, :] = config.lr_sh
    return {"means": lr_means, "log_scales": config.lr_scales, "rotations": config.lr_rotation,
            "opacity_logits": config.lr_opacity, "sh": sh_lr}


def _means_lr(config: TrainConfig, iteration: int, extent: float) -> float:
    t = min(max(iteration / config.iterations, 0.0), 1.0)
    lo, hi = np.log(config.lr_means_final), np.log(config.lr_means)
    return float(np.exp(hi * (1 - t) + lo * t)) * extent


def _nonfinite(message, cloud, iteration, dump_path=None):
    state = {name: arr.copy() for name, arr in cloud.params().items()}
    state["iteration"] = np.array(iteration)
    path = None
    if dump_path is not None:
        path = Path(dump_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, **state)
    return NonFiniteLoss(f"{message} at iteration {iteration}", state=state, dump_path=path)


def train(views: Sequence[TrainView], init_cloud: GaussianCloud, config: TrainConfig = None,
          eval_views: Optional[Sequence[TrainView]] = None, scene_extent: Optional[float] = None,
          on_checkpoint: Optional[Callable[[Checkpoint], None]] = None,
          dump_path=None) -> TrainResult:
    """Optimize ``init_cloud`` against ``views``; returns the best checkpoint.

    The checkpoint returned is the one with the highest mean PSNR on
    ``eval_views`` (the training views when omitted) among the log points
    at iteration 0, every ``eval_interval`` and the final iteration.
    ``on_checkpoint`` is called whenever a new best is found.
    """
    config = config or TrainConfig()
    views = check_views(views, min_views=2)
    eval_views = check_views(eval_views) if eval_views is not None else views
    bg = config.background
    targets = [apply_mask(v.image, v.mask, bg) for v in views]
    eval_targets = [apply_mask(v.image, v.mask, bg) for v in eval_views]
    extent = scene_extent if scene_extent is not None else camera_extent([v.camera for v in views])

    cloud = init_cloud.copy()
    rng = np.random.default_rng(config.seed)
    adam = AdamState()
    trace = LossTrace()
    tracker = BestCheckpointTracker()
    grad_sum = np.zeros(len(cloud))
    grad_cnt = np.zeros(len(cloud))
    order: List[int] = []
    start = time.perf_counter()

    def log_point(iteration):
        loss = mean_loss(cloud, views, targets, config)
        score = mean_psnr(cloud, eval_views, eval_targets, config)
        if not math.isfinite(loss):
            raise _nonfinite("non-finite training loss", cloud, iteration, dump_path)
        trace.append(iteration, loss, score)
        logger.info("iter %d  loss %.6f  eval psnr %.3f  gaussians %d", iteration, loss, score, len(cloud))
        if tracker.update(iteration, score, loss, cloud, {"seed": config.seed}) and on_checkpoint:
            on_checkpoint(tracker.best)

    log_point(0)
    for it in range(1, config.iterations + 1):
        if not order:
            order = list(rng.permutation(len(views))[::-1])
        vi = order.pop()
        view, target = views[vi], targets[vi]

        loss, _, grads = render_with_grad(
            cloud, view.camera, bg, lambda c: photometric_loss(c, target, config.lambda_dssim))
        if not math.isfinite(loss) or not grads.is_finite():
            raise _nonfinite("non-finite loss or gradient", cloud, it, dump_path)

        if it <= config.densify_until and len(cloud):
            ndc = grads.mean2d * (0.5 * np.array([view.camera.width, view.camera.height]))
            grad_sum += np.linalg.norm(ndc, axis=1) * grads.visible
            grad_cnt += grads.visible

        lrs = _learning_rates(cloud, config, _means_lr(config, it, extent))
        adam_step(cloud.params(), grads.params(), adam, lrs)
        if not cloud.is_finite():
            raise _nonfinite("non-finite parameters", cloud, it, dump_path)

        if config.densify_from <= it <= config.densify_until and it % config.densify_interval == 0:
            avg = np.where(grad_cnt > 0, grad_sum / np.maximum(grad_cnt, 1), 0.0)
            cloud, source = densify_and_prune(cloud, avg, config, extent, return_source=True)
            remap_adam_state(adam, source)
            grad_sum = np.zeros(len(cloud))
            grad_cnt = np.zeros(len(cloud))

        if config.opacity_reset_interval and it % config.opacity_reset_interval == 0 \
                and it <= config.densify_until:
            cloud.opacity_logits = np.minimum(cloud.opacity_logits, logit(0.01))
            adam.m.pop("opacity_logits", None)
            adam.v.pop("opacity_logits", None)

        if it % config.eval_interval == 0 or it == config.iterations:
            log_point(it)

    return TrainResult(tracker.best, trace, cloud, time.perf_counter() - start)
