"""Distilling colors, opacities and descriptors into a fixed-geometry scene.

The objective per training view is

    L_GS = (1 - lam) * L1(I, I_hat) + lam * (1 - SSIM(I, I_hat)) / 2
           + L1(F_teacher, F_rendered)

with mean-reduced L1 terms. Gradients are exact: rendered values are linear
in colors and features given the blending weights, and opacity gradients are
propagated through the transmittance products (see
:meth:`splatloc.renderer.Rasterization.backward`).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionMismatchError, InvalidInputError
from .geometry import CameraIntrinsics, Pose
from .optim import Adam
from .renderer import Rasterization, Scene, composite_outputs, rasterize

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the first two axes."""
    y = sliding_window_view(x, len(g), axis=0) @ g
    return sliding_window_view(y, len(g), axis=1) @ g


def _filter_valid_adjoint(m: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g) - 1
    pad = [(k, k), (k, k)] + [(0, 0)] * (m.ndim - 2)
    return _filter_valid(np.pad(m, pad), g[::-1])


def _as_hwc(img) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    return img[..., None] if img.ndim == 2 else img


def _ssim_terms(x: np.ndarray, y: np.ndarray, g: np.ndarray):
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    return mx, my, a1, a2, b1, b2


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise InvalidInputError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")


def ssim(img1, img2) -> float:
    """Mean SSIM over channels with an 11x11 Gaussian window (sigma 1.5).

    Only windows fully inside the image contribute. Inputs are assumed to
    have a dynamic range of 1.
    """
    x, y = _as_hwc(img1), _as_hwc(img2)
    _check_pair(x, y)
    *_, a1, a2, b1, b2 = _ssim_terms(x, y, gaussian_window())
    return float(np.mean(a1 * a2 / (b1 * b2)))


def ssim_and_grad(reference, img) -> tuple[float, np.ndarray]:
    """SSIM and its gradient with respect to ``img``."""
    x, y = _as_hwc(reference), _as_hwc(img)
    _check_pair(x, y)
    g = gaussian_window()
    mx, my, a1, a2, b1, b2 = _ssim_terms(x, y, g)
    den = b1 * b2
    s = a1 * a2 / den
    n = s.size
    # s as a function of (mu_y, E[y^2], E[xy]) under the window
    d_my = (2 * mx * a2 - 2 * mx * a1) / den - s * (2 * my / b1 - 2 * my / b2)
    d_yy = -s / b2
    d_xy = 2 * a1 / den
    grad = (
        _filter_valid_adjoint(d_my, g)
        + 2 * y * _filter_valid_adjoint(d_yy, g)
        + x * _filter_valid_adjoint(d_xy, g)
    ) / n
    return float(s.mean()), grad.reshape(np.shape(img))


def loss_color(I, I_hat, lam: float = 0.2) -> float:
    I, I_hat = np.asarray(I, dtype=float), np.asarray(I_hat, dtype=float)
    if I.shape != I_hat.shape:
        raise DimensionMismatchError(f"image shapes differ: {I.shape} vs {I_hat.shape}")
    l1 = float(np.mean(np.abs(I - I_hat)))
    if lam == 0.0:
        return (1.0 - lam) * l1
    return (1.0 - lam) * l1 + lam * 0.5 * (1.0 - ssim(I, I_hat))


def loss_features(F_t, F_r) -> float:
    F_t, F_r = np.asarray(F_t, dtype=float), np.asarray(F_r, dtype=float)
    if F_t.shape != F_r.shape:
        raise DimensionMismatchError(f"feature map shapes differ: {F_t.shape} vs {F_r.shape}")
    return float(np.mean(np.abs(F_t - F_r)))


def loss_color_and_grad(I, I_hat, lam: float):
    """``(L_color, dL/dI_hat)``."""
    diff = I_hat - I
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - lam) * np.sign(diff) / diff.size
    loss = (1.0 - lam) * l1
    if lam != 0.0:
        s, ds = ssim_and_grad(I, I_hat)
        loss += lam * 0.5 * (1.0 - s)
        grad = grad - lam * 0.5 * ds
    return loss, grad


def loss_features_and_grad(F_t, F_r):
    diff = F_r - F_t
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


@dataclass
class TrainConfig:
    iterations: int = 15000
    ssim_weight: float = 0.2
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_feature: float = 2.5e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    log_every: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ssim_weight <= 1.0:
            raise InvalidInputError("ssim_weight must lie in [0, 1]")
        if self.iterations < 0:
            raise InvalidInputError("iterations must be non-negative")


@dataclass
class TrainView:
    image: np.ndarray
    teacher: np.ndarray
    pose: Pose
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=float)
        self.teacher = np.asarray(self.teacher, dtype=float)
        if self.image.shape[:2] != self.teacher.shape[:2]:
            raise DimensionMismatchError("image and teacher map must share height and width")
        if self.image.shape[:2] != self.intrinsics.shape:
            raise DimensionMismatchError("image size does not match the intrinsics")


@dataclass
class LossHistory:
    iteration: list[int] = field(default_factory=list)
    l_color: list[float] = field(default_factory=list)
    l_features: list[float] = field(default_factory=list)

    @property
    def l_gs(self) -> list[float]:
        return [c + f for c, f in zip(self.l_color, self.l_features)]

    def append(self, it: int, lc: float, lf: float) -> None:
        self.iteration.append(it)
        self.l_color.append(lc)
        self.l_features.append(lf)

    def __len__(self) -> int:
        return len(self.iteration)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "L_color", "L_features", "L_GS"])
            for it, lc, lf, lg in zip(self.iteration, self.l_color, self.l_features, self.l_gs):
                w.writerow([it, repr(lc), repr(lf), repr(lg)])

    @classmethod
    def from_csv(cls, path) -> "LossHistory":
        hist = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                hist.append(int(row["iteration"]), float(row["L_color"]), float(row["L_features"]))
        return hist


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-6, 1.0 - 1e-6)
    return np.log(p) - np.log1p(-p)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def view_loss_and_grads(
    raster: Rasterization,
    view: TrainView,
    colors: np.ndarray,
    opacities: np.ndarray,
    features: np.ndarray,
    background: np.ndarray,
    lam: float,
):
    """Loss terms of one view and gradients w.r.t. colors, opacities, features."""
    comp = raster.composite(opacities)
    out = composite_outputs(raster, comp, colors, features, background, {"rgb", "features"})
    lc, g_rgb = loss_color_and_grad(view.image, out.rgb, lam)
    lf, g_feat = loss_features_and_grad(view.teacher, out.features)
    d_col, d_feat, d_op = raster.backward(
        comp, colors, features, background,
        g_rgb.reshape(-1, 3), g_feat.reshape(-1, features.shape[1]),
    )
    return lc, lf, d_col, d_op, d_feat


def total_loss(scene: Scene, views: list[TrainView], lam: float = 0.2) -> float:
    """Mean ``L_GS`` over ``views`` for the current scene."""
    total = 0.0
    for v in views:
        raster = rasterize(scene, v.pose, v.intrinsics)
        comp = raster.composite(scene.opacities)
        out = composite_outputs(raster, comp, scene.colors, scene.features, scene.background,
                                {"rgb", "features"})
        total += loss_color(v.image, out.rgb, lam) + loss_features(v.teacher, out.features)
    return total / len(views)


def train(scene: Scene, views: list[TrainView], config: TrainConfig | None = None):
    """Optimize colors, opacities and features of ``scene`` on posed views.

    Geometry is left untouched. Each iteration draws one view (shuffled
    epochs, seeded) and takes one Adam step; the recorded losses are those of
    the drawn view before the step. Returns ``(trained_scene, LossHistory)``.
    """
    config = config or TrainConfig()
    if not views:
        raise InvalidInputError("train() needs at least one view")
    for v in views:
        if v.teacher.shape[-1] != scene.feature_dim:
            raise DimensionMismatchError(
                f"teacher dimension {v.teacher.shape[-1]} != scene dimension {scene.feature_dim}"
            )
    history = LossHistory()
    if config.iterations == 0:
        return scene.copy(), history

    rng = np.random.default_rng(config.seed)
    rasters = [rasterize(scene, v.pose, v.intrinsics) for v in views]
    alpha0 = scene.opacities.copy()
    logit0 = _logit(alpha0)
    params = {
        "color": scene.colors.copy(),
        "opacity": logit0.copy(),
        "feature": scene.features.copy(),
    }
    opt = Adam(
        {"color": config.lr_color, "opacity": config.lr_opacity, "feature": config.lr_feature},
        betas=config.betas, eps=config.eps,
    )

    def current_opacity():
        return np.where(params["opacity"] == logit0, alpha0, _sigmoid(params["opacity"]))

    order: list[int] = []
    for it in range(config.iterations):
        if not order:
            order = list(rng.permutation(len(views)))
        k = order.pop()
        alpha = current_opacity()
        lc, lf, d_col, d_op, d_feat = view_loss_and_grads(
            rasters[k], views[k], params["color"], alpha, params["feature"],
            scene.background, config.ssim_weight,
        )
        history.append(it, lc, lf)
        opt.step(params, {"color": d_col, "opacity": d_op * alpha * (1.0 - alpha), "feature": d_feat})
        np.clip(params["color"], 0.0, 1.0, out=params["color"])
        if config.log_every and it % config.log_every == 0:
            log.info("iter %d  L_color %.5f  L_features %.5f", it, lc, lf)

    trained = scene.replace(
        colors=params["color"], opacities=current_opacity(), features=params["feature"]
    )
    return trained, history
