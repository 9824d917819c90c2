"""Class activation maps: GradCAM, GradCAM++ and ScoreCAM.

A model is explainable when it provides ``layer_split(layer)`` returning an
``(encoder, decoder)`` pair: ``encoder(x)`` yields the target layer's
activations ``A`` (1xKxhxw) and ``decoder(A)`` yields the class logits.
The class score that is differentiated (GradCAM family) or compared
(ScoreCAM) is the pre-softmax logit of the target class.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from ._io import atomic_write_bytes, write_json
from .model import CLASS_NAMES, HOTSPOT

METHODS = ("gradcam", "gradcampp", "scorecam")
RAW_SHAPE = (640, 640)


@dataclass
class CamHeatmap:
    values: np.ndarray
    method: str
    target_class: str
    layer: str = "backbone"
    weights: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown CAM method {self.method!r}")


def _logit(decoder, acts, target: int):
    return decoder(acts)[:, target]


def activations_and_grads(model, x, target: int = HOTSPOT, layer: str = "backbone"):
    """Target-layer activations and d(logit_target)/d(activations), as float64 arrays."""
    encoder, decoder = model.layer_split(layer)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            acts = encoder(x)
        acts = acts.detach().requires_grad_(True)
        score = _logit(decoder, acts, target).sum()
        (grads,) = torch.autograd.grad(score, acts, allow_unused=True)
    finally:
        model.train(was_training)
    if grads is None:
        raise RuntimeError(f"class score does not depend on layer {layer!r}")
    return acts.detach()[0].double().numpy(), grads[0].double().numpy()


def gradcam_weights(grads: np.ndarray) -> np.ndarray:
    return grads.mean(axis=(1, 2))


def gradcampp_weights(acts: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Pixel-weighted positive gradients with closed-form alphas.

    For an exponential class score the higher derivatives reduce to powers of
    the first gradient ``g``, giving ``alpha = g^2 / (2 g^2 + sum(A) g^3)``.
    Zero denominators contribute nothing.
    """
    g2 = grads ** 2
    g3 = grads ** 3
    sum_a = acts.sum(axis=(1, 2), keepdims=True)
    denom = 2.0 * g2 + sum_a * g3
    safe = np.where(denom != 0.0, denom, 1.0)
    alpha = np.where(denom != 0.0, g2 / safe, 0.0)
    return (alpha * np.maximum(grads, 0.0)).sum(axis=(1, 2))


def normalize01(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 0.0:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def upsample(m: np.ndarray, size) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(m, dtype=np.float64))[None, None]
    return F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)[0, 0].numpy()


def combine(acts: np.ndarray, weights: np.ndarray, output_size=RAW_SHAPE) -> np.ndarray:
    """ReLU of the weighted channel sum, upsampled and min-max normalized."""
    cam = np.maximum(np.tensordot(weights, acts, axes=1), 0.0)
    return normalize01(upsample(cam, output_size))


def grad_cam(model, x, target_class: int = HOTSPOT, layer: str = "backbone", output_size=RAW_SHAPE) -> CamHeatmap:
    acts, grads = activations_and_grads(model, x, target_class, layer)
    w = gradcam_weights(grads)
    return CamHeatmap(combine(acts, w, output_size), "gradcam", CLASS_NAMES[target_class], layer, w)


def grad_cam_pp(model, x, target_class: int = HOTSPOT, layer: str = "backbone", output_size=RAW_SHAPE) -> CamHeatmap:
    acts, grads = activations_and_grads(model, x, target_class, layer)
    w = gradcampp_weights(acts, grads)
    return CamHeatmap(combine(acts, w, output_size), "gradcampp", CLASS_NAMES[target_class], layer, w)


@torch.no_grad()
def scorecam_increases(model, x, target: int = HOTSPOT, layer: str = "backbone", batch_size: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel score increase of the activation-masked input over a zero image.

    ``batch_size > 1`` is faster but batched convolutions can differ from
    single passes in the last bits.
    """
    encoder, _ = model.layer_split(layer)
    was_training = model.training
    model.eval()
    try:
        acts = encoder(x)[0]
        up = F.interpolate(acts[None], size=x.shape[-2:], mode="bilinear", align_corners=False)[0]
        lo = up.amin(dim=(1, 2), keepdim=True)
        span = up.amax(dim=(1, 2), keepdim=True) - lo
        masks = torch.where(span > 0, (up - lo) / torch.where(span > 0, span, torch.ones_like(span)),
                            torch.zeros_like(up))
        base = model(torch.zeros_like(x))[0, target]
        scores = []
        for start in range(0, masks.shape[0], batch_size):
            m = masks[start:start + batch_size, None]
            scores.append(model(x * m)[:, target] - base)
        inc = torch.cat(scores)
    finally:
        model.train(was_training)
    return acts.double().numpy(), inc.double().numpy()


def score_cam(model, x, target_class: int = HOTSPOT, layer: str = "backbone", output_size=RAW_SHAPE) -> CamHeatmap:
    acts, inc = scorecam_increases(model, x, target_class, layer)
    w = np.exp(inc - inc.max())
    w /= w.sum()
    return CamHeatmap(combine(acts, w, output_size), "scorecam", CLASS_NAMES[target_class], layer, w)


EXPLAINERS = {"gradcam": grad_cam, "gradcampp": grad_cam_pp, "scorecam": score_cam}


def explain(method: str, model, x, target_class: int = HOTSPOT, layer: str = "backbone", output_size=RAW_SHAPE) -> CamHeatmap:
    if method not in EXPLAINERS:
        raise ValueError(f"unknown CAM method {method!r}; choose from {METHODS}")
    return EXPLAINERS[method](model, x, target_class, layer, output_size)


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)


def save_heatmap(path, cam: CamHeatmap) -> None:
    path = Path(path)
    buf = io.BytesIO()
    Image.fromarray(to_uint8(cam.values), mode="L").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())
    write_json(path.with_suffix(".json"), {"method": cam.method, "class": cam.target_class, "layer": cam.layer})
