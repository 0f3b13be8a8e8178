"""Query-time pipeline, CRF-style refinement, and the evaluation protocol."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

from .data.raster import rasterize
from .data.types import DatasetError, PairedDataset, PhotoRecord, VectorSketch
from .maskgen import binarize, cosine_correlation, soft_threshold, upscale
from .trainer import Segmenter

REPORT_SCHEMA_VERSION = 1


class EvalError(ValueError):
    pass


@dataclass
class RefineParams:
    iterations: int = 5
    spatial_sigma: float = 3.0
    bilateral_xy: float = 30.0
    bilateral_rgb: float = 13.0  # on the 0-255 colour scale
    spatial_weight: float = 3.0
    bilateral_weight: float = 4.0
    threshold: float = 0.5


@dataclass
class GalleryEntry:
    photo_id: int
    mask: np.ndarray  # H x W uint8 in {0, 1}, native photo resolution
    confidence: float


@dataclass
class GalleryResult:
    entries: list[GalleryEntry]


@dataclass
class MetricsReport:
    miou_seen: float
    miou_unseen: float
    hiou: float | None
    pacc: float
    per_class_iou: dict[int, float]

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "miou_seen": self.miou_seen,
            "miou_unseen": self.miou_unseen,
            "hiou": self.hiou,
            "pacc": self.pacc,
            "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
        }


def validate_report(obj: dict) -> None:
    if obj.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise EvalError(f"unsupported report schema {obj.get('schema_version')}")
    for key in ("miou_seen", "miou_unseen", "pacc"):
        v = obj.get(key)
        if not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
            raise EvalError(f"report field {key} out of range: {v}")
    if obj.get("hiou") is not None and not 0.0 <= obj["hiou"] <= 1.0:
        raise EvalError("hiou out of range")
    if not isinstance(obj.get("per_class_iou"), dict):
        raise EvalError("per_class_iou missing")


# -- mask prediction ---------------------------------------------------------


def _resize_photo(pixels: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    if pixels.shape[:2] == tuple(hw):
        return pixels.astype(np.float32)
    img = Image.fromarray((pixels * 255.0 + 0.5).astype(np.uint8))
    img = img.resize((hw[1], hw[0]), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def predict_soft_mask(
    model: Segmenter,
    sketch_global: torch.Tensor,
    photo_pixels: np.ndarray,
) -> np.ndarray:
    """Soft mask at the photo's native resolution."""
    enc_hw = model.encoder.config.input_size
    feats = model.encoder.encode(_resize_photo(photo_pixels, enc_hw), mode="patchwise")
    grid = feats.patch_grid()
    corr = cosine_correlation(sketch_global.reshape(-1), grid)
    soft = upscale(
        soft_threshold(corr, model.tau, model.threshold), photo_pixels.shape[:2]
    )
    return soft.detach().numpy()


def encode_query(model: Segmenter, sketch: VectorSketch, stroke_width: int = 2) -> torch.Tensor:
    raster = rasterize(sketch, model.encoder.config.input_size, stroke_width)
    return model.encoder.encode(raster, mode="global").global_feature


def confidence_score(soft: np.ndarray) -> float:
    """Mean of the top-decile soft values; drives gallery ranking only."""
    flat = np.sort(soft.reshape(-1))
    k = max(1, len(flat) // 10)
    return float(flat[-k:].mean())


def segment_gallery(
    sketch: VectorSketch,
    gallery: list[PhotoRecord] | list[np.ndarray],
    model: Segmenter,
    postprocess: bool = False,
    binarize_threshold: float = 0.5,
    refine_params: RefineParams | None = None,
    stroke_width: int = 2,
) -> GalleryResult:
    """One query sketch against every gallery photo."""
    if not gallery:
        return GalleryResult(entries=[])
    model.encoder.eval()
    refine_params = refine_params or RefineParams(threshold=binarize_threshold)
    entries = []
    with torch.no_grad():
        s_global = encode_query(model, sketch, stroke_width)
        for i, item in enumerate(gallery):
            if isinstance(item, PhotoRecord):
                pixels, photo_id = item.pixels, item.instance_id
            else:
                pixels, photo_id = np.asarray(item), i
            soft = predict_soft_mask(model, s_global, pixels)
            if postprocess:
                hard = refine(soft, pixels, refine_params)
            else:
                hard = binarize(torch.from_numpy(soft), binarize_threshold).values.numpy()
            entries.append(
                GalleryEntry(
                    photo_id=photo_id,
                    mask=hard.astype(np.uint8),
                    confidence=confidence_score(soft),
                )
            )
    return GalleryResult(entries=entries)


# -- CRF-style refinement ----------------------------------------------------


def _bilateral_message(q: np.ndarray, guide: np.ndarray, sigma_xy: float, sigma_rgb01: float) -> np.ndarray:
    """Approximate bilateral filtering of ``q`` guided by the photo.

    Splat-blur-slice on a downsampled joint (space, colour) grid - the
    standard fast approximation of the fully-connected Gaussian kernel.
    """
    h, w = q.shape
    ys, xs = np.mgrid[0:h, 0:w]
    coords = np.stack(
        [
            ys.ravel() / sigma_xy,
            xs.ravel() / sigma_xy,
            guide[..., 0].ravel() / sigma_rgb01,
            guide[..., 1].ravel() / sigma_rgb01,
            guide[..., 2].ravel() / sigma_rgb01,
        ],
        axis=1,
    )
    idx = np.round(coords).astype(np.int64)
    idx -= idx.min(axis=0)
    dims = idx.max(axis=0) + 1
    flat = np.ravel_multi_index(idx.T, dims)

    num = np.bincount(flat, weights=q.ravel(), minlength=int(np.prod(dims))).reshape(dims)
    den = np.bincount(flat, minlength=int(np.prod(dims))).reshape(dims).astype(np.float64)
    num = gaussian_filter(num, sigma=1.0)
    den = gaussian_filter(den, sigma=1.0)
    out = num.reshape(-1)[flat] / np.maximum(den.reshape(-1)[flat], 1e-12)
    return out.reshape(h, w)


def refine(
    mask: np.ndarray | torch.Tensor,
    photo: np.ndarray,
    params: RefineParams | None = None,
) -> np.ndarray:
    """Mean-field refinement with Gaussian spatial + bilateral colour kernels.

    ``iterations=0`` reduces to plain binarisation, and saturated masks
    (uniformly >= 0.99 or <= 0.01) pass through untouched.
    """
    params = params or RefineParams()
    soft = mask.detach().numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)
    soft = soft.astype(np.float64)
    if soft.shape != photo.shape[:2]:
        raise EvalError(f"mask {soft.shape} does not match photo {photo.shape[:2]}")
    hard0 = (soft >= params.threshold).astype(np.uint8)
    if params.iterations <= 0 or soft.min() >= 0.99 or soft.max() <= 0.01:
        return hard0

    p = np.clip(soft, 1e-6, 1.0 - 1e-6)
    unary_fg = -np.log(p)
    unary_bg = -np.log(1.0 - p)
    q = p.copy()
    sigma_rgb01 = params.bilateral_rgb / 255.0
    for _ in range(params.iterations):
        spatial_fg = gaussian_filter(q, sigma=params.spatial_sigma)
        spatial_bg = gaussian_filter(1.0 - q, sigma=params.spatial_sigma)
        bilat_fg = _bilateral_message(q, photo, params.bilateral_xy, sigma_rgb01)
        bilat_bg = _bilateral_message(1.0 - q, photo, params.bilateral_xy, sigma_rgb01)
        energy_fg = unary_fg + params.spatial_weight * spatial_bg + params.bilateral_weight * bilat_bg
        energy_bg = unary_bg + params.spatial_weight * spatial_fg + params.bilateral_weight * bilat_fg
        q = 1.0 / (1.0 + np.exp(energy_fg - energy_bg))
    return (q >= 0.5).astype(np.uint8)


# -- metrics -----------------------------------------------------------------


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Per-image IoU; both-empty convention gives 1.0."""
    if pred.shape != gt.shape:
        raise EvalError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def miou(
    preds: list[np.ndarray], gts: list[np.ndarray], class_of: list[int]
) -> tuple[dict[int, float], float]:
    """Class-averaged IoU: mean per class over its images, then over classes."""
    if not (len(preds) == len(gts) == len(class_of)):
        raise EvalError("misaligned prediction/ground-truth/class lists")
    by_class: dict[int, list[float]] = {}
    for p, g, c in zip(preds, gts, class_of):
        by_class.setdefault(c, []).append(iou(p, g))
    per_class = {c: float(np.mean(v)) for c, v in sorted(by_class.items())}
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, mean


def pacc(preds: list[np.ndarray], gts: list[np.ndarray]) -> float:
    """Fraction of pixels classified correctly, averaged over images."""
    if len(preds) != len(gts):
        raise EvalError("misaligned prediction/ground-truth lists")
    accs = []
    for p, g in zip(preds, gts):
        if p.shape != g.shape:
            raise EvalError(f"mask shapes differ: {p.shape} vs {g.shape}")
        accs.append(float((p.astype(bool) == g.astype(bool)).mean()))
    return float(np.mean(accs)) if accs else float("nan")


def harmonic_iou(seen: float, unseen: float) -> float | None:
    if seen <= 0 or unseen <= 0:
        return None
    return 2.0 * seen * unseen / (seen + unseen)


def mean_foreground_fraction(
    model: Segmenter,
    pairs: list[tuple[VectorSketch, PhotoRecord]],
    stroke_width: int = 2,
) -> float:
    """Mean predicted-mask foreground fraction over paired photos."""
    fracs = []
    for sketch, photo in pairs:
        result = segment_gallery(sketch, [photo], model, stroke_width=stroke_width)
        fracs.append(float(result.entries[0].mask.mean()))
    return float(np.mean(fracs)) if fracs else float("nan")


def wrong_class_foreground(
    model: Segmenter,
    dataset: PairedDataset,
    pairs: list[tuple[VectorSketch, PhotoRecord]],
    seed: int = 0,
    stroke_width: int = 2,
) -> float:
    """Foreground leaked onto photos of a different class than the query."""
    rng = np.random.Generator(np.random.PCG64(seed))
    fracs = []
    for sketch, photo in pairs:
        pool = [q for _, q in dataset.pairs if q.class_id != photo.class_id]
        if not pool:
            continue
        other = pool[int(rng.integers(0, len(pool)))]
        result = segment_gallery(sketch, [other], model, stroke_width=stroke_width)
        fracs.append(float(result.entries[0].mask.mean()))
    return float(np.mean(fracs)) if fracs else float("nan")


def evaluate_protocol(
    model: Segmenter,
    dataset: PairedDataset,
    postprocess: bool = False,
    refine_params: RefineParams | None = None,
    stroke_width: int = 2,
) -> MetricsReport:
    """Seen/unseen split evaluation; touches masks via the eval interface only."""
    seen_classes, unseen_classes = dataset.class_split
    if set(seen_classes) & set(unseen_classes):
        raise EvalError("class splits overlap")

    def run(pairs: list[tuple[VectorSketch, PhotoRecord]]):
        preds, gts, classes = [], [], []
        for sketch, photo in pairs:
            if photo.gt_mask is None:
                raise EvalError(f"photo {photo.instance_id} carries no evaluation mask")
            result = segment_gallery(
                sketch, [photo], model, postprocess=postprocess,
                refine_params=refine_params, stroke_width=stroke_width,
            )
            preds.append(result.entries[0].mask)
            gts.append(photo.gt_mask)
            classes.append(photo.class_id)
        return preds, gts, classes

    seen_pairs = dataset.eval_pairs("seen_test")
    unseen_pairs = dataset.eval_pairs("unseen")
    if not seen_pairs:
        raise EvalError("no held-out seen pairs; check sample_split")

    p_s, g_s, c_s = run(seen_pairs)
    per_class_seen, miou_seen = miou(p_s, g_s, c_s)
    per_class = dict(per_class_seen)

    if unseen_pairs:
        p_u, g_u, c_u = run(unseen_pairs)
        per_class_unseen, miou_unseen = miou(p_u, g_u, c_u)
        per_class.update(per_class_unseen)
        hiou = harmonic_iou(miou_seen, miou_unseen)
        all_preds, all_gts = p_s + p_u, g_s + g_u
    else:
        miou_unseen = float("nan")
        hiou = None
        all_preds, all_gts = p_s, g_s

    return MetricsReport(
        miou_seen=miou_seen,
        miou_unseen=miou_unseen,
        hiou=hiou,
        pacc=pacc(all_preds, all_gts),
        per_class_iou=per_class,
    )
