"""ISSN decoder: latent + query points -> (SDF, saliency), and its loss.

The decoder is an auto-decoder MLP. The latent code is duplicated per
query point and concatenated with the point coordinates; the raw input is
re-concatenated at a skip layer. The final layer has two heads: tanh for
the signed distance, sigmoid for the saliency score.

The training loss averages clamped-L1 SDF error blended with saliency,
regularizes saliency with -lambda*log(s) and the latent with beta*|z|^2.
With lambda = 0 the blending is disabled entirely and the loss reduces to
plain clamped-L1 plus the latent penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

F32 = np.float32


@dataclass
class DecoderConfig:
    latent_dim: int = 64
    hidden: int = 256
    layers: int = 8
    skip_layer: int = 4
    delta: float = 0.1     # SDF clamp
    lam: float = 1e-3      # saliency blending weight
    beta: float = 0.1      # latent L2 weight

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.delta <= 0:
            raise ValueError("delta must be > 0")
        if self.lam < 0 or self.beta < 0:
            raise ValueError("lam and beta must be >= 0")
        if not 0 < self.skip_layer < self.layers - 1:
            raise ValueError("skip_layer must be an inner layer")


@dataclass
class LatentTable:
    shape_ids: list
    codes: np.ndarray  # (n_shapes, D) float32

    @classmethod
    def init(cls, shape_ids, latent_dim: int, seed: int) -> "LatentTable":
        codes = np.empty((len(shape_ids), latent_dim), dtype=F32)
        for i in range(len(shape_ids)):
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence(entropy=seed, spawn_key=(101, i))))
            codes[i] = rng.normal(0.0, 0.01, latent_dim).astype(F32)
        return cls(list(shape_ids), codes)

    def index_of(self, shape_id: str) -> int:
        return self.shape_ids.index(shape_id)


@dataclass
class FieldPrediction:
    sdf: np.ndarray       # (N,) in (-1, 1)
    saliency: np.ndarray  # (N,) in (0, 1)


def init_decoder_params(cfg: DecoderConfig, seed: int) -> list:
    """He-initialized weights; returns [W0, b0, W1, b1, ...]."""
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=seed, spawn_key=(11,))))
    din = cfg.latent_dim + 3
    params = []
    width_in = din
    for layer in range(cfg.layers):
        if layer == cfg.skip_layer:
            width_in += din
        width_out = 2 if layer == cfg.layers - 1 else cfg.hidden
        scale = np.sqrt(2.0 / width_in)
        params.append((rng.normal(0.0, scale, (width_in, width_out))).astype(F32))
        params.append(np.zeros(width_out, dtype=F32))
        width_in = width_out
    return params


def decode_graph(g: ad.Graph, param_tensors: list, cfg: DecoderConfig,
                 z: ad.Tensor, points: np.ndarray):
    """Record the decoder forward pass; returns (sdf, sal, sal_logit) tensors.

    `points` is an (N, 3) array treated as constant input; `z` is a 1-D
    latent tensor already on the graph.
    """
    n = points.shape[0]
    pts = g.constant(np.asarray(points, dtype=F32))
    zt = ad.tile_rows(g, z, n)
    x = ad.concat_columns(g, zt, pts)
    h = x
    for layer in range(cfg.layers):
        if layer == cfg.skip_layer:
            h = ad.concat_columns(g, h, x)
        w, b = param_tensors[2 * layer], param_tensors[2 * layer + 1]
        h = ad.affine(g, h, w, b)
        if layer < cfg.layers - 1:
            h = ad.relu(g, h)
    sdf_logit = ad.slice_columns(g, h, 0, 1)
    sal_logit = ad.slice_columns(g, h, 1, 2)
    return ad.tanh(g, sdf_logit), ad.sigmoid(g, sal_logit), sal_logit


def decode(params: list, cfg: DecoderConfig, z: np.ndarray,
           points: np.ndarray) -> FieldPrediction:
    """Pure-array forward pass (no graph); used for grids and evaluation."""
    z = np.asarray(z, dtype=F32).reshape(-1)
    pts = np.asarray(points, dtype=F32)
    if z.shape[0] != cfg.latent_dim:
        raise ValueError(f"latent dim {z.shape[0]} != config {cfg.latent_dim}")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must be (N, 3)")
    x = np.concatenate([np.broadcast_to(z, (pts.shape[0], z.shape[0])), pts], axis=1)
    x = np.ascontiguousarray(x)
    h = x
    for layer in range(cfg.layers):
        if layer == cfg.skip_layer:
            h = np.concatenate([h, x], axis=1)
        w, b = params[2 * layer], params[2 * layer + 1]
        h = h @ w + b
        if layer < cfg.layers - 1:
            h = np.where(h > 0, h, F32(0))
    sdf = np.tanh(h[:, 0])
    sal = np.empty_like(h[:, 1])
    pos = h[:, 1] >= 0
    sal[pos] = 1.0 / (1.0 + np.exp(-h[pos, 1]))
    ex = np.exp(h[~pos, 1])
    sal[~pos] = ex / (1.0 + ex)
    return FieldPrediction(sdf, sal)


def clamped_l1(f: float, f_hat: float, delta: float) -> float:
    """|clamp(f, delta) - clamp(f_hat, delta)|."""
    if delta <= 0:
        raise ValueError("delta must be > 0")
    cf = min(delta, max(-delta, f))
    cg = min(delta, max(-delta, f_hat))
    return abs(cf - cg)


def issn_loss(pred: FieldPrediction, gt_sdf: np.ndarray, z: np.ndarray,
              lam: float, beta: float, delta: float) -> float:
    """Reference (non-graph) loss value for a single shape's batch."""
    gt = np.asarray(gt_sdf, dtype=np.float64)
    f = np.asarray(pred.sdf, dtype=np.float64)
    li = np.abs(np.clip(f, -delta, delta) - np.clip(gt, -delta, delta))
    znorm = float(np.sum(np.asarray(z, dtype=np.float64) ** 2))
    if lam > 0:
        s = np.asarray(pred.saliency, dtype=np.float64)
        if np.any(s <= 0):
            raise ValueError("saliency must be positive when lam > 0")
        core = float(np.mean(li * s - lam * np.log(s)))
    else:
        core = float(np.mean(li))
    return core + beta * znorm


def issn_loss_graph(g: ad.Graph, sdf_t: ad.Tensor, sal_t: ad.Tensor,
                    sal_logit_t: ad.Tensor, gt_sdf: np.ndarray, z: ad.Tensor,
                    lam: float, beta: float, delta: float):
    """Graph version of the loss; returns (loss, mean clamped-L1, sal penalty).

    log(s) is evaluated through the logit in softplus form so saturated
    saliency stays finite.
    """
    gt = g.constant(np.asarray(gt_sdf, dtype=F32).reshape(-1, 1))
    li = ad.abs_(g, ad.sub(g, ad.clamp_stopgrad(g, sdf_t, delta),
                           ad.clamp_stopgrad(g, gt, delta)))
    sdf_term = ad.mean_all(g, li)
    if lam > 0:
        blended = ad.mean_all(g, ad.mul(g, li, sal_t))
        sal_pen = ad.mul_scalar(g, ad.mean_all(g, ad.log_sigmoid(g, sal_logit_t)), -lam)
        core = ad.add(g, blended, sal_pen)
    else:
        sal_pen = None
        core = sdf_term
    znorm = ad.sum_all(g, ad.mul(g, z, z))
    loss = ad.add(g, core, ad.mul_scalar(g, znorm, beta))
    return loss, sdf_term, sal_pen


def optimal_saliency(l_value: float, lam: float) -> float:
    """Minimizer of L*s - lam*log(s) over s in (0, 1]: min(1, lam/L)."""
    if lam <= 0:
        raise ValueError("lam must be > 0")
    if l_value < 0:
        raise ValueError("L must be >= 0")
    if l_value == 0:
        return 1.0
    return min(1.0, lam / l_value)
