"""Dynamic group convolution: multi-head saliency-gated sparse convolution.

A DGC layer splits its output channels across several heads. Each head
scores every input channel with a small squeeze-expand saliency generator,
keeps only the highest-scoring channels, amplifies the survivors by their
saliency, and convolves them with the matching slices of its filter bank.
Head outputs are concatenated and shuffled so downstream layers mix
information across heads.

Two gating modes exist:

* head-wise: each head keeps exactly ceil((1 - prune_rate) * C) channels,
  chosen per sample by top-k over non-negative saliencies;
* global: a single network-wide threshold on absolute saliency decides,
  so heads may keep uneven (possibly empty) channel sets and saliencies
  keep their sign (see dgconv.global_threshold).

Training uses a dense masked formulation, mathematically identical to
gathering: unselected channels are zeroed before a full convolution, which
also makes the masked-gradient rule exact (filter slices touching channels
no sample selected receive exactly zero gradient). Evaluation gathers the
selected channels and convolves the reduced slice, the same computation the
inference index plan performs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ConvFilter, col2im, conv2d_forward, conv_output_size, im2col

__all__ = [
    "DgcLayerConfig",
    "HeadParams",
    "DgcLayer",
    "GateDecision",
    "HeadwiseGating",
    "GlobalGating",
    "init_dgc_layer",
    "saliency_forward",
    "headwise_gate",
    "select_and_amplify",
    "gather_filters",
    "channel_shuffle",
    "channel_unshuffle",
    "dgc_forward",
    "dgc_backward",
    "DgcForward",
    "DgcGrads",
    "lasso_loss",
    "sgc_forward",
    "sgc_backward",
]

# Guards float representation error in expressions like (1 - 2/3) * 6 so the
# integer-valued cases of ceil/floor land on the mathematical answer.
_RANK_EPS = 1e-9


def kept_channels(in_channels: int, prune_rate: float) -> int:
    """Number of channels a head keeps: ceil((1 - prune_rate) * C)."""
    return int(math.ceil((1.0 - prune_rate) * in_channels - _RANK_EPS))


@dataclass(frozen=True)
class DgcLayerConfig:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 0
    heads: int = 4
    squeeze: int = 16
    prune_rate: float = 0.75
    lasso_coeff: float = 1e-5

    def __post_init__(self) -> None:
        if self.out_channels % self.heads != 0:
            raise ValueError(f"out_channels {self.out_channels} not divisible by "
                             f"heads {self.heads}")
        if self.in_channels % self.squeeze != 0:
            raise ValueError(f"in_channels {self.in_channels} not divisible by "
                             f"squeeze rate {self.squeeze}")
        if not 0.0 <= self.prune_rate < 1.0:
            raise ValueError(f"prune_rate must be in [0, 1), got {self.prune_rate}")
        if kept_channels(self.in_channels, self.prune_rate) < 1:
            raise ValueError("target prune rate keeps no channels")

    @property
    def head_out_channels(self) -> int:
        return self.out_channels // self.heads

    @property
    def squeezed(self) -> int:
        return self.in_channels // self.squeeze


@dataclass
class HeadParams:
    """One head: squeeze-expand saliency generator plus its filter bank."""

    w_squeeze: np.ndarray   # (C/d, C)
    b_squeeze: np.ndarray   # (C/d,)
    w_expand: np.ndarray    # (C, C/d)
    b_expand: np.ndarray    # (C,), the saliency bias
    filters: np.ndarray     # (C'/heads, C, k, k)

    def validate(self, config: DgcLayerConfig) -> None:
        c, cd = config.in_channels, config.squeezed
        k = config.kernel_size
        expect = {
            "w_squeeze": (cd, c), "b_squeeze": (cd,),
            "w_expand": (c, cd), "b_expand": (c,),
            "filters": (config.head_out_channels, c, k, k),
        }
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"head parameter {name} has shape {arr.shape}, "
                                 f"expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"head parameter {name} contains non-finite values")


@dataclass
class DgcLayer:
    config: DgcLayerConfig
    heads: list[HeadParams]


def init_dgc_layer(config: DgcLayerConfig, rng: np.random.Generator,
                   saliency_bias: float = 0.1) -> DgcLayer:
    """Fan-in-scaled normal init; saliency bias starts at a small positive
    constant so initial saliencies are non-degenerate."""
    c, cd, k = config.in_channels, config.squeezed, config.kernel_size
    heads = []
    for _ in range(config.heads):
        heads.append(HeadParams(
            w_squeeze=rng.normal(size=(cd, c)) * math.sqrt(2.0 / c),
            b_squeeze=np.zeros(cd),
            w_expand=rng.normal(size=(c, cd)) * math.sqrt(2.0 / cd),
            b_expand=np.full(c, saliency_bias),
            filters=rng.normal(size=(config.head_out_channels, c, k, k))
            * math.sqrt(2.0 / (c * k * k)),
        ))
    layer = DgcLayer(config, heads)
    for h in heads:
        h.validate(config)
    return layer


# ---------------------------------------------------------------------------
# Saliency generation
# ---------------------------------------------------------------------------

def saliency_forward(x: np.ndarray, head: HeadParams,
                     keep_sign: bool = False) -> np.ndarray:
    """Per-channel importance scores, one row per sample; shape (N, C).

    Squeeze-expand transform over globally pooled channel statistics:
    relu inside, relu outside unless keep_sign keeps negative saliencies.
    """
    if x.ndim != 4 or x.shape[1] != head.w_squeeze.shape[1]:
        raise ValueError(f"saliency input must be (N, {head.w_squeeze.shape[1]}, H, W), "
                         f"got {x.shape}")
    p = x.mean(axis=(2, 3))
    z1 = p @ head.w_squeeze.T + head.b_squeeze
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ head.w_expand.T + head.b_expand
    return z2 if keep_sign else np.maximum(z2, 0.0)


# ---------------------------------------------------------------------------
# Gating
# ---------------------------------------------------------------------------

@dataclass
class GateDecision:
    """Selected channels (strictly increasing) and their amplifications."""

    indices: np.ndarray
    amplify: np.ndarray
    threshold: float

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.amplify = np.asarray(self.amplify, dtype=np.float64)
        if self.indices.size and np.any(np.diff(self.indices) <= 0):
            raise ValueError("decision indices must be strictly increasing")
        if self.indices.shape != self.amplify.shape:
            raise ValueError("indices and amplifications must align")


@dataclass(frozen=True)
class HeadwiseGating:
    prune_rate: float


@dataclass(frozen=True)
class GlobalGating:
    threshold: float


def headwise_gate(g: np.ndarray, prune_rate: float) -> GateDecision:
    """Keep the ceil((1 - prune_rate) * C) largest saliencies of one vector.

    Ties break toward the lower channel index; the reported threshold is
    the smallest selected saliency.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1:
        raise ValueError("headwise_gate expects a single saliency vector")
    if not 0.0 <= prune_rate < 1.0:
        raise ValueError(f"prune_rate must be in [0, 1), got {prune_rate}")
    k = kept_channels(g.size, prune_rate)
    order = np.argsort(-g, kind="stable")
    sel = np.sort(order[:k])
    return GateDecision(sel, g[sel], float(g[sel].min()))


def _topk_mask(g: np.ndarray, k: int) -> np.ndarray:
    """Boolean keep-mask of the k largest entries per row, ties to lower index."""
    order = np.argsort(-g, axis=1, kind="stable")
    mask = np.zeros(g.shape, dtype=bool)
    np.put_along_axis(mask, order[:, :k], True, axis=1)
    return mask


def select_and_amplify(x: np.ndarray, decision: GateDecision) -> np.ndarray:
    """Gather the decided channels and scale each by its amplification.

    Works on (C, H, W) or (N, C, H, W); the channel axis is axis -3.
    """
    if x.ndim not in (3, 4):
        raise ValueError(f"expected 3-D or 4-D input, got shape {x.shape}")
    c = x.shape[-3]
    if decision.indices.size and (decision.indices[0] < 0 or decision.indices[-1] >= c):
        raise ValueError(f"decision indices out of range for {c} channels")
    return x[..., decision.indices, :, :] * decision.amplify[..., :, None, None]


def gather_filters(filters: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """Restrict a filter bank (C_out, C, k, k) to the given in-channel slices."""
    if filters.ndim != 4:
        raise ValueError(f"filter bank must be 4-D, got {filters.shape}")
    return filters[:, np.asarray(indices, dtype=np.int64)]


def channel_shuffle(x: np.ndarray, heads: int) -> np.ndarray:
    """Interleave channels across head groups: (head h, slot s) -> s*heads + h."""
    n, c, h, w = x.shape
    if c % heads != 0:
        raise ValueError(f"channel count {c} not divisible by {heads} heads")
    return np.ascontiguousarray(
        x.reshape(n, heads, c // heads, h, w).transpose(0, 2, 1, 3, 4)).reshape(n, c, h, w)


def channel_unshuffle(x: np.ndarray, heads: int) -> np.ndarray:
    """Exact inverse of channel_shuffle with the same head count."""
    n, c, h, w = x.shape
    if c % heads != 0:
        raise ValueError(f"channel count {c} not divisible by {heads} heads")
    return np.ascontiguousarray(
        x.reshape(n, c // heads, heads, h, w).transpose(0, 2, 1, 3, 4)).reshape(n, c, h, w)


# ---------------------------------------------------------------------------
# Layer forward / backward
# ---------------------------------------------------------------------------

@dataclass
class DgcForward:
    """Output of one DGC layer pass plus everything the backward pass and
    the logging/runtime side need to replay the gating."""

    output: np.ndarray
    saliencies: list[np.ndarray]        # per head, (N, C)
    masks: list[np.ndarray]             # per head, (N, C) bool
    gating: HeadwiseGating | GlobalGating
    keep_sign: bool
    _cache: dict | None = field(default=None, repr=False)

    def decisions(self, head: int) -> list[GateDecision]:
        """Materialize per-sample gate decisions for one head."""
        g, m = self.saliencies[head], self.masks[head]
        thr = (self.gating.threshold if isinstance(self.gating, GlobalGating)
               else None)
        out = []
        for n in range(g.shape[0]):
            idx = np.flatnonzero(m[n])
            t = thr if thr is not None else float(g[n, idx].min()) if idx.size else 0.0
            out.append(GateDecision(idx, g[n, idx], t))
        return out

    @property
    def realized_prune_rate(self) -> float:
        kept = sum(int(m.sum()) for m in self.masks)
        total = sum(m.size for m in self.masks)
        return 1.0 - kept / total


def _gate_masks(g: np.ndarray, gating: HeadwiseGating | GlobalGating) -> np.ndarray:
    if isinstance(gating, HeadwiseGating):
        if not 0.0 <= gating.prune_rate < 1.0:
            raise ValueError(f"prune_rate must be in [0, 1), got {gating.prune_rate}")
        return _topk_mask(g, kept_channels(g.shape[1], gating.prune_rate))
    # Global threshold keeps every |saliency| at or above it; may be empty.
    return np.abs(g) >= gating.threshold


def _gathered_head_forward(x_sample: np.ndarray, indices: np.ndarray,
                           amplify: np.ndarray, filters: np.ndarray,
                           stride: int, padding: int) -> np.ndarray:
    """Reference sparse execution for one sample and one head.

    Gathers the selected input channels, scales them, and convolves with
    the matching filter slices. The inference index plan runs this exact
    code, which is what makes plan execution bit-identical to the
    reference forward. An empty selection yields a zero output slice.
    """
    co, _, k, _ = filters.shape
    h, w = x_sample.shape[-2:]
    if indices.size == 0:
        oh = conv_output_size(h, k, stride, padding)
        ow = conv_output_size(w, k, stride, padding)
        return np.zeros((co, oh, ow))
    xs = x_sample[indices] * amplify[:, None, None]
    y = conv2d_forward(xs[None], ConvFilter(gather_filters(filters, indices),
                                            stride, padding))
    return y[0]


def dgc_forward(x: np.ndarray, layer: DgcLayer,
                gating: HeadwiseGating | GlobalGating, *,
                training: bool = True) -> DgcForward:
    """Full DGC layer pass: saliency, gate, amplify, convolve, shuffle.

    Output shape is (N, C', H', W') regardless of how many channels each
    head kept. Training mode runs the dense masked formulation and caches
    intermediates for dgc_backward; evaluation mode runs the gathered
    sparse formulation per sample.
    """
    cfg = layer.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"dgc input must be (N, {cfg.in_channels}, H, W), got {x.shape}")
    keep_sign = isinstance(gating, GlobalGating)
    n = x.shape[0]
    k, stride, pad = cfg.kernel_size, cfg.stride, cfg.padding

    saliencies, masks, head_out = [], [], []
    cache = {"x": x, "heads": []} if training else None
    for head in layer.heads:
        p = x.mean(axis=(2, 3))
        z1 = p @ head.w_squeeze.T + head.b_squeeze
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ head.w_expand.T + head.b_expand
        g = z2 if keep_sign else np.maximum(z2, 0.0)
        mask = _gate_masks(g, gating)
        ghat = np.where(mask, g, 0.0)
        saliencies.append(g)
        masks.append(mask)

        if training:
            xg = x * ghat[:, :, None, None]
            cols, oh, ow = im2col(xg, k, stride, pad)
            wmat = head.filters.reshape(cfg.head_out_channels, -1)
            y = np.ascontiguousarray(
                (cols @ wmat.T).reshape(n, oh, ow, cfg.head_out_channels)
                .transpose(0, 3, 1, 2))
            cache["heads"].append({"p": p, "z1": z1, "a1": a1, "z2": z2,
                                   "g": g, "mask": mask, "ghat": ghat,
                                   "cols": cols})
        else:
            rows = []
            for s in range(n):
                idx = np.flatnonzero(mask[s])
                rows.append(_gathered_head_forward(x[s], idx, g[s, idx],
                                                   head.filters, stride, pad))
            y = np.stack(rows)
        head_out.append(y)

    out = channel_shuffle(np.concatenate(head_out, axis=1), cfg.heads)
    return DgcForward(out, saliencies, masks, gating, keep_sign, cache)


@dataclass
class DgcGrads:
    grad_input: np.ndarray
    grad_filters: list[np.ndarray]
    grad_w_squeeze: list[np.ndarray]
    grad_b_squeeze: list[np.ndarray]
    grad_w_expand: list[np.ndarray]
    grad_b_expand: list[np.ndarray]


def dgc_backward(fwd: DgcForward, layer: DgcLayer, grad_out: np.ndarray,
                 lasso_coeff: float = 0.0,
                 saliency_grad_extra: list[np.ndarray] | None = None) -> DgcGrads:
    """Backward pass with the masked-gradient rule.

    Selection indices are treated as constants: gradients flow through the
    multiplicative amplification and the saliency generator, while filter
    slices for channels no sample selected receive exactly zero gradient
    (their column of the masked input is exactly zero).

    lasso_coeff is the per-element L1 multiplier on the saliencies,
    already divided by (layers * heads * batch) by the caller.
    saliency_grad_extra, when given, holds one (N, C) array per head of
    additional loss gradient w.r.t. the saliencies (e.g. the angle
    enlargement loss).
    """
    if fwd._cache is None:
        raise ValueError("dgc_backward needs a training-mode forward cache")
    cfg = layer.config
    x = fwd._cache["x"]
    if grad_out.shape != fwd.output.shape:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match output "
                         f"{fwd.output.shape}")
    n = x.shape[0]
    k, stride, pad = cfg.kernel_size, cfg.stride, cfg.padding
    hw = x.shape[2] * x.shape[3]

    gy = channel_unshuffle(grad_out, cfg.heads)
    grad_x = np.zeros_like(x)
    grads = DgcGrads(grad_x, [], [], [], [], [])
    co = cfg.head_out_channels
    for i, (head, hc) in enumerate(zip(layer.heads, fwd._cache["heads"])):
        gy_h = gy[:, i * co:(i + 1) * co]
        gy_mat = gy_h.transpose(0, 2, 3, 1).reshape(-1, co)
        grad_filters = (gy_mat.T @ hc["cols"]).reshape(head.filters.shape)
        gcols = gy_mat @ head.filters.reshape(co, -1)
        gxg = col2im(gcols, x.shape, k, stride, pad)

        grad_x += gxg * hc["ghat"][:, :, None, None]
        gg = (gxg * x).sum(axis=(2, 3)) * hc["mask"]
        if lasso_coeff:
            gg = gg + lasso_coeff * np.sign(hc["g"])
        if saliency_grad_extra is not None:
            gg = gg + saliency_grad_extra[i]
        gz2 = gg if fwd.keep_sign else gg * (hc["z2"] > 0)
        ga1 = gz2 @ head.w_expand
        gz1 = ga1 * (hc["z1"] > 0)
        gp = gz1 @ head.w_squeeze
        grad_x += gp[:, :, None, None] / hw

        grads.grad_filters.append(grad_filters)
        grads.grad_w_expand.append(gz2.T @ hc["a1"])
        grads.grad_b_expand.append(gz2.sum(axis=0))
        grads.grad_w_squeeze.append(gz1.T @ hc["p"])
        grads.grad_b_squeeze.append(gz1.sum(axis=0))
    return grads


# ---------------------------------------------------------------------------
# Losses and baselines
# ---------------------------------------------------------------------------

def lasso_loss(saliencies: list[np.ndarray], coeff: float) -> float:
    """L1 sparsity penalty: coeff * mean over entries of batch-mean L1 norm.

    ``saliencies`` holds one array per (layer, head) pair, each (N, C) or
    (C,); the normalizer is the number of entries, i.e. layers * heads.
    """
    if not saliencies:
        raise ValueError("lasso_loss needs at least one saliency vector")
    total = 0.0
    for g in saliencies:
        g = np.atleast_2d(np.asarray(g, dtype=np.float64))
        total += float(np.abs(g).sum(axis=1).mean())
    return coeff * total / len(saliencies)


def sgc_forward(x: np.ndarray, weights: np.ndarray, groups: int,
                stride: int = 1, padding: int = 0) -> np.ndarray:
    """Standard group convolution: contiguous equal channel partitions.

    weights has shape (C_out, C_in // groups, k, k).
    """
    n, c, h, w = x.shape
    co = weights.shape[0]
    if c % groups != 0 or co % groups != 0:
        raise ValueError(f"channels ({c} in, {co} out) not divisible by "
                         f"{groups} groups")
    if weights.shape[1] != c // groups:
        raise ValueError(f"group filter expects {weights.shape[1]} in-channels per "
                         f"group, input provides {c // groups}")
    ci_g, co_g = c // groups, co // groups
    parts = []
    for g in range(groups):
        parts.append(conv2d_forward(
            x[:, g * ci_g:(g + 1) * ci_g],
            ConvFilter(weights[g * co_g:(g + 1) * co_g], stride, padding)))
    return np.concatenate(parts, axis=1)


def sgc_backward(x: np.ndarray, weights: np.ndarray, groups: int,
                 grad_out: np.ndarray, stride: int = 1,
                 padding: int = 0) -> tuple[np.ndarray, np.ndarray]:
    from .core import conv2d_backward

    c, co = x.shape[1], weights.shape[0]
    ci_g, co_g = c // groups, co // groups
    grad_x = np.zeros_like(x)
    grad_w = np.zeros_like(weights)
    for g in range(groups):
        gx, gw = conv2d_backward(
            x[:, g * ci_g:(g + 1) * ci_g],
            ConvFilter(weights[g * co_g:(g + 1) * co_g], stride, padding),
            grad_out[:, g * co_g:(g + 1) * co_g])
        grad_x[:, g * ci_g:(g + 1) * ci_g] = gx
        grad_w[g * co_g:(g + 1) * co_g] = gw
    return grad_x, grad_w
