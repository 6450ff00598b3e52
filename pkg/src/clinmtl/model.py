"""Shared-encoder multitask network: segmentation decoder + grading head.

Desk-scale U-Net-style encoder/decoder (channels 8/16/32/64, stride-2
downsampling) with a classification head on the bottleneck. The embedding
h splits into a 13-d clinically supervised block and a free deep block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .features import N_FEATURES

CHANNELS = (8, 16, 32, 64)
NUM_CLASSES = 5
EMBED_DIM = 64
CLINICAL_DIM = N_FEATURES  # 13
DOWNSAMPLE = 16  # total spatial reduction of the encoder

ENCODER_PREFIXES = ("enc", "bott")
DECODER_PREFIXES = ("dec", "seg_out")
HEAD_PREFIXES = ("fc", "cls")


class ModelError(Exception):
    pass


@dataclass
class ModelState:
    """All learnable parameters plus clinical-target standardization stats."""

    params: dict[str, Tensor]
    feat_mean: np.ndarray = field(default_factory=lambda: np.zeros(CLINICAL_DIM))
    feat_std: np.ndarray = field(default_factory=lambda: np.ones(CLINICAL_DIM))

    def param_names(self, prefixes=None) -> list[str]:
        names = sorted(self.params)
        if prefixes is None:
            return names
        return [n for n in names if n.startswith(tuple(prefixes))]

    def tensors(self, prefixes=None) -> list[Tensor]:
        return [self.params[n] for n in self.param_names(prefixes)]

    def check_finite(self):
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.data)):
                raise ModelError(f"parameter {name} is non-finite")


@dataclass
class ForwardOutputs:
    seg: Tensor      # (B, H, W) in [0, 1]
    logits: Tensor   # (B, C)
    h: Tensor        # (B, K)
    hooks: dict[str, Tensor]  # named representations for gradient probes

    @property
    def h_tirads(self) -> Tensor:
        return ad.narrow(self.h, 1, 0, CLINICAL_DIM)


def _conv_shapes() -> list[tuple[str, int, int]]:
    shapes = []
    cin = 1
    for i, c in enumerate(CHANNELS, start=1):
        shapes.append((f"enc{i}a", cin, c))
        shapes.append((f"enc{i}b", c, c))
        cin = c
    shapes.append(("bott", CHANNELS[-1], CHANNELS[-1]))
    # decoder input = upsampled channels + skip channels
    dec_out = (32, 16, 8, 8)
    up_in = CHANNELS[-1]
    for i, skip, out in zip((4, 3, 2, 1), reversed(CHANNELS), dec_out):
        shapes.append((f"dec{i}", up_in + skip, out))
        up_in = out
    shapes.append(("seg_out", dec_out[-1], 1))
    return shapes


def init_params(seed: int) -> ModelState:
    """Fan-in-scaled uniform initialization, deterministic per seed."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def uniform(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    for name, cin, cout in _conv_shapes():
        params[f"{name}_w"] = uniform((cout, cin, 3, 3), cin * 9)
        params[f"{name}_b"] = Tensor(np.zeros(cout), requires_grad=True)
    params["fc1_w"] = uniform((EMBED_DIM, CHANNELS[-1]), CHANNELS[-1])
    params["fc1_b"] = Tensor(np.zeros(EMBED_DIM), requires_grad=True)
    params["fc2_w"] = uniform((EMBED_DIM, EMBED_DIM), EMBED_DIM)
    params["fc2_b"] = Tensor(np.zeros(EMBED_DIM), requires_grad=True)
    params["cls_W"] = uniform((NUM_CLASSES, EMBED_DIM), EMBED_DIM)
    params["cls_b"] = Tensor(np.zeros(NUM_CLASSES), requires_grad=True)
    return ModelState(params=params)


def _conv(p: dict[str, Tensor], name: str, x: Tensor, stride: int = 1) -> Tensor:
    return ad.conv2d(x, p[f"{name}_w"], p[f"{name}_b"], stride=stride, pad=1)


def forward(state: ModelState, x) -> ForwardOutputs:
    """Run the network on a (B, 1, H, W) batch; H, W divisible by 16."""
    x = ad.ensure(x)
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ModelError(f"expected (B, 1, H, W) input, got {x.shape}")
    B, _, H, W = x.shape
    if H % DOWNSAMPLE or W % DOWNSAMPLE:
        raise ModelError(f"spatial dims must be divisible by {DOWNSAMPLE}, got {H}x{W}")

    p = state.params
    e1 = ad.relu(_conv(p, "enc1a", x))                # B,8,H,W
    d1 = ad.relu(_conv(p, "enc1b", e1, stride=2))     # B,8,H/2
    e2 = ad.relu(_conv(p, "enc2a", d1))               # B,16,H/2
    d2 = ad.relu(_conv(p, "enc2b", e2, stride=2))     # B,16,H/4
    e3 = ad.relu(_conv(p, "enc3a", d2))               # B,32,H/4
    d3 = ad.relu(_conv(p, "enc3b", e3, stride=2))     # B,32,H/8
    e4 = ad.relu(_conv(p, "enc4a", d3))               # B,64,H/8
    d4 = ad.relu(_conv(p, "enc4b", e4, stride=2))     # B,64,H/16
    z = ad.relu(_conv(p, "bott", d4))                 # bottleneck

    u4 = ad.relu(_conv(p, "dec4", ad.concat([ad.upsample_nn(z, 2), e4], axis=1)))
    u3 = ad.relu(_conv(p, "dec3", ad.concat([ad.upsample_nn(u4, 2), e3], axis=1)))
    u2 = ad.relu(_conv(p, "dec2", ad.concat([ad.upsample_nn(u3, 2), e2], axis=1)))
    u1 = ad.relu(_conv(p, "dec1", ad.concat([ad.upsample_nn(u2, 2), e1], axis=1)))
    seg = ad.reshape(ad.sigmoid(_conv(p, "seg_out", u1)), (B, H, W))

    pooled = ad.global_avg_pool(z)                              # B,64
    hid = ad.relu(ad.add(ad.matmul(pooled, ad.transpose(p["fc1_w"])),
                         ad.reshape(p["fc1_b"], (1, EMBED_DIM))))
    h = ad.add(ad.matmul(hid, ad.transpose(p["fc2_w"])),
               ad.reshape(p["fc2_b"], (1, EMBED_DIM)))          # B,K
    logits = ad.add(ad.matmul(h, ad.transpose(p["cls_W"])),
                    ad.reshape(p["cls_b"], (1, NUM_CLASSES)))   # B,C

    hooks = {"bottleneck": z, "last_encoder": d4, "enc3": d3, "mid_encoder": d2}
    return ForwardOutputs(seg=seg, logits=logits, h=h, hooks=hooks)


def classify(state: ModelState, images: np.ndarray) -> np.ndarray:
    """Inference-time classification from images only (no masks accepted)."""
    out = forward(state, images)
    return out.logits.data


# ---------------------------------------------------------------------------
# losses

DICE_SMOOTH = 1.0


def dice_loss(seg: Tensor, masks: np.ndarray) -> Tensor:
    """Smoothed soft-Dice loss, averaged over the batch."""
    m = ad.ensure(np.asarray(masks, dtype=np.float64))
    if seg.shape != m.shape:
        raise ModelError(f"seg shape {seg.shape} != mask shape {m.shape}")
    inter = ad.sum_per_sample(ad.mul(seg, m))
    denom = ad.add(ad.sum_per_sample(seg), ad.sum_per_sample(m))
    dice = ad.div(ad.add(ad.mul(inter, 2.0), DICE_SMOOTH), ad.add(denom, DICE_SMOOTH))
    return ad.sub(1.0, ad.mean(dice))


def weighted_ce(logits: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weight-normalized weighted cross-entropy over 0-based labels."""
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    B, C = logits.shape
    if weights.shape != (C,) or np.any(weights <= 0):
        raise ModelError(f"need {C} positive class weights")
    if labels.min() < 0 or labels.max() >= C:
        raise ModelError(f"label out of range 0..{C - 1}: {labels}")
    onehot = np.zeros((B, C))
    onehot[np.arange(B), labels] = 1.0
    lsm = ad.log_softmax(logits, axis=1)
    nll = ad.neg(ad.sum_axes(ad.mul(lsm, Tensor(onehot)), (1,)))  # (B,)
    w = weights[labels]
    return ad.mul(ad.tsum(ad.mul(nll, Tensor(w))), 1.0 / w.sum())


def clin_loss(h_tirads: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over the batch of squared L2 distance to the standardized targets."""
    t = ad.ensure(np.asarray(targets, dtype=np.float64))
    if h_tirads.shape != t.shape:
        raise ModelError(f"embedding shape {h_tirads.shape} != target shape {t.shape}")
    return ad.mean_axes(ad.sum_axes(ad.square(ad.sub(h_tirads, t)), (1,)), (0,))
