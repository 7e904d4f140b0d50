"""Prior-conditioned channel attention and the micro encoder/decoder denoiser.

Layout conventions: feature maps are NCHW Tensors; a noise prior enters a
model as a ``(B, 2)`` array of ``(sigma_s, sigma_r)`` rows.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DataEmpty, NotDivisible, ShapeMismatch
from .image_io import ColorImage
from .nn import Conv1x1, Conv2d, DepthwiseConv3x3, LayerNorm, Linear, Module, uniform_fan_in, zeros
from .noise_model import NoisePrior, add_noise, make_rng
from .tensor import Parameter


@dataclass
class CondformerConfig:
    base_channels: int = 8
    levels: int = 3
    latent_blocks: int = 2
    k: int = 8
    ffn_expansion: int = 2
    heads: int = 1
    conditional: bool = True

    @property
    def latent_channels(self) -> int:
        return self.base_channels * 2 ** self.levels


def prior_rows(prior, batch: int | None = None) -> np.ndarray:
    """Coerce a NoisePrior, pair, or (B, 2) array into a (B, 2) array."""
    if isinstance(prior, NoisePrior):
        prior = prior.as_tuple()
    arr = np.atleast_2d(np.asarray(prior, dtype=np.float64))
    if arr.shape[-1] != 2:
        raise ShapeMismatch(f"prior rows must have 2 columns, got {arr.shape}")
    if batch is not None and arr.shape[0] == 1 and batch > 1:
        arr = np.repeat(arr, batch, axis=0)
    return arr


def repeat_prior(prior, k: int) -> np.ndarray:
    """``(sigma_s,)*k + (sigma_r,)*k`` per row: shape (B, 2k)."""
    return np.repeat(prior_rows(prior), k, axis=1)


class EmbedFC(Module):
    """Two affine layers with a GELU between, 2k -> 2k."""

    def __init__(self, k: int):
        self.fc1 = Linear(2 * k, 2 * k)
        self.fc2 = Linear(2 * k, 2 * k)

    def __call__(self, base):
        return self.fc2(T.gelu(self.fc1(base)))


def embed_prior(prior, k: int, embed_fc: EmbedFC | None = None) -> T.Tensor:
    """Conditional embedding vector(s), shape (B, 2k). ``embed_fc=None`` is the identity."""
    if k < 1:
        raise ValueError("k must be >= 1")
    base = T.Tensor(repeat_prior(prior, k))
    return base if embed_fc is None else embed_fc(base)


def _lfm_pointwise_init(channels: int, k: int):
    # [I_c | small random]: the feature path starts as the identity
    z_init = uniform_fan_in(channels + 2 * k)

    def init(rng, shape):
        w = np.zeros(shape)
        w[:, :channels] = np.eye(channels)
        w[:, channels:] = z_init(rng, (channels, 2 * k))
        return w
    return init


def _identity_kernel(rng, shape):
    w = np.zeros(shape)
    w[:, 1, 1] = 1.0
    return w


class LFM(Module):
    """Channel-concat of features and broadcast embedding, then 1x1 and depthwise 3x3.

    Initialised so that ``lfm(x, 0) == x``: a zero embedding leaves the
    attention path exactly as in an unconditional block.
    """

    def __init__(self, channels: int, k: int):
        self.k = k
        self.pw = Conv1x1(channels + 2 * k, channels, bias=False)
        self.pw.weight.init = _lfm_pointwise_init(channels, k)
        self.dw = DepthwiseConv3x3(channels, bias=False)
        self.dw.weight.init = _identity_kernel

    def __call__(self, x, z):
        return lfm(x, z, self)


def lfm(x, z, params: LFM) -> T.Tensor:
    x, z = T.as_tensor(x), T.as_tensor(z)
    b, c, h, w = x.shape
    if z.ndim == 1:
        z = T.reshape(z, (1, -1))
    if z.shape[-1] != 2 * params.k:
        raise ShapeMismatch(f"embedding length {z.shape[-1]} != 2k = {2 * params.k}")
    if z.shape[0] != b:
        z = T.broadcast_to(z, (b, z.shape[-1]))
    zmap = T.broadcast_to(T.reshape(z, (b, -1, 1, 1)), (b, z.shape[-1], h, w))
    return params.dw(params.pw(T.concat([x, zmap], axis=1)))


def channel_attention(q, k, v, alpha):
    """``softmax(q @ k^T / alpha) @ v`` over the channel axis.

    q, k, v: (..., c, hw). ``alpha`` broadcasts against the (..., c, c)
    logits. Returns the output and the attention matrix.
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if not (q.shape == k.shape and q.shape[:-1] == v.shape[:-1] and q.shape[-1] == v.shape[-1]):
        raise ShapeMismatch(f"attention shapes q{q.shape} k{k.shape} v{v.shape}")
    logits = T.div(T.matmul(q, T.swap_last(k)), alpha)
    attn = T.softmax(logits, axis=-1)
    return T.matmul(attn, v), attn


class Attention(Module):
    """Channel self-attention; with ``k`` set, Q and K pass through an LFM each."""

    def __init__(self, channels: int, heads: int = 1, k: int | None = None):
        if channels % heads:
            raise ShapeMismatch(f"{channels} channels not divisible into {heads} heads")
        self.heads = heads
        self.q = Conv1x1(channels, channels, bias=False)
        self.q_dw = DepthwiseConv3x3(channels, bias=False)
        self.k = Conv1x1(channels, channels, bias=False)
        self.k_dw = DepthwiseConv3x3(channels, bias=False)
        self.v = Conv1x1(channels, channels, bias=False)
        self.v_dw = DepthwiseConv3x3(channels, bias=False)
        self.proj = Conv1x1(channels, channels, bias=False)
        # alpha = exp(log_alpha) stays positive; starts at 1
        self.log_alpha = Parameter(np.zeros(heads), init=zeros)
        if k is not None:
            self.lfm_q = LFM(channels, k)
            self.lfm_k = LFM(channels, k)
        self.last_attention = None

    def alpha(self):
        return T.exp(self.log_alpha)

    def __call__(self, x, z=None):
        b, c, h, w = x.shape
        q = self.q_dw(self.q(x))
        k = self.k_dw(self.k(x))
        v = self.v_dw(self.v(x))
        if z is not None:
            q = self.lfm_q(q, z)
            k = self.lfm_k(k, z)
        split = (b, self.heads, c // self.heads, h * w)
        q = T.l2_normalize(T.reshape(q, split), axis=-1)
        k = T.l2_normalize(T.reshape(k, split), axis=-1)
        v = T.reshape(v, split)
        alpha = T.reshape(self.alpha(), (1, self.heads, 1, 1))
        out, attn = channel_attention(q, k, v, alpha)
        self.last_attention = attn.data
        return self.proj(T.reshape(out, (b, c, h, w)))


class FFN(Module):
    def __init__(self, channels: int, expansion: int = 2):
        self.expand = Conv1x1(channels, expansion * channels, bias=False)
        self.project = Conv1x1(expansion * channels, channels, bias=False)

    def __call__(self, x):
        return self.project(T.gelu(self.expand(x)))


class TransformerBlock(Module):
    """Pre-norm channel-attention block with an FFN, both residual."""

    def __init__(self, channels: int, heads: int = 1, expansion: int = 2, k: int | None = None):
        self.norm1 = LayerNorm(channels)
        self.attn = Attention(channels, heads, k)
        self.norm2 = LayerNorm(channels)
        self.ffn = FFN(channels, expansion)

    def __call__(self, x, z=None):
        y = T.add(x, self.attn(self.norm1(x), z))
        return T.add(y, self.ffn(self.norm2(y)))


class CondSABlock(Module):
    """Transformer block whose Q/K are fused with a block-specific prior embedding."""

    def __init__(self, channels: int, k: int, heads: int = 1, expansion: int = 2):
        self.k = k
        self.embed = EmbedFC(k)
        self.block = TransformerBlock(channels, heads, expansion, k=k)

    def __call__(self, x, prior):
        z = embed_prior(prior, self.k, self.embed)
        return self.block(x, z)


def condsa_block(x, prior, params: CondSABlock) -> T.Tensor:
    x = T.as_tensor(x)
    if x.ndim == 3:
        return T.reshape(params(T.reshape(x, (1,) + x.shape), prior), x.shape)
    return params(x, prior)


class Downsample(Module):
    """Space-to-depth then 1x1 conv: (C, H, W) -> (2C, H/2, W/2)."""

    def __init__(self, channels: int):
        self.conv = Conv1x1(4 * channels, 2 * channels, bias=False)

    def __call__(self, x):
        return self.conv(T.pixel_unshuffle(x, 2))


class Upsample(Module):
    """1x1 conv then depth-to-space: (C, H, W) -> (C/2, 2H, 2W)."""

    def __init__(self, channels: int):
        self.conv = Conv1x1(channels, 2 * channels, bias=False)

    def __call__(self, x):
        return T.pixel_shuffle(self.conv(x), 2)


class Condformer(Module):
    """Encoder / latent / decoder denoiser predicting a residual.

    The prior only enters the latent stack. With ``conditional=False`` the
    latent blocks are plain transformer blocks and the prior is ignored.
    Conditional latent blocks carry the same parameter names plus their LFMs
    and a per-block ``latent_embed``, so both variants share an initialisation.
    """

    def __init__(self, config: CondformerConfig):
        self.config = config
        c, e, hd = config.base_channels, config.ffn_expansion, config.heads
        self.embed = Conv2d(3, c, 3)
        self.enc = [TransformerBlock(c * 2 ** l, hd, e) for l in range(config.levels)]
        self.down = [Downsample(c * 2 ** l) for l in range(config.levels)]
        lc = config.latent_channels
        k = config.k if config.conditional else None
        self.latent = [TransformerBlock(lc, hd, e, k=k) for _ in range(config.latent_blocks)]
        if config.conditional:
            self.latent_embed = [EmbedFC(config.k) for _ in range(config.latent_blocks)]
        self.up = [Upsample(c * 2 ** (l + 1)) for l in range(config.levels)]
        self.fuse = [Conv1x1(2 * c * 2 ** l, c * 2 ** l, bias=False) for l in range(config.levels)]
        self.dec = [TransformerBlock(c * 2 ** l, hd, e) for l in range(config.levels)]
        self.out = Conv2d(c, 3, 3)

    def __call__(self, img, prior=None):
        img = T.as_tensor(img)
        b, _, h, w = img.shape
        step = 2 ** self.config.levels
        if h % step or w % step:
            raise NotDivisible(f"{h}x{w} input not divisible by {step}")
        x = self.embed(img)
        skips = []
        for block, down in zip(self.enc, self.down):
            x = block(x)
            skips.append(x)
            x = down(x)
        if self.config.conditional:
            rows = prior_rows(np.zeros(2) if prior is None else prior, b)
            for block, fc in zip(self.latent, self.latent_embed):
                x = block(x, embed_prior(rows, self.config.k, fc))
        else:
            for block in self.latent:
                x = block(x)
        for l in reversed(range(self.config.levels)):
            x = self.up[l](x)
            x = self.fuse[l](T.concat([x, skips[l]], axis=1))
            x = self.dec[l](x)
        return T.add(img, self.out(x))


def build_model(config: CondformerConfig, seed: int = 0) -> Condformer:
    return Condformer(config).finalize(seed)


def micro_condformer(image: ColorImage, prior, config: CondformerConfig | None = None,
                     params: Condformer | None = None) -> ColorImage:
    """Denoise one image; output clamped to [0, 1]."""
    model = params if params is not None else build_model(config or CondformerConfig())
    with T.no_grad():
        out = model(image.data[None], prior).data[0]
    return ColorImage(np.clip(out, 0.0, 1.0), image.bit_depth)


def denoise_batch(model: Condformer, noisy: np.ndarray, prior) -> np.ndarray:
    with T.no_grad():
        return np.clip(model(noisy, prior).data, 0.0, 1.0)


# -- training -------------------------------------------------------------------

@dataclass
class TrainSchedule:
    steps: int = 2000
    batch_size: int = 8
    patch_size: int = 32
    lr_max: float = 2e-3
    lr_min: float = 1e-6
    weight_decay: float = 0.0
    seed: int = 0
    prior_mode: str = "true"  # "true" or "zero": what the model is told
    log_every: int = 1


class PatchDataset:
    """Random noisy/clean crops with per-sample priors, reproducible by seed.

    Priors are uniform over ``[0, s_max] x [0, r_max]``; noise is the
    heteroscedastic Gaussian model, clipped to [0, 1] unless ``clip`` is off.
    """

    def __init__(self, images, patch_size=32, s_max=0.3, r_max=50 / 255, clip=True,
                 kind="poisson_gaussian", fixed_prior=None, augment=True):
        self.images = [im.data if isinstance(im, ColorImage) else np.asarray(im) for im in images]
        if not self.images:
            raise DataEmpty("no training images")
        self.patch_size = patch_size
        self.s_max, self.r_max = s_max, r_max
        self.clip, self.kind = clip, kind
        self.fixed_prior = fixed_prior
        self.augment = augment

    def batch(self, rng, size):
        p = self.patch_size
        noisy, clean, priors = [], [], []
        for _ in range(size):
            img = self.images[int(rng.integers(len(self.images)))]
            top = int(rng.integers(img.shape[1] - p + 1))
            left = int(rng.integers(img.shape[2] - p + 1))
            crop = img[:, top:top + p, left:left + p]
            if self.augment:
                crop = np.rot90(crop, int(rng.integers(4)), axes=(1, 2))
                if rng.integers(2):
                    crop = crop[:, :, ::-1]
            crop = np.ascontiguousarray(crop)
            if self.fixed_prior is not None:
                prior = NoisePrior(*self.fixed_prior)
            else:
                prior = NoisePrior(float(rng.uniform(0, self.s_max)), float(rng.uniform(0, self.r_max)))
            noisy.append(add_noise(crop, self.kind, prior, rng, clip=self.clip))
            clean.append(crop)
            priors.append(prior.as_tuple())
        return np.stack(noisy), np.stack(clean), np.array(priors)


def make_eval_set(images, crop=128, per_image=3, seed=0, s_max=0.3, r_max=50 / 255, clip=True):
    """Fixed held-out triples (noisy, clean, prior) at mixed noise levels."""
    rng = make_rng(seed)
    out = []
    for img in images:
        data = img.data if isinstance(img, ColorImage) else np.asarray(img)
        for _ in range(per_image):
            top = int(rng.integers(data.shape[1] - crop + 1))
            left = int(rng.integers(data.shape[2] - crop + 1))
            clean = np.ascontiguousarray(data[:, top:top + crop, left:left + crop])
            prior = NoisePrior(float(rng.uniform(0, s_max)), float(rng.uniform(0, r_max)))
            noisy = add_noise(clean, "poisson_gaussian", prior, rng, clip=clip)
            out.append((noisy, clean, prior))
    return out


@dataclass
class TrainResult:
    model: Condformer
    losses: list = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: Path | None = None


def _model_prior(priors, mode):
    if mode == "zero":
        return np.zeros_like(priors)
    return priors


def train_denoiser(dataset: PatchDataset, config: CondformerConfig, schedule: TrainSchedule,
                   checkpoint: str | Path | None = None, model: Condformer | None = None,
                   progress=None) -> TrainResult:
    """Minimise mean L1 with Adam under a cosine learning-rate schedule."""
    if not dataset.images:
        raise DataEmpty("no training images")
    model = model or build_model(config, schedule.seed)
    opt = T.Adam(model.parameters(), lr=schedule.lr_max, weight_decay=schedule.weight_decay)
    rng = make_rng(schedule.seed + 1)
    losses = []
    t0 = time.perf_counter()
    for step in range(schedule.steps):
        noisy, clean, priors = dataset.batch(rng, schedule.batch_size)
        opt.zero_grad()
        pred = model(noisy, _model_prior(priors, schedule.prior_mode))
        loss = T.l1_loss(pred, clean)
        loss.backward()
        opt.step(T.cosine_lr(step, schedule.steps, schedule.lr_max, schedule.lr_min))
        losses.append(loss.item())
        if progress is not None and (step + 1) % max(schedule.log_every, 1) == 0:
            progress(step + 1, losses[-1])
    result = TrainResult(model, losses, time.perf_counter() - t0)
    if checkpoint is not None:
        result.checkpoint = save_model(model, checkpoint, schedule=schedule, losses=losses)
    return result


def save_model(model: Condformer, path, schedule: TrainSchedule | None = None, losses=None) -> Path:
    extra = {"model": "condformer", "config": asdict(model.config)}
    if schedule is not None:
        extra["schedule"] = asdict(schedule)
    path = T.save_checkpoint(model.state_dict(), path, extra)
    if losses is not None:
        Path(str(path) + ".loss.json").write_text(json.dumps(losses))
    return path


def load_model(path) -> Condformer:
    manifest = T.load_manifest(path)
    model = build_model(CondformerConfig(**manifest["config"]))
    model.load_state(T.load_checkpoint(path))
    return model


def evaluate(model: Condformer, eval_set, prior_mode="true", prior_fn=None):
    """PSNR (dB) per eval item. ``prior_fn(noisy)`` overrides the prior source."""
    from .harness import psnr_arrays

    scores = []
    for noisy, clean, prior in eval_set:
        if prior_fn is not None:
            p = prior_fn(noisy)
        elif prior_mode == "zero":
            p = (0.0, 0.0)
        else:
            p = prior.as_tuple()
        out = denoise_batch(model, noisy[None], p)[0]
        scores.append(psnr_arrays(out, clean))
    return scores
