"""Small learnable noise-prior estimator for sRGB images.

This is a toy stand-in for a full backbone: four stride-2 3x3 conv layers
with GELU, global average pooling, and two fully-connected layers giving
two logits. Logits are averaged over randomly sampled patches and squashed
by a logistic, so predictions always lie in [0, 1]^2.

The first conv sees six channels: the centred patch and its residual against
a 3x3 box blur, amplified. Noise lives almost entirely in that residual and
a freshly initialized conv stack cannot find it quickly from raw pixels.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from . import tensor as T
from .errors import DataEmpty, ImageTooSmall
from .image_io import ColorImage
from .nn import Conv2d, Linear, Module
from .noise_model import NoisePrior, add_noise, make_rng


RESIDUAL_GAIN = 10.0


def input_features(patches: np.ndarray) -> np.ndarray:
    """(N, 3, p, p) -> (N, 6, p, p): centred pixels plus amplified high-pass residual."""
    blur = uniform_filter(patches, size=(1, 1, 3, 3), mode="reflect")
    return np.concatenate([patches - 0.5, (patches - blur) * RESIDUAL_GAIN], axis=1)


@dataclass
class PriorNetConfig:
    patch_size: int = 32
    patches_per_image: int = 8
    conv_widths: tuple = (8, 16, 16, 32)
    fc_width: int = 32

    def __post_init__(self):
        self.conv_widths = tuple(self.conv_widths)


class PriorNet(Module):
    def __init__(self, config: PriorNetConfig):
        self.config = config
        widths = (6,) + config.conv_widths
        self.convs = [Conv2d(a, b, 3, stride=2) for a, b in zip(widths[:-1], widths[1:])]
        self.fc1 = Linear(widths[-1], config.fc_width)
        self.fc2 = Linear(config.fc_width, 2)

    def logits(self, patches):
        """(N, 3, p, p) patches -> (N, 2) logits."""
        x = T.as_tensor(input_features(np.asarray(patches, dtype=np.float64)))
        for conv in self.convs:
            x = T.gelu(conv(x))
        x = T.mean(x, axis=(2, 3))
        return self.fc2(T.gelu(self.fc1(x)))

    def __call__(self, patch_groups):
        """(B, P, 3, p, p) groups of patches -> (B, 2) priors in [0, 1]."""
        g = np.asarray(patch_groups)
        b, n = g.shape[:2]
        z = self.logits(g.reshape((b * n,) + g.shape[2:]))
        z = T.mean(T.reshape(z, (b, n, 2)), axis=1)
        return T.sigmoid(z)


def build_prior_net(config: PriorNetConfig | None = None, seed: int = 0) -> PriorNet:
    return PriorNet(config or PriorNetConfig()).finalize(seed)


def sample_patches(image: np.ndarray, config: PriorNetConfig, rng) -> np.ndarray:
    """Random ``patches_per_image`` crops, shape (P, 3, p, p)."""
    p = config.patch_size
    _, h, w = image.shape
    if h < p or w < p:
        raise ImageTooSmall(f"{w}x{h} image smaller than {p}x{p} patches")
    out = np.empty((config.patches_per_image, 3, p, p))
    for i in range(config.patches_per_image):
        top = int(rng.integers(h - p + 1))
        left = int(rng.integers(w - p + 1))
        out[i] = image[:, top:top + p, left:left + p]
    return out


def patch_locations(shape, config: PriorNetConfig, seed: int):
    """Top-left corners :func:`predict` would sample for an image of ``shape``."""
    rng = make_rng(seed)
    p = config.patch_size
    _, h, w = shape
    return [(int(rng.integers(h - p + 1)), int(rng.integers(w - p + 1)))
            for _ in range(config.patches_per_image)]


def predict(image: ColorImage, params: PriorNet, seed: int = 0) -> NoisePrior:
    data = image.data if isinstance(image, ColorImage) else np.asarray(image)
    patches = sample_patches(data, params.config, make_rng(seed))
    with T.no_grad():
        s, r = params(patches[None]).data[0]
    return NoisePrior(float(s), float(r))


# -- training -------------------------------------------------------------------

def make_prior_dataset(images, count: int, crop: int = 64, seed: int = 0, s_range=(0.0, 0.3),
                       r_range=(0.0, 50 / 255), clip: bool = True):
    """``count`` synthetic (noisy crop, true prior) pairs from the given clean images."""
    if not images:
        raise DataEmpty("no source images")
    rng = make_rng(seed)
    arrays = [im.data if isinstance(im, ColorImage) else np.asarray(im) for im in images]
    out = []
    for _ in range(count):
        img = arrays[int(rng.integers(len(arrays)))]
        top = int(rng.integers(img.shape[1] - crop + 1))
        left = int(rng.integers(img.shape[2] - crop + 1))
        clean = img[:, top:top + crop, left:left + crop]
        prior = NoisePrior(float(rng.uniform(*s_range)), float(rng.uniform(*r_range)))
        out.append((add_noise(clean, "poisson_gaussian", prior, rng, clip=clip), prior))
    return out


@dataclass
class PriorNetSchedule:
    steps: int = 1000
    batch_size: int = 16
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class PriorNetResult:
    model: PriorNet
    losses: list = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: Path | None = None


def train_prior_net(dataset, config: PriorNetConfig | None = None,
                    schedule: PriorNetSchedule | None = None, checkpoint=None,
                    model: PriorNet | None = None) -> PriorNetResult:
    """Minimise the L1 distance between predicted and target priors."""
    if not dataset:
        raise DataEmpty("empty prior-net training set")
    config = config or PriorNetConfig()
    schedule = schedule or PriorNetSchedule()
    model = model or build_prior_net(config, schedule.seed)
    opt = T.Adam(model.parameters(), lr=schedule.lr_max, weight_decay=schedule.weight_decay)
    rng = make_rng(schedule.seed + 1)
    losses = []
    t0 = time.perf_counter()
    for step in range(schedule.steps):
        idx = rng.integers(len(dataset), size=schedule.batch_size)
        groups = np.stack([sample_patches(np.asarray(getattr(dataset[i][0], "data", dataset[i][0])),
                                          config, rng) for i in idx])
        target = np.array([dataset[i][1].as_tuple() for i in idx])
        opt.zero_grad()
        loss = T.l1_loss(model(groups), target)
        loss.backward()
        opt.step(T.cosine_lr(step, schedule.steps, schedule.lr_max, schedule.lr_min))
        losses.append(loss.item())
    result = PriorNetResult(model, losses, time.perf_counter() - t0)
    if checkpoint is not None:
        extra = {"model": "prior_net", "config": asdict(config), "schedule": asdict(schedule)}
        result.checkpoint = T.save_checkpoint(model.state_dict(), checkpoint, extra)
        Path(str(checkpoint) + ".loss.json").write_text(json.dumps(losses))
    return result


def load_prior_net(path) -> PriorNet:
    manifest = T.load_manifest(path)
    model = build_prior_net(PriorNetConfig(**manifest["config"]))
    model.load_state(T.load_checkpoint(path))
    return model
