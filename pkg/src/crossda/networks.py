"""The three convolutional networks: style generator, patch discriminator,
and encoder-decoder segmenter.

All convolutions are 3x3. Encoders downsample with stride 2, decoders use
nearest-neighbor upsampling followed by a stride-1 convolution. Layouts are
NCHW throughout.
"""

import numpy as np

from . import autodiff as ad
from .optim import init_param

GEN_CHANNELS = (6, 32, 64, 128)
DISC_CHANNELS = (6, 32, 64, 128, 1)
SEG_CHANNELS = (6, 32, 64, 128, 256)
NUM_CLASSES = 8

STYLE_SIGMA_FLOOR = 0.01


def _conv_params(rng, cin, cout, name, params):
    fan_in = cin * 9
    params[f"{name}.w"] = init_param(rng, (cout, cin, 3, 3), fan_in)
    params[f"{name}.b"] = init_param(rng, (cout,), fan_in)


def init_generator(seed):
    rng = np.random.default_rng(seed)
    params = {}
    for i in range(3):
        _conv_params(rng, GEN_CHANNELS[i], GEN_CHANNELS[i + 1], f"enc{i}", params)
    dec = GEN_CHANNELS[::-1]  # 128 -> 64 -> 32 -> 6
    for i in range(3):
        _conv_params(rng, dec[i], dec[i + 1], f"dec{i}", params)
    # zero the final conv so the residual generator starts as tanh(identity)
    params["dec2.w"].data[:] = 0.0
    params["dec2.b"].data[:] = 0.0
    return params


def init_discriminator(seed):
    rng = np.random.default_rng(seed)
    params = {}
    for i in range(4):
        _conv_params(rng, DISC_CHANNELS[i], DISC_CHANNELS[i + 1], f"c{i}", params)
    return params


def init_segmenter(seed, num_classes=NUM_CLASSES):
    rng = np.random.default_rng(seed)
    params = {}
    for i in range(4):
        _conv_params(rng, SEG_CHANNELS[i], SEG_CHANNELS[i + 1], f"enc{i}", params)
    dec = SEG_CHANNELS[::-1][:4] + (num_classes,)  # 256->128->64->32->K
    for i in range(4):
        _conv_params(rng, dec[i], dec[i + 1], f"dec{i}", params)
    return params


def expand_style(style_mu, style_sigma, channels):
    """Tile per-band style stats across feature channels (band = c mod 6)."""
    mu = np.asarray(style_mu, np.float32)
    sigma = np.asarray(style_sigma, np.float32)
    idx = np.arange(channels) % len(mu)
    return mu[idx], np.maximum(sigma[idx], STYLE_SIGMA_FLOOR)


def generator_forward(params, x, style_mu, style_sigma, return_bottleneck=False):
    """Encode, re-style the bottleneck via AdaIN, decode; output in (-1, 1).

    The decoder produces a residual that is added to the input before the
    final Tanh, so the network starts near the identity and adversarial
    training learns the re-styling delta without discarding content.
    """
    h = x
    for i in range(3):
        h = ad.relu(ad.conv2d(h, params[f"enc{i}.w"], params[f"enc{i}.b"],
                              stride=2, padding=1))
    mu_c, sigma_c = expand_style(style_mu, style_sigma, h.data.shape[1])
    h = ad.adain_apply(h, mu_c, sigma_c)
    bottleneck = h
    for i in range(3):
        h = ad.upsample2x(h)
        h = ad.conv2d(h, params[f"dec{i}.w"], params[f"dec{i}.b"], stride=1, padding=1)
        if i < 2:
            h = ad.relu(h)
    out = ad.tanh(ad.add(h, x))
    if return_bottleneck:
        return out, bottleneck
    return out


def discriminator_forward(params, x):
    """Patch score map in (0, 1)."""
    h = x
    for i in range(4):
        h = ad.conv2d(h, params[f"c{i}.w"], params[f"c{i}.b"], stride=2, padding=1)
        h = ad.sigmoid(h) if i == 3 else ad.leaky_relu(h)
    return h


def segmenter_forward(params, x, num_classes=NUM_CLASSES):
    """Per-pixel class logits (N, K, H, W) for a 6-band input."""
    h = x
    for i in range(4):
        h = ad.relu(ad.conv2d(h, params[f"enc{i}.w"], params[f"enc{i}.b"],
                              stride=2, padding=1))
    for i in range(4):
        h = ad.upsample2x(h)
        h = ad.conv2d(h, params[f"dec{i}.w"], params[f"dec{i}.b"], stride=1, padding=1)
        if i < 3:
            h = ad.relu(h)
    return h
