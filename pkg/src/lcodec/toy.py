"""Hand-built toy models and synthetic corpora.

No trained weights ship with the codec, so tests and demos use a small
auto-encoder whose weights are written down directly: the encoder
averages 2x2 blocks of each colour plane four times, then mixes the
colours into ``s`` latent channels; the decoder inverts the colour mix
(pseudo-inverse), upsamples three times by replication and once
bilinearly.  It has the reference topology (4 conv + ReLU, 4 deconv +
ReLU, 5x5 kernels, stride 2), only narrower.  The non-zero taps are
placed so that zero padding never reaches the encoder and touches only
the outermost pixel ring of the decoder output.
"""

from __future__ import annotations

import numpy as np

from lcodec.integerize import FloatLayer, FloatModel, float_forward, integerize, select_shifts
from lcodec.nn import CONV, DECODER, DECONV, ENCODER, RELU, LayerSpec, ModelGraph
from lcodec.qtensor import round_half_away

_BOX = np.array([0.0, 0.0, 1.0, 1.0, 0.0])
_BILINEAR = np.array([0.0, 0.25, 0.75, 0.75, 0.25])
# taps 2, 3 of a stride-2 conv read x[2y], x[2y+1]
LOWPASS = np.outer(_BOX, _BOX) / 4.0
# transposed stride-2: taps 2, 3 write out[2y], out[2y+1]
REPLICATE = np.outer(_BOX, _BOX)
BILINEAR = np.outer(_BILINEAR, _BILINEAR)

_BASE_MIX = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [-0.25, -0.25, 0.5],
        [0.5, -0.25, -0.25],
        [0.5, 0.5, -1.0],
        [-0.5, 1.0, -0.5],
        [1.0, -1.0, 0.0],
    ]
)


def colour_mix(latent_channels: int, gain: float, rng=None) -> np.ndarray:
    """``(s, 3)`` matrix mapping RGB in [0, 1] to latent units."""
    rows = [_BASE_MIX[k % len(_BASE_MIX)] * (1.0 if k < 3 else 0.5) for k in range(latent_channels)]
    mix = np.array(rows) * gain
    if rng is not None and latent_channels > 3:
        mix[3:] *= rng.uniform(0.6, 1.2, size=(latent_channels - 3, 1))
    return mix


def _diag(kernel: np.ndarray, c: int) -> np.ndarray:
    w = np.zeros((c, c, 5, 5))
    for i in range(c):
        w[i, i] = kernel
    return w


def toy_float_models(latent_channels: int = 4, gain: float = 24.0, seed: int | None = None,
                     jitter: float = 0.0) -> tuple[FloatModel, FloatModel]:
    """Float encoder and decoder of the toy auto-encoder.

    ``jitter`` adds seeded relative noise to every weight, giving a family
    of distinct but well-behaved models.
    """
    rng = np.random.default_rng(seed)

    def noisy(w):
        if jitter == 0:
            return w
        return w * (1.0 + jitter * rng.standard_normal(w.shape))

    mix = colour_mix(latent_channels, gain, rng if seed is not None else None)
    enc = []
    for _ in range(3):
        enc += [FloatLayer(CONV, 3, 3, 5, 2, noisy(_diag(LOWPASS, 3)), np.zeros(3)), FloatLayer(RELU)]
    w_lat = mix[:, :, None, None] * LOWPASS[None, None]
    enc.append(FloatLayer(CONV, 3, latent_channels, 5, 2, noisy(w_lat), -0.5 * mix.sum(axis=1)))

    unmix = np.linalg.pinv(mix)  # (3, s)
    dec = [FloatLayer(DECONV, latent_channels, 3, 5, 2, noisy(unmix[:, :, None, None] * REPLICATE[None, None]),
                      np.full(3, 0.5))]
    for kernel in (REPLICATE, REPLICATE, BILINEAR):
        dec += [FloatLayer(RELU), FloatLayer(DECONV, 3, 3, 5, 2, noisy(_diag(kernel, 3)), np.zeros(3))]
    return FloatModel(tuple(enc), ENCODER, 8), FloatModel(tuple(dec), DECODER, 0)


def images_to_batch(images) -> np.ndarray:
    return np.stack([np.asarray(im, dtype=np.float64).transpose(2, 0, 1) / 255.0 for im in images])


def toy_codec(latent_channels: int = 4, gain: float = 24.0, seed: int | None = None, jitter: float = 0.0,
              calib_images=None) -> tuple[ModelGraph, ModelGraph]:
    """Integerized toy encoder/decoder, calibrated on ``calib_images``."""
    fenc, fdec = toy_float_models(latent_channels, gain, seed, jitter)
    if calib_images is None:
        rng = np.random.default_rng(0 if seed is None else seed)
        calib_images = [synthetic_image(64, 64, rng) for _ in range(16)]
    x = images_to_batch(calib_images)
    enc = integerize(fenc, select_shifts(fenc, list(x)))
    lat = round_half_away(float_forward(fenc, x))
    dec = integerize(fdec, select_shifts(fdec, list(lat)))
    return enc, dec


def synthetic_image(h: int, w: int, rng) -> np.ndarray:
    """Smooth random colour field with a couple of sharp edges, uint8 ``(h, w, 3)``."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((h, w, 3))
    for c in range(3):
        acc = np.full((h, w), rng.uniform(0.3, 0.7))
        for _ in range(4):
            fy, fx = rng.uniform(0, 3.0, size=2) / max(h, w)
            ph = rng.uniform(0, 2 * np.pi)
            acc += rng.uniform(0.05, 0.2) * np.cos(2 * np.pi * (fy * yy + fx * xx) + ph)
        img[..., c] = acc
    for _ in range(2):
        y0, x0 = rng.integers(0, h), rng.integers(0, w)
        y1, x1 = y0 + rng.integers(h // 8, h // 2 + 1), x0 + rng.integers(w // 8, w // 2 + 1)
        img[y0:y1, x0:x1] += rng.uniform(-0.25, 0.25, size=3)
    img += rng.normal(0, 0.01, size=img.shape)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def _ar_field(h: int, w: int, rho: float, rng) -> np.ndarray:
    """Unit-variance separable 2-D first-order Gauss-Markov field."""
    e = rng.standard_normal((h, w))
    a = np.sqrt(1 - rho * rho)
    z = np.empty((h, w))
    z[0] = e[0]
    for i in range(1, h):
        z[i] = rho * z[i - 1] + a * e[i]
    out = np.empty((h, w))
    out[:, 0] = z[:, 0]
    for j in range(1, w):
        out[:, j] = rho * out[:, j - 1] + a * z[:, j]
    return out


def gauss_markov_latents(n: int, s: int, h: int, w: int, rho_spatial: float = 0.85, rho_channel: float = 0.8,
                         seed: int = 0, deadzone: float = 0.6, shuffle: bool = True) -> list[np.ndarray]:
    """Synthetic integer latents with spatial and inter-channel correlation.

    Channel ``k`` is a Gauss-Markov field mixed with channel ``k-1`` (before
    an optional fixed random permutation of the channel axis), scaled per
    channel and quantized with a dead zone so most values are 0.
    """
    rng = np.random.default_rng(seed)
    scales = rng.uniform(1.0, 3.0, size=s)
    perm = rng.permutation(s) if shuffle else np.arange(s)
    b = np.sqrt(1 - rho_channel**2)
    out = []
    for _ in range(n):
        u = np.empty((s, h, w))
        u[0] = _ar_field(h, w, rho_spatial, rng)
        for k in range(1, s):
            u[k] = rho_channel * u[k - 1] + b * _ar_field(h, w, rho_spatial, rng)
        v = u * scales[:, None, None]
        q = np.sign(v) * np.floor(np.maximum(np.abs(v) - deadzone, 0) + 0.5)
        out.append(q[perm].astype(np.int64))
    return out


def reference_decoder(latent_channels: int = 128, hidden: int = 128, seed: int = 0) -> ModelGraph:
    """Random integer decoder with the reference geometry (4 x deconv 5x5/2).

    Weights are scaled by fan-in so activations neither vanish nor
    saturate, and the last layer is biased to mid-grey.
    """
    rng = np.random.default_rng(seed)
    layers = []
    chans = [latent_channels, hidden, hidden, hidden, 3]
    w_shift, act_shift = 12, 8
    for idx in range(4):
        cin, cout = chans[idx], chans[idx + 1]
        fan_in = cin * 25 / 4  # a stride-2 deconv output sees about a quarter of the taps
        std = (1 << w_shift) * np.sqrt(2.0 / fan_in) * (0.25 if idx == 3 else 1.0)
        w = np.clip(np.rint(rng.normal(0.0, std, size=(cout, cin, 5, 5))), -32767, 32767)
        q_in = 0 if idx == 0 else act_shift
        b = np.zeros(cout) if idx < 3 else np.full(cout, 1 << (q_in + w_shift - 1))
        layers.append(LayerSpec(DECONV, cin, cout, 5, 2, w, b, w_shift, act_shift))
        if idx < 3:
            layers.append(LayerSpec(RELU))
    return ModelGraph(tuple(layers), DECODER, 0)
