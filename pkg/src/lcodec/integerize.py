"""Post-training conversion of a float model to the 16-bit integer format.

Weights get the largest power-of-two scale that fits int16 (and keeps the
32-bit accumulator safe); activations get the largest scale that fits
twice the maximum magnitude seen on a calibration set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lcodec.nn import (
    ACC_LIMIT,
    CONV,
    DECODER,
    FMDL_MAGIC,
    RELU,
    LayerSpec,
    ModelGraph,
    apply_layer,
    conv_accumulate,
    deconv_accumulate,
    read_model_table,
    write_model_table,
)
from lcodec.qtensor import INT16_MAX, MAX_SHIFT, dequantize_value, quantize_value, round_half_away

ACTIVATION_MARGIN = 2.0
INT32_MAX = (1 << 31) - 1


@dataclass(frozen=True)
class FloatLayer:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    weights: np.ndarray | None = None
    biases: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == RELU:
            return
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.biases, dtype=np.float64)
        if w.shape != (self.out_channels, self.in_channels, self.kernel, self.kernel):
            raise ValueError(f"float weights have shape {w.shape}")
        if b.shape != (self.out_channels,):
            raise ValueError(f"float biases have shape {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("float model contains non-finite values")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)


@dataclass(frozen=True)
class FloatModel:
    """Real-valued twin of :class:`ModelGraph` (same topology, no shifts).

    ``input_shift`` is the fixed-point scale the integerized graph will
    expect at its input: 8 for images, 0 for rounded latents.
    """

    layers: tuple[FloatLayer, ...]
    role: str
    input_shift: int

    def to_bytes(self) -> bytes:
        return write_model_table(FMDL_MAGIC, self.role, self.input_shift, self.layers, np.float32, np.float32)

    @classmethod
    def from_bytes(cls, buf: bytes) -> FloatModel:
        role, input_shift, layers = read_model_table(buf, FMDL_MAGIC, "<f4", "<f4")
        fl = []
        for l in layers:
            l.pop("w_shift", None)
            l.pop("out_shift", None)
            fl.append(FloatLayer(**l))
        return cls(tuple(fl), role, input_shift)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> FloatModel:
        return cls.from_bytes(Path(path).read_bytes())


def float_layer_forward(x: np.ndarray, layer: FloatLayer) -> np.ndarray:
    if layer.kind == RELU:
        return np.maximum(x, 0.0)
    if layer.kind == CONV:
        acc = conv_accumulate(x, layer.weights, layer.stride)
    else:
        acc = deconv_accumulate(x, layer.weights, layer.stride)
    return acc + layer.biases[None, :, None, None]


def float_forward(model: FloatModel, x: np.ndarray, trace: bool = False):
    """Reference real-arithmetic forward pass on a batch ``(n, c, h, w)``.

    With ``trace`` returns the list of every layer's output instead of the
    final one.  Decoder outputs are clamped to ``[0, 1]`` like the integer
    path.
    """
    outs = []
    y = np.asarray(x, dtype=np.float64)
    for layer in model.layers:
        y = float_layer_forward(y, layer)
        outs.append(y)
    if model.role == DECODER and outs:
        y = np.clip(y, 0.0, 1.0)
    return outs if trace else y


def _stack(calib) -> np.ndarray:
    items = [np.asarray(c, dtype=np.float64) for c in calib]
    if not items:
        raise ValueError("calibration set is empty")
    return np.stack([c if c.ndim == 3 else c[0] for c in items])


def weight_shift(max_abs_w: float) -> int:
    """Largest shift in ``[0, 15]`` with ``max_abs_w * 2**shift <= 32767``."""
    if max_abs_w == 0:
        return MAX_SHIFT
    for s in range(MAX_SHIFT, -1, -1):
        if max_abs_w * (1 << s) <= INT16_MAX:
            return s
    raise ValueError(f"weight magnitude {max_abs_w} does not fit int16 at shift 0")


def activation_shift(max_abs_act: float, margin: float = ACTIVATION_MARGIN) -> int | None:
    """Largest shift with ``margin * max_abs_act * 2**shift <= 32767``; None if none fits."""
    for s in range(MAX_SHIFT, -1, -1):
        if margin * max_abs_act * (1 << s) <= INT16_MAX:
            return s
    return None


def select_shifts(model: FloatModel, calib) -> list[tuple[int, int]]:
    """Per-layer ``(w_shift, out_shift)``; ReLU layers get ``(0, input shift)``."""
    x = _stack(calib)
    trace = float_forward(model, x, trace=True)
    q_in = model.input_shift
    x_bound = min(INT16_MAX, ACTIVATION_MARGIN * float(np.abs(x).max()) * (1 << q_in))
    shifts = []
    for idx, (layer, out) in enumerate(zip(model.layers, trace)):
        act = float(np.abs(out).max()) if out.size else 0.0
        if layer.kind == RELU:
            shifts.append((0, q_in))
            continue
        wmax = float(np.abs(layer.weights).max())
        ws = weight_shift(wmax)
        taps = layer.in_channels * layer.kernel * layer.kernel
        bmax = float(np.abs(layer.biases).max())
        while ws > 0 and taps * wmax * (1 << ws) * x_bound + bmax * (1 << (ws + q_in)) >= ACC_LIMIT:
            ws -= 1
        out_shift = MAX_SHIFT if act == 0 else activation_shift(act)
        if out_shift is None:
            raise ValueError(f"layer {idx}: activation bound {act:g} exceeds int16 even at shift 0")
        shifts.append((ws, out_shift))
        q_in = out_shift
        x_bound = min(INT16_MAX, ACTIVATION_MARGIN * act * (1 << q_in))
    return shifts


def integerize(model: FloatModel, shifts) -> ModelGraph:
    layers = []
    q_in = model.input_shift
    for layer, (ws, out_shift) in zip(model.layers, shifts):
        if layer.kind == RELU:
            layers.append(LayerSpec(RELU))
            continue
        w = quantize_value(layer.weights, ws)
        b = np.clip(round_half_away(layer.biases * 2.0 ** (q_in + ws)), -INT32_MAX - 1, INT32_MAX)
        layers.append(
            LayerSpec(layer.kind, layer.in_channels, layer.out_channels, layer.kernel, layer.stride,
                      w, b.astype(np.int32), ws, out_shift)
        )
        q_in = out_shift
    return ModelGraph(tuple(layers), model.role, model.input_shift)


@dataclass
class DistillationReport:
    layer_max_abs: list[float]
    layer_mean_abs: list[float]
    max_abs: float
    mean_abs: float
    psnr_db: float

    def format(self) -> str:
        lines = [f"{'layer':>5} {'max|err|':>12} {'mean|err|':>12}"]
        for i, (mx, mn) in enumerate(zip(self.layer_max_abs, self.layer_mean_abs)):
            lines.append(f"{i:>5} {mx:>12.6g} {mn:>12.6g}")
        lines.append(f"{'total':>5} {self.max_abs:>12.6g} {self.mean_abs:>12.6g}")
        lines.append(f"psnr(int vs float) = {self.psnr_db:.2f} dB")
        return "\n".join(lines)


def distillation_report(model: FloatModel, graph: ModelGraph, calib) -> DistillationReport:
    """Float vs integer forward errors, per layer and end to end.

    Errors are in real units (integer outputs are dequantized).  The PSNR
    peak is 1 for decoders and the float output's max magnitude otherwise.
    """
    x = _stack(calib)
    ftrace = float_forward(model, x, trace=True)
    y = quantize_value(x, graph.input_shift)
    q = graph.input_shift
    maxes, means = [], []
    for idx, (layer, fout) in enumerate(zip(graph.layers, ftrace)):
        y = apply_layer(y, q, layer, idx)
        if layer.kind != RELU:
            q = layer.out_shift
        err = np.abs(dequantize_value(y, q) - fout)
        maxes.append(float(err.max()))
        means.append(float(err.mean()))
    if graph.role == DECODER:
        fin = np.clip(ftrace[-1], 0.0, 1.0) if ftrace else x
        iout = np.clip(dequantize_value(y, q), 0.0, 1.0)
        peak = 1.0
    else:
        fin = ftrace[-1] if ftrace else x
        iout = dequantize_value(y, q)
        peak = float(np.abs(fin).max()) or 1.0
    err = np.abs(iout - fin)
    mse = float(np.mean(err**2))
    psnr = math.inf if mse == 0 else 10 * math.log10(peak**2 / mse)
    return DistillationReport(maxes, means, float(err.max()), float(err.mean()), psnr)

