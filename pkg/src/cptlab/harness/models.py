"""Quantized layers and the desk-scale model presets."""

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from cptlab import autodiff as ad
from cptlab.cost import LayerDesc
from cptlab.quantization import fake_quantize, quantize_errors


@dataclass
class QuantContext:
    """Bitwidths and quantizer choices for one forward/backward pass.

    ``macs`` collects the multiply-accumulate count of every GEMM layer run
    under this context (the instrumented side of the cost ledger).
    """

    weight_bits: int = 32
    act_bits: int = 32
    error_bits: int = 32
    weight_kind: str = "max_scale_symmetric"
    act_kind: str = "max_scale_unsigned"
    error_rounding: str = "stochastic"
    rng: Optional[np.random.Generator] = None
    macs: List[int] = field(default_factory=list)


def full_precision():
    return QuantContext()


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


class QLinear:
    def __init__(self, in_features, out_features, rng, dtype=np.float32, input_signed=False):
        self.in_features, self.out_features = in_features, out_features
        self.input_signed = input_signed
        self.weight = ad.Tensor(_kaiming_uniform(rng, (in_features, out_features), in_features, dtype),
                                requires_grad=True, name="weight")
        self.bias = ad.Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True, name="bias")

    def parameters(self):
        return [("weight", self.weight, "linear_weight"), ("bias", self.bias, "bias")]

    def out_shape(self, in_shape):
        return (self.out_features,)

    def describe(self, in_shape):
        return LayerDesc("linear", in_features=self.in_features, out_features=self.out_features)

    def __call__(self, x, ctx: QuantContext):
        xq = fake_quantize(x, ctx.act_bits, "max_scale_symmetric" if self.input_signed else ctx.act_kind)
        wq = fake_quantize(self.weight, ctx.weight_bits, ctx.weight_kind)
        y = ad.add_bias(ad.matmul(xq, wq), self.bias)
        ctx.macs.append(x.shape[0] * self.in_features * self.out_features)
        return quantize_errors(y, ctx.error_bits, ctx.rng, ctx.error_rounding)


class QConv2d:
    def __init__(self, in_channels, out_channels, kernel, rng, stride=1, padding=0,
                 dtype=np.float32, input_signed=False):
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.input_signed = input_signed
        fan_in = in_channels * kernel * kernel
        self.weight = ad.Tensor(_kaiming_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype),
                                requires_grad=True, name="weight")
        self.bias = ad.Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True, name="bias")

    def parameters(self):
        return [("weight", self.weight, "conv_weight"), ("bias", self.bias, "bias")]

    def out_shape(self, in_shape):
        _, h, w = in_shape
        ho, wo = ad.conv_output_size(h, w, self.kernel, self.kernel, self.stride, self.padding)
        return (self.out_channels, ho, wo)

    def describe(self, in_shape):
        return LayerDesc("conv", in_shape=tuple(in_shape), out_channels=self.out_channels,
                         kernel=(self.kernel, self.kernel), stride=self.stride, padding=self.padding)

    def __call__(self, x, ctx: QuantContext):
        xq = fake_quantize(x, ctx.act_bits, "max_scale_symmetric" if self.input_signed else ctx.act_kind)
        wq = fake_quantize(self.weight, ctx.weight_bits, ctx.weight_kind)
        y = ad.add_bias(ad.conv2d(xq, wq, self.stride, self.padding), self.bias)
        n, _, ho, wo = y.shape
        ctx.macs.append(n * self.out_channels * self.in_channels * self.kernel * self.kernel * ho * wo)
        return quantize_errors(y, ctx.error_bits, ctx.rng, ctx.error_rounding)


class ReLU:
    def parameters(self):
        return []

    def out_shape(self, in_shape):
        return in_shape

    def __call__(self, x, ctx):
        return ad.relu(x)


class AvgPool2d:
    def __init__(self, k=2):
        self.k = k

    def parameters(self):
        return []

    def out_shape(self, in_shape):
        c, h, w = in_shape
        return (c, h // self.k, w // self.k)

    def __call__(self, x, ctx):
        return ad.avgpool2d(x, self.k)


class Flatten:
    def parameters(self):
        return []

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def __call__(self, x, ctx):
        return ad.flatten(x)


class Sequential:
    def __init__(self, layers, input_shape, name="model"):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.name = name

    def __call__(self, x, ctx: QuantContext):
        if not isinstance(x, ad.Tensor):
            x = ad.Tensor(x, check=False)
        for layer in self.layers:
            x = layer(x, ctx)
        return x

    def named_parameters(self):
        """``(name, tensor, role)`` for every trainable tensor, in a fixed order."""
        out = []
        for i, layer in enumerate(self.layers):
            for pname, t, role in layer.parameters():
                out.append((f"{i}.{pname}", t, role))
        return out

    def parameters(self):
        return [t for _, t, _ in self.named_parameters()]

    def num_parameters(self):
        return sum(t.size for t in self.parameters())

    def layer_descs(self):
        """Per-sample shape descriptions of the GEMM layers (for analytic costing)."""
        shape = self.input_shape
        descs = []
        for layer in self.layers:
            if hasattr(layer, "describe"):
                descs.append(layer.describe(shape))
            shape = layer.out_shape(shape)
        return descs

    def state(self):
        return {name: t.data.copy() for name, t, _ in self.named_parameters()}

    def load_state(self, state):
        for name, t, _ in self.named_parameters():
            arr = state[name]
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
            t.data = np.array(arr, dtype=t.dtype)


def build_model(preset, input_shape, n_classes, rng, dtype=np.float32, input_signed=False, hidden=128):
    """Construct a named preset.

    ``cnn6``: 3 conv + pooling + 2 linear (~140k parameters on 1x16x16 input).
    ``mlp3``: two hidden layers of ``hidden`` units. ``probe``: a single linear layer.
    """
    if preset == "cnn6":
        if len(input_shape) != 3:
            raise ValueError(f"cnn6 needs image input (C, H, W), got {input_shape}")
        c, h, w = input_shape
        layers = [
            QConv2d(c, 8, 3, rng, padding=1, dtype=dtype, input_signed=input_signed), ReLU(),
            QConv2d(8, 16, 3, rng, padding=1, dtype=dtype), ReLU(), AvgPool2d(2),
            QConv2d(16, 32, 3, rng, padding=1, dtype=dtype), ReLU(), AvgPool2d(2),
            Flatten(),
        ]
        feat = 32 * (h // 4) * (w // 4)
        layers += [QLinear(feat, 256, rng, dtype), ReLU(), QLinear(256, n_classes, rng, dtype)]
        return Sequential(layers, input_shape, preset)
    d = int(np.prod(input_shape))
    pre = [Flatten()] if len(input_shape) > 1 else []
    if preset == "mlp3":
        layers = pre + [
            QLinear(d, hidden, rng, dtype, input_signed=input_signed), ReLU(),
            QLinear(hidden, hidden, rng, dtype), ReLU(),
            QLinear(hidden, n_classes, rng, dtype),
        ]
        return Sequential(layers, input_shape, preset)
    if preset == "probe":
        return Sequential(pre + [QLinear(d, n_classes, rng, dtype, input_signed=input_signed)],
                          input_shape, preset)
    raise ValueError(f"unknown model preset {preset!r}")
