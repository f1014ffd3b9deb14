"""Toy encoder-decoder generators and a patch discriminator.

Generator: ``depth`` stride-2 convs, residual blocks at the bottleneck, then
``depth`` stride-2 transposed convs and a tanh. Teacher and student specs
differ only in ``base_width``, so their bottlenecks share spatial size and
regions correspond one-to-one.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .attention import FeatureMap
from .tensor import ShapeError, Tensor, concat, conv2d, conv_transpose2d, leaky_relu, mean, mul, sub, tanh
from .tensor import LEAKY_SLOPE

_GAIN = np.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2))


@dataclass(frozen=True)
class GeneratorSpec:
    base_width: int = 32
    depth: int = 3
    image_size: int = 64
    channels: int = 3
    res_blocks: int = 2

    def __post_init__(self):
        if self.base_width < 2:
            raise ValueError(f"base_width must be >= 2, got {self.base_width}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.image_size % (2**self.depth):
            raise ValueError(f"image size {self.image_size} is not divisible by 2^{self.depth}")

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // 2**self.depth

    @property
    def bottleneck_channels(self) -> int:
        return self.base_width * 2 ** (self.depth - 1)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DiscriminatorSpec:
    base_width: int = 16
    layers: int = 2
    channels: int = 6  # input image concatenated with candidate output

    @property
    def receptive_field(self) -> int:
        rf = 3
        for _ in range(self.layers):
            rf = rf * 2 + 2
        return rf

    def to_dict(self) -> dict:
        return asdict(self)


class Module:
    """Named float64 parameters in insertion order."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()

    def set_trainable(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = flag


class Generator(Module):
    def __init__(self, spec: GeneratorSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(seed)
        w, c = spec.base_width, spec.channels
        chans = [c] + [w * 2**i for i in range(spec.depth)]
        for i in range(spec.depth):
            cin, cout = chans[i], chans[i + 1]
            self._param(f"enc{i}.w", rng.standard_normal((cout, cin, 4, 4)) * _GAIN / np.sqrt(cin * 16))
            self._param(f"enc{i}.b", np.zeros(cout))
        cb = chans[-1]
        for r in range(spec.res_blocks):
            self._param(f"res{r}.w1", rng.standard_normal((cb, cb, 3, 3)) * _GAIN / np.sqrt(cb * 9))
            self._param(f"res{r}.b1", np.zeros(cb))
            # small second conv keeps each block near identity at init
            self._param(f"res{r}.w2", rng.standard_normal((cb, cb, 3, 3)) * 0.1 / np.sqrt(cb * 9))
            self._param(f"res{r}.b2", np.zeros(cb))
        up = chans[::-1]  # bottleneck ... w, then image channels
        up[-1] = c
        for i in range(spec.depth):
            cin, cout = up[i], up[i + 1]
            gain = 1.0 if i == spec.depth - 1 else _GAIN
            # each output pixel of a stride-2, k=4 transposed conv sees cin * 4 inputs
            self._param(f"dec{i}.w", rng.standard_normal((cin, cout, 4, 4)) * gain / np.sqrt(cin * 4))
            self._param(f"dec{i}.b", np.zeros(cout))

    def encode(self, x: Tensor) -> Tensor:
        """Image (N, 3, H, W) -> bottleneck activation (N, c, h, w)."""
        s = self.spec
        if x.ndim != 4 or x.shape[1:] != (s.channels, s.image_size, s.image_size):
            raise ShapeError(
                f"generator expects (N, {s.channels}, {s.image_size}, {s.image_size}) images, got {x.shape}"
            )
        p = self.params
        h = x
        for i in range(s.depth):
            h = leaky_relu(conv2d(h, p[f"enc{i}.w"], p[f"enc{i}.b"], stride=2, padding=1))
        for r in range(s.res_blocks):
            branch = leaky_relu(conv2d(h, p[f"res{r}.w1"], p[f"res{r}.b1"], padding=1))
            h = h + conv2d(branch, p[f"res{r}.w2"], p[f"res{r}.b2"], padding=1)
        return h

    def decode(self, h: Tensor) -> Tensor:
        p = self.params
        depth = self.spec.depth
        for i in range(depth):
            h = conv_transpose2d(h, p[f"dec{i}.w"], p[f"dec{i}.b"], stride=2, padding=1)
            h = tanh(h) if i == depth - 1 else leaky_relu(h)
        return h

    def forward_with_features(self, x: Tensor) -> tuple[Tensor, FeatureMap]:
        feat = self.encode(x)
        return self.decode(feat), FeatureMap.from_spatial(feat)

    def __call__(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x))


class Discriminator(Module):
    """Conditional patch discriminator: (input, candidate) -> grid of realness scores."""

    def __init__(self, spec: DiscriminatorSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(seed)
        cin = spec.channels
        for i in range(spec.layers):
            cout = spec.base_width * 2**i
            self._param(f"d{i}.w", rng.standard_normal((cout, cin, 4, 4)) * _GAIN / np.sqrt(cin * 16))
            self._param(f"d{i}.b", np.zeros(cout))
            cin = cout
        self._param("out.w", rng.standard_normal((1, cin, 3, 3)) / np.sqrt(cin * 9))
        self._param("out.b", np.zeros(1))

    def __call__(self, source: Tensor, image: Tensor) -> Tensor:
        h = concat([source, image], axis=1)
        p = self.params
        for i in range(self.spec.layers):
            h = leaky_relu(conv2d(h, p[f"d{i}.w"], p[f"d{i}.b"], stride=2, padding=1))
        return conv2d(h, p["out.w"], p["out.b"], padding=1)


def lsgan_loss(scores: Tensor, target: float) -> Tensor:
    """Least-squares adversarial loss ``mean((scores - target)^2)``."""
    d = sub(scores, target)
    return mean(mul(d, d))


def build_generator(spec: GeneratorSpec, seed: int = 0) -> Generator:
    return Generator(spec, seed)


class Adam:
    """Adam over a list of tensors; updates ``data`` in place from ``grad``."""

    def __init__(self, params: list[Tensor], lr: float = 2e-4, betas=(0.5, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
