"""Parameter containers, small MLPs, Adam, and checkpoint I/O."""

from __future__ import annotations

import json

import numpy as np

from ..errors import VoxCityError
from .tensor import Tensor, concat


class Module:
    """Anything with named parameter tensors, discovered by attribute walk."""

    def named_parameters(self, prefix=""):
        out = {}
        for name in sorted(vars(self)):
            obj = getattr(self, name)
            path = f"{prefix}{name}"
            if isinstance(obj, Tensor) and obj.requires_grad:
                out[path] = obj
            elif isinstance(obj, Module):
                out.update(obj.named_parameters(f"{path}."))
            elif isinstance(obj, (list, tuple)):
                for i, item in enumerate(obj):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{path}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{path}.{i}"] = item
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def n_parameters(self):
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, rng, n_in, n_out, scale=None):
        scale = scale if scale is not None else 1.0 / np.sqrt(max(n_in, 1))
        self.w = Tensor(rng.normal(0.0, scale, size=(n_in, n_out)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class MLP(Module):
    """Fully connected stack with tanh hidden activations, linear output."""

    def __init__(self, rng, dims, activation="tanh"):
        if len(dims) < 2:
            raise VoxCityError("MLP needs at least input and output dims")
        self.layers = [Linear(rng, a, b) for a, b in zip(dims, dims[1:])]
        self.activation = activation
        self.input_width = dims[0]
        self.output_width = dims[-1]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.tanh() if self.activation == "tanh" else x.relu()
        return x

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        """Inference path on plain arrays (no graph)."""
        return self(Tensor(x)).data


class ResidualMLP(Module):
    """Input projection, residual tanh blocks, output projection."""

    def __init__(self, rng, n_in, hidden, n_out, blocks=2):
        self.proj_in = Linear(rng, n_in, hidden)
        self.blocks = [MLP(rng, [hidden, hidden, hidden]) for _ in range(blocks)]
        self.proj_out = Linear(rng, hidden, n_out, scale=1e-2)
        self.input_width = n_in
        self.output_width = n_out

    def __call__(self, x: Tensor) -> Tensor:
        h = self.proj_in(x).tanh()
        for block in self.blocks:
            h = h + block(h)
        return self.proj_out(h)


class Adam:
    """Standard Adam over a path-keyed parameter dict, fixed update order."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = {k: (np.zeros_like(p.data), np.zeros_like(p.data))
                      for k, p in self.params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for key in sorted(self.params):
            p = self.params[key]
            if p.grad is None:
                continue
            m, v = self.state[key]
            m[...] = b1 * m + (1 - b1) * p.grad
            v[...] = b2 * v + (1 - b2) * p.grad ** 2
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


CHECKPOINT_VERSION = 1


def save_checkpoint(path, module: Module, meta=None):
    """Versioned binary of parameter tensors keyed by module path."""
    payload = {k: t.data for k, t in module.named_parameters().items()}
    payload["__meta__"] = np.frombuffer(
        json.dumps({"version": CHECKPOINT_VERSION, **(meta or {})}).encode(),
        dtype=np.uint8)
    np.savez(path, **payload)


def load_checkpoint(path, module: Module):
    """Load parameters in place; returns the stored metadata dict."""
    with np.load(path) as zf:
        meta = json.loads(bytes(zf["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise VoxCityError(f"unsupported checkpoint version in {path}")
        params = module.named_parameters()
        missing = set(params) - set(zf.files)
        if missing:
            raise VoxCityError(f"checkpoint {path} missing keys: {sorted(missing)[:4]}")
        for key, tensor in params.items():
            stored = zf[key]
            if stored.shape != tensor.data.shape:
                raise VoxCityError(
                    f"checkpoint key {key}: shape {stored.shape} != {tensor.data.shape}")
            tensor.data = stored.astype(np.float64)
    return meta


def concat_features(tensors, axis=1):
    return concat(tensors, axis=axis)
