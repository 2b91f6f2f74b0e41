"""Shallow MLP decoders for geometry (SDF + embedding) and color."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParamStore


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class MlpDecoder:
    """Fully connected net with ReLU hidden layers, weights held in a ParamStore.

    Weights are stored ``(fan_in, fan_out)`` so a layer is ``x @ W + b``.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        in_dim: int,
        out_dim: int,
        hidden: int = 32,
        n_hidden: int = 2,
        output: str = "identity",
        rng: np.random.Generator | None = None,
    ):
        if output not in ("identity", "sigmoid"):
            raise ValueError(f"unknown output activation {output!r}")
        self.store = store
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.output = output
        self.widths = [in_dim] + [hidden] * n_hidden + [out_dim]
        rng = rng if rng is not None else np.random.default_rng(0)
        for k, (fi, fo) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            bound = 1.0 / np.sqrt(fi)
            store.add(f"{name}.w{k}", rng.uniform(-bound, bound, size=(fi, fo)), "decoder")
            store.add(f"{name}.b{k}", np.zeros(fo), "decoder")

    @staticmethod
    def weight_count(widths: list[int]) -> int:
        return sum(fi * fo + fo for fi, fo in zip(widths[:-1], widths[1:]))

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def forward(self, x: np.ndarray):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"{self.name}: expected input width {self.in_dim}, got {x.shape[-1]}")
        acts = [x]
        h = x
        for k in range(self.n_layers):
            h = h @ self.store.value(f"{self.name}.w{k}") + self.store.value(f"{self.name}.b{k}")
            if k < self.n_layers - 1:
                h = np.maximum(h, 0.0)
                acts.append(h)
        if self.output == "sigmoid":
            h = sigmoid(h)
        return h, (acts, h)

    def backward(self, cache, g_out: np.ndarray, param_grad: bool = True, input_grad: bool = True):
        acts, out = cache
        g = g_out * out * (1.0 - out) if self.output == "sigmoid" else g_out
        for k in reversed(range(self.n_layers)):
            a = acts[k]
            if param_grad:
                self.store.grad(f"{self.name}.w{k}")[...] += a.T @ g
                self.store.grad(f"{self.name}.b{k}")[...] += g.sum(axis=0)
            if k == 0 and not input_grad:
                return None
            g = g @ self.store.value(f"{self.name}.w{k}").T
            if k > 0:
                g = g * (a > 0.0)
        return g


@dataclass
class GeometryOutput:
    sdf: np.ndarray  # truncation-normalized, positive in free space
    g: np.ndarray  # geometry embedding


def decode_geometry(decoder: MlpDecoder, hash_feat, geo_triplane_feat, oneblob_feat):
    """Run the geometry decoder on concatenated encodings.

    Empty feature blocks (an encoder disabled for ablation) may be passed as
    ``None``. Returns the :class:`GeometryOutput` and the decoder cache.
    """
    x = np.concatenate([f for f in (hash_feat, geo_triplane_feat, oneblob_feat) if f is not None], axis=1)
    out, cache = decoder.forward(x)
    return GeometryOutput(out[:, 0], out[:, 1:]), cache


def decode_color(decoder: MlpDecoder, app_triplane_feat, oneblob_feat, g):
    x = np.concatenate([f for f in (app_triplane_feat, oneblob_feat, g) if f is not None], axis=1)
    rgb, cache = decoder.forward(x)
    return rgb, cache
