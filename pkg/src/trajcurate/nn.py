"""Transformer building blocks on top of the autodiff substrate.

Every model in the package (video encoder, motion probe, inverse dynamics
model, policy) is a small pre-LN patch-token transformer assembled from these
pieces. Parameters live in flat name->Tensor dicts so checkpointing and the
functional gradient API stay trivial.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, attention, concat

INIT_SCALE = 0.02


class ParamStore:
    """Flat registry of named parameters with seeded Gaussian init."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}

    def gaussian(self, name: str, shape: tuple[int, ...], scale: float = INIT_SCALE) -> Tensor:
        t = Tensor(self.rng.normal(0.0, scale, size=shape), requires_grad=True)
        self.params[name] = t
        return t

    def zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        t = Tensor(np.zeros(shape), requires_grad=True)
        self.params[name] = t
        return t

    def ones(self, name: str, shape: tuple[int, ...]) -> Tensor:
        t = Tensor(np.ones(shape), requires_grad=True)
        self.params[name] = t
        return t

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint missing parameters: {sorted(missing)}")
        for name, t in self.params.items():
            if arrays[name].shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            t.data = np.array(arrays[name], dtype=np.float64)


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int):
        self.w = store.gaussian(f"{name}.w", (d_in, d_out))
        self.b = store.zeros(f"{name}.b", (d_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int):
        self.gamma = store.ones(f"{name}.g", (dim,))
        self.beta = store.zeros(f"{name}.b", (dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return x.layer_norm() * self.gamma + self.beta


class MultiHeadAttention:
    """Learned-projection attention; pass distinct kv input for cross-attention."""

    def __init__(self, store: ParamStore, name: str, dim: int, n_heads: int):
        self.n_heads = n_heads
        self.wq = Linear(store, f"{name}.q", dim, dim)
        self.wk = Linear(store, f"{name}.k", dim, dim)
        self.wv = Linear(store, f"{name}.v", dim, dim)
        self.wo = Linear(store, f"{name}.o", dim, dim)

    def __call__(self, x_q: Tensor, x_kv: Tensor | None = None) -> Tensor:
        x_kv = x_q if x_kv is None else x_kv
        out = attention(self.wq(x_q), self.wk(x_kv), self.wv(x_kv), self.n_heads)
        return self.wo(out)


class Mlp:
    def __init__(self, store: ParamStore, name: str, dim: int, hidden: int):
        self.fc1 = Linear(store, f"{name}.fc1", dim, hidden)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())


class TransformerBlock:
    """Pre-LN self-attention block with a GELU MLP (ratio 4)."""

    def __init__(self, store: ParamStore, name: str, dim: int, n_heads: int):
        self.ln1 = LayerNorm(store, f"{name}.ln1", dim)
        self.attn = MultiHeadAttention(store, f"{name}.attn", dim, n_heads)
        self.ln2 = LayerNorm(store, f"{name}.ln2", dim)
        self.mlp = Mlp(store, f"{name}.mlp", dim, 4 * dim)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class Trunk:
    def __init__(self, store: ParamStore, name: str, dim: int, n_heads: int, n_blocks: int):
        self.blocks = [TransformerBlock(store, f"{name}.blk{i}", dim, n_heads)
                       for i in range(n_blocks)]
        self.ln_out = LayerNorm(store, f"{name}.ln_out", dim)

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return self.ln_out(x)


def time_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of a scalar time in [0,1], one row per item."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(100.0), half))
    ang = t[:, None] * freqs[None, :]
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if feats.shape[1] < dim:
        feats = np.pad(feats, ((0, 0), (0, dim - feats.shape[1])))
    return feats


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """(..., H, W, 3) uint8 frames -> (..., n_patches, patch*patch*3) in [-1, 1]."""
    arr = np.asarray(frames, dtype=np.float64) / 127.5 - 1.0
    *lead, h, w, c = arr.shape
    gh, gw = h // patch, w // patch
    arr = arr.reshape(*lead, gh, patch, gw, patch, c)
    arr = np.moveaxis(arr, -3, -4)           # (..., gh, gw, patch, patch, c)
    return arr.reshape(*lead, gh * gw, patch * patch * c)


def stack_rows(rows: list[Tensor]) -> Tensor:
    """Stack (D,)- or (1,D)-shaped tensors into an (N, D) tensor."""
    rows = [r.reshape(1, -1) if r.ndim == 1 else r for r in rows]
    return concat(rows, axis=0)
