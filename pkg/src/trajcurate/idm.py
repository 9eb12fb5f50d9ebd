"""Inverse dynamics model: frame pair -> action chunk, via flow matching.

A small patch-token transformer conditions on the two endpoint frames (with a
learned frame-index embedding) and denoises the whole chunk of intermediate
actions. Sliding it over a video in non-overlapping windows pseudo-labels
generated videos with actions; the final partial window conditions on
(frame_t, last frame) and keeps only the rows that exist, so a T-frame video
always receives exactly T-1 action rows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import flow, sim
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import Episode
from .nn import Linear, ParamStore, Trunk, patchify, time_features
from .seeding import derive_seed, rng_for
from .tensor import Tensor, concat, no_grad

log = logging.getLogger(__name__)

ACTION_DIM = 6
DEFAULT_HORIZON = 8
LABEL_SEED = 0          # labels are reproducible artifacts


@dataclass(frozen=True)
class IdmHyper:
    dim: int = 64
    heads: int = 4
    blocks: int = 3
    patch: int = 16
    horizon: int = DEFAULT_HORIZON
    resolution: int = 64
    euler_steps: int = 8
    sample_avg: int = 4      # denoising runs averaged per prediction


class IdmModel:
    def __init__(self, hyper: IdmHyper = IdmHyper(), seed: int = 0):
        self.hyper = hyper
        store = ParamStore(rng_for(seed, "idm-init"))
        d = hyper.dim
        n_patches = (hyper.resolution // hyper.patch) ** 2
        patch_dim = hyper.patch * hyper.patch * 3
        self.patch_embed = Linear(store, "patch", patch_dim, d)
        self.diff_embed = Linear(store, "diff", patch_dim, d)
        self.frame_embed = store.gaussian("frame_embed", (2, d))
        self.pos_embed = store.gaussian("pos_embed", (n_patches, d))
        self.chunk_in = Linear(store, "chunk_in", ACTION_DIM, d)
        self.row_embed = store.gaussian("row_embed", (hyper.horizon, d))
        self.time_proj = Linear(store, "time", d, d)
        self.trunk = Trunk(store, "trunk", d, hyper.heads, hyper.blocks)
        self.head = Linear(store, "head", d, ACTION_DIM)
        self.store = store
        self.norm_mean = np.zeros(ACTION_DIM)
        self.norm_std = np.ones(ACTION_DIM)

    @property
    def params(self) -> dict[str, Tensor]:
        return self.store.params

    def normalize(self, chunks: np.ndarray) -> np.ndarray:
        return (chunks - self.norm_mean) / self.norm_std

    def denormalize(self, chunks: np.ndarray) -> np.ndarray:
        return chunks * self.norm_std + self.norm_mean

    def _frame_tokens(self, frame_a: np.ndarray, frame_b: np.ndarray) -> Tensor:
        """Anchor-frame tokens plus frame-difference tokens; the difference
        channel carries the motion signal the chunk must explain."""
        pa = patchify(frame_a, self.hyper.patch)               # (B, P, pd)
        pb = patchify(frame_b, self.hyper.patch)
        emb_a = (self.patch_embed(Tensor(pa)).layer_norm()
                 + self.pos_embed + self.frame_embed[0:1, :])
        emb_d = (self.diff_embed(Tensor(pb - pa)).layer_norm()
                 + self.pos_embed + self.frame_embed[1:2, :])
        return concat([emb_a, emb_d], axis=1)

    def velocity(self, x_t: np.ndarray, t: np.ndarray,
                 conditioning: dict[str, np.ndarray]) -> Tensor:
        """x_t: (B, H, 6) normalized noisy chunk; returns (B, H, 6) velocity."""
        b = x_t.shape[0]
        cond = self._frame_tokens(conditioning["frame_a"], conditioning["frame_b"])
        tfeat = time_features(t, self.hyper.dim)                 # (B, D)
        tvec = self.time_proj(Tensor(tfeat)).reshape(b, 1, self.hyper.dim)
        act = self.chunk_in(Tensor(x_t)) + self.row_embed + tvec
        tokens = concat([cond, act], axis=1)
        out = self.trunk(tokens)
        chunk_out = out[:, -self.hyper.horizon:, :]
        return self.head(chunk_out)

    # -- persistence -----------------------------------------------------------
    def save(self, path) -> None:
        arrays = dict(self.store.arrays())
        arrays["norm/mean"] = self.norm_mean
        arrays["norm/std"] = self.norm_std
        save_checkpoint(path, arrays, meta={
            "dim": self.hyper.dim, "heads": self.hyper.heads,
            "blocks": self.hyper.blocks, "patch": self.hyper.patch,
            "horizon": self.hyper.horizon, "resolution": self.hyper.resolution,
            "euler_steps": self.hyper.euler_steps,
            "sample_avg": self.hyper.sample_avg,
        })

    @classmethod
    def load(cls, path) -> "IdmModel":
        arrays, meta = load_checkpoint(path)
        hyper = IdmHyper(dim=int(meta["dim"]), heads=int(meta["heads"]),
                         blocks=int(meta["blocks"]), patch=int(meta["patch"]),
                         horizon=int(meta["horizon"]),
                         resolution=int(meta["resolution"]),
                         euler_steps=int(meta["euler_steps"]),
                         sample_avg=int(meta.get("sample_avg", 1)))
        model = cls(hyper)
        model.norm_mean = arrays.pop("norm/mean")
        model.norm_std = arrays.pop("norm/std")
        model.store.load(arrays)
        return model


def chunk_index(episodes: list[Episode], horizon: int) -> tuple[list[tuple[int, int]], int]:
    """(episode, start) pairs with a full chunk ahead; counts skipped episodes."""
    index = []
    skipped = 0
    for i, ep in enumerate(episodes):
        t = len(ep.frames)
        if t < horizon + 1:
            skipped += 1
            continue
        index.extend((i, s) for s in range(t - horizon))
    return index, skipped


def train_idm(episodes: list[Episode], config: flow.TrainConfig,
              hyper: IdmHyper = IdmHyper()) -> tuple[IdmModel, list[float]]:
    if not episodes:
        raise ValueError("empty dataset")
    index, skipped = chunk_index(episodes, hyper.horizon)
    if skipped:
        log.warning("train_idm: skipped %d episodes shorter than %d frames",
                    skipped, hyper.horizon + 1)
    if not index:
        raise ValueError("no episode long enough for a chunk")

    model = IdmModel(hyper, seed=config.seed)
    rows = np.concatenate([ep.actions for ep in episodes], axis=0)
    model.norm_mean = rows.mean(axis=0)
    model.norm_std = np.maximum(rows.std(axis=0), 1e-3)

    def batch_fn(step: int, rng: np.random.Generator):
        picks = rng.integers(0, len(index), size=config.batch_size)
        frames_a, frames_b, chunks = [], [], []
        for p in picks:
            ei, s = index[int(p)]
            ep = episodes[ei]
            frames_a.append(ep.frames[s])
            frames_b.append(ep.frames[s + hyper.horizon])
            chunks.append(ep.actions[s:s + hyper.horizon])
        cond = {"frame_a": np.stack(frames_a), "frame_b": np.stack(frames_b)}
        return model.normalize(np.stack(chunks)), cond

    losses = flow.train_fm(model, batch_fn, config)
    return model, losses


def _clip_chunk(chunk: np.ndarray) -> np.ndarray:
    out = chunk.copy()
    out[..., [0, 1, 3, 4]] = np.clip(out[..., [0, 1, 3, 4]], -sim.A_MAX, sim.A_MAX)
    out[..., [2, 5]] = np.clip(out[..., [2, 5]], 0.0, 1.0)
    return out


def _predict_batch(model: IdmModel, frames_a: np.ndarray, frames_b: np.ndarray,
                   seed: int) -> np.ndarray:
    """Average sample_avg denoising runs (seeded); the chunk posterior is
    essentially unimodal, so the mean is the minimum-MSE point estimate."""
    cond = {"frame_a": frames_a, "frame_b": frames_b}

    def velocity_fn(x_t, t, c):
        with no_grad():
            return model.velocity(x_t, t, c).data

    shape = (len(frames_a), model.hyper.horizon, ACTION_DIM)
    runs = [flow.euler_sample(velocity_fn, cond, shape, model.hyper.euler_steps,
                              derive_seed(seed, "avg", j))
            for j in range(model.hyper.sample_avg)]
    return _clip_chunk(model.denormalize(np.mean(runs, axis=0)))


def idm_predict(frame_a: np.ndarray, frame_b: np.ndarray, model: IdmModel,
                seed: int) -> np.ndarray:
    """Denoise the action chunk between two frames; (horizon, 6), bounded."""
    if frame_a.shape != frame_b.shape or frame_a.shape[0] != model.hyper.resolution:
        raise ValueError("frame resolution differs from the model's")
    return _predict_batch(model, frame_a[None], frame_b[None], seed)[0]


def label_video(video: np.ndarray, model: IdmModel,
                seed: int = LABEL_SEED) -> np.ndarray:
    """Pseudo-label a video: non-overlapping windows at 0, H, 2H, ...; the final
    partial window conditions on (frame_t, last frame) and keeps its first rows."""
    t_total = len(video)
    if t_total < 2:
        raise ValueError("need at least two frames")
    h = model.hyper.horizon
    starts = []
    s = 0
    while s < t_total - 1:
        starts.append(s)
        s += h
    ends = [min(s + h, t_total - 1) for s in starts]
    frames_a = np.stack([video[s] for s in starts])
    frames_b = np.stack([video[e] for e in ends])
    chunks = _predict_batch(model, frames_a, frames_b, derive_seed(seed, "label-windows"))
    rows = [chunks[i, :ends[i] - starts[i]] for i in range(len(starts))]
    out = np.concatenate(rows, axis=0)
    assert len(out) == t_total - 1
    return out
