"""Frozen video encoder with a motion-focused contrastive pretext.

Clips are 16 consecutive frames of the stride-4 subsampled video (so a clip
spans 61 original frames), tokenized as 2-frame tubelets over a 16px patch
grid. Pretraining is restyle-contrastive: the two views of a clip are exact
palette recolorings of the same pixels, so agreement can only come from
geometry and motion, never from appearance. After pretraining the encoder is
frozen; the attentive probe and the cosine baseline both read its tokens.

Videos shorter than one clip are front-padded by repeating frame 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import Episode
from .nn import Linear, ParamStore, Trunk, patchify
from .optim import AdamW, LrSchedule, wsd_lr
from .seeding import rng_for
from .synthgen import random_palette_map, remap_frames
from .tensor import Tensor, no_grad

CLIP_LEN = 16        # frames per clip, after stride subsampling
STRIDE = 4           # temporal stride (original frames per effective frame)
GRID_STEP = 4        # clip-start grid step, in effective frames


class FrozenEncoderError(RuntimeError):
    pass


# -- clip geometry -------------------------------------------------------------------


def effective_video(video: np.ndarray, stride: int = STRIDE) -> np.ndarray:
    return video[::stride]


def clip_starts(n_effective: int, clip_len: int = CLIP_LEN,
                grid_step: int = GRID_STEP) -> list[int]:
    if n_effective < clip_len:
        return []
    return list(range(0, n_effective - clip_len + 1, grid_step))


def pad_effective(video_eff: np.ndarray, clip_len: int = CLIP_LEN) -> np.ndarray:
    """Front-pad a too-short effective sequence by repeating frame 0."""
    if len(video_eff) >= clip_len:
        return video_eff
    pad = np.repeat(video_eff[:1], clip_len - len(video_eff), axis=0)
    return np.concatenate([pad, video_eff], axis=0)


def extract_clip(video: np.ndarray, start: int, stride: int = STRIDE,
                 clip_len: int = CLIP_LEN) -> np.ndarray:
    """Clip at effective-frame index `start` from an original-rate video."""
    eff = pad_effective(effective_video(video, stride), clip_len)
    clip = eff[start:start + clip_len]
    if len(clip) != clip_len:
        raise ValueError(f"start {start} leaves only {len(clip)} effective frames")
    return clip


# -- model ----------------------------------------------------------------------------


@dataclass(frozen=True)
class EncoderHyper:
    dim: int = 64
    heads: int = 4
    blocks: int = 2
    patch: int = 16
    tubelet: int = 2
    clip_len: int = CLIP_LEN
    stride: int = STRIDE
    resolution: int = 64

    @property
    def tokens_per_clip(self) -> int:
        return (self.clip_len // self.tubelet) * (self.resolution // self.patch) ** 2


class EncoderModel:
    def __init__(self, hyper: EncoderHyper = EncoderHyper(), seed: int = 0):
        self.hyper = hyper
        store = ParamStore(rng_for(seed, "encoder-init"))
        d = hyper.dim
        tube_dim = hyper.patch * hyper.patch * 3 * hyper.tubelet
        self.tube_embed = Linear(store, "tube", tube_dim, d)
        self.pos_embed = store.gaussian("pos_embed", (hyper.tokens_per_clip, d))
        self.trunk = Trunk(store, "trunk", d, hyper.heads, hyper.blocks)
        self.store = store
        self.frozen = False

    @property
    def params(self) -> dict[str, Tensor]:
        return self.store.params

    def trainable_params(self) -> dict[str, Tensor]:
        if self.frozen:
            raise FrozenEncoderError("encoder is frozen; gradients are unavailable")
        return self.store.params

    def _tubelets(self, clips: np.ndarray) -> np.ndarray:
        h = self.hyper
        b, t = clips.shape[0], clips.shape[1]
        if t != h.clip_len:
            raise ValueError(f"clip length {t} != {h.clip_len}")
        patches = patchify(clips, h.patch)            # (B, T, P, pd)
        p = patches.shape[2]
        slots = t // h.tubelet
        patches = patches.reshape(b, slots, h.tubelet, p, -1)
        patches = np.moveaxis(patches, 2, 3)          # (B, slots, P, tubelet, pd)
        return patches.reshape(b, slots * p, -1)      # (B, M, tubelet*pd)

    def encode(self, clips: np.ndarray) -> Tensor:
        """(B, clip_len, H, W, 3) -> token Tensor (B, M, D); gradient-capable."""
        tubes = self._tubelets(np.asarray(clips))
        x = self.tube_embed(Tensor(tubes)).layer_norm() + self.pos_embed
        return self.trunk(x)

    def encode_np(self, clips: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.encode(clips).data

    def save(self, path) -> None:
        save_checkpoint(path, self.store.arrays(), meta={
            "dim": self.hyper.dim, "heads": self.hyper.heads,
            "blocks": self.hyper.blocks, "patch": self.hyper.patch,
            "tubelet": self.hyper.tubelet, "clip_len": self.hyper.clip_len,
            "stride": self.hyper.stride, "resolution": self.hyper.resolution,
            "frozen": 1.0 if self.frozen else 0.0,
        })

    @classmethod
    def load(cls, path) -> "EncoderModel":
        arrays, meta = load_checkpoint(path)
        hyper = EncoderHyper(dim=int(meta["dim"]), heads=int(meta["heads"]),
                             blocks=int(meta["blocks"]), patch=int(meta["patch"]),
                             tubelet=int(meta["tubelet"]),
                             clip_len=int(meta["clip_len"]),
                             stride=int(meta["stride"]),
                             resolution=int(meta["resolution"]))
        model = cls(hyper)
        model.store.load(arrays)
        model.frozen = bool(meta.get("frozen", 0.0))
        return model


def encode_clip(clip: np.ndarray, model: EncoderModel) -> np.ndarray:
    """Deterministic token matrix M x D for one clip."""
    if len(clip) != model.hyper.clip_len:
        raise ValueError(f"clip has {len(clip)} frames, need {model.hyper.clip_len}")
    return model.encode_np(clip[None])[0]


def pooled_embedding(tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim < 2 or tokens.shape[-2] < 1:
        raise ValueError("need at least one token")
    return tokens.mean(axis=-2)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm input")
    return float(u @ v / (nu * nv))


# -- contrastive pretraining --------------------------------------------------------------


@dataclass(frozen=True)
class EncoderTrainConfig:
    steps: int = 120
    batch_clips: int = 64
    lr: float = 1e-3
    temperature: float = 0.1
    weight_decay: float = 0.01
    seed: int = 0


def _l2_normalize(x: Tensor) -> Tensor:
    norm = ((x * x).sum(axis=-1, keepdims=True) + 1e-12) ** 0.5
    return x / norm


def nt_xent_loss(embeddings: Tensor, temperature: float) -> Tensor:
    """Normalized-temperature cross entropy over 2B views; view 2k pairs with 2k+1."""
    z = _l2_normalize(embeddings)
    n = z.shape[0]
    sims = (z @ z.swapaxes(0, 1)) * (1.0 / temperature)
    sims = sims + Tensor(np.eye(n) * -1e9)
    partner = np.arange(n) ^ 1
    onehot = np.zeros((n, n))
    onehot[np.arange(n), partner] = 1.0
    return -(sims.log_softmax(axis=-1) * Tensor(onehot)).sum() * (1.0 / n)


def pretrain_encoder(episodes: list[Episode],
                     config: EncoderTrainConfig = EncoderTrainConfig(),
                     hyper: EncoderHyper = EncoderHyper()) -> EncoderModel:
    """Restyle-contrastive pretraining; the returned encoder is frozen."""
    if len(episodes) < 2:
        raise ValueError("need at least two episodes for in-batch negatives")
    inventory: list[tuple[int, int]] = []
    for i, ep in enumerate(episodes):
        eff_len = len(effective_video(ep.frames, hyper.stride))
        starts = clip_starts(eff_len, hyper.clip_len, GRID_STEP) or [0]
        inventory.extend((i, s) for s in starts)

    model = EncoderModel(hyper, seed=config.seed)
    opt = AdamW(weight_decay=config.weight_decay)
    arrays = {k: t.data for k, t in model.params.items()}
    schedule = LrSchedule(base_lr=config.lr, total_steps=config.steps,
                          stable_steps=max(1, int(config.steps * 0.8)))

    for step_idx in range(config.steps):
        rng = rng_for(config.seed, "enc-step", step_idx)
        picks = rng.integers(0, len(inventory), size=config.batch_clips)
        views = []
        for p in picks:
            ei, start = inventory[int(p)]
            ep = episodes[ei]
            eff = pad_effective(effective_video(ep.frames, hyper.stride),
                                hyper.clip_len)
            clip = eff[start:start + hyper.clip_len]
            for _ in range(2):
                pal = random_palette_map(ep.scene, rng)
                gain = float(rng.uniform(0.5, 1.5))
                recolored, _ = remap_frames(clip, ep.scene, pal, gain)
                views.append(recolored)
        batch = np.stack(views)                       # (2B, clip_len, H, W, 3)
        for t in model.params.values():
            t.grad = None
        tokens = model.encode(batch)
        pooled = tokens.mean(axis=1)
        loss = nt_xent_loss(pooled, config.temperature)
        loss.backward()
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for k, t in model.params.items()}
        opt.step(arrays, grads, lr=wsd_lr(step_idx, schedule))

    model.frozen = True
    return model
