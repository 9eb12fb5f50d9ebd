"""Attentive probe for motion consistency between a video and a replay.

The pair dataset comes from verified demonstrations only: each episode's
action sequence is replayed under canonical appearance, and clips are paired
time-aligned (positive), time-shifted within the episode, or crossed with a
different episode's replay (negatives). A learnable query token attends once
over the concatenated token sets of both clips (with a learned segment
embedding marking the side) and a linear head emits the alignment logit.

Scoring a generated sample replays its pseudo-actions from the recorded
initial state, cuts both videos into the same aligned clip windows, and
aggregates per-window alignment probabilities (mean by default, min behind a
flag).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sim
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import Episode
from .encoder import (
    CLIP_LEN,
    GRID_STEP,
    STRIDE,
    EncoderModel,
    clip_starts,
    effective_video,
    pad_effective,
)
from .nn import Linear, ParamStore
from .optim import AdamW
from .seeding import rng_for
from .synthgen import NeuralSample
from .tensor import Tensor, attention, concat, no_grad

LABELS = ("positive", "neg_shift", "neg_cross")


@dataclass(frozen=True)
class ClipPair:
    episode_a: int
    start_a: int
    episode_b: int
    start_b: int
    label: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")
        if self.label == "positive":
            ok = self.episode_a == self.episode_b and self.start_a == self.start_b
        elif self.label == "neg_shift":
            ok = self.episode_a == self.episode_b and self.start_a != self.start_b
        else:
            ok = self.episode_a != self.episode_b and self.start_a == self.start_b
        if not ok:
            raise ValueError(f"{self.label} pair violates its construction invariant")

    @property
    def y(self) -> float:
        return 1.0 if self.label == "positive" else 0.0


@dataclass
class PairSet:
    """Pairs plus the effective-frame videos they index into.

    Side a is the episode's own recording; side b is the canonical-appearance
    replay of its actions.
    """
    pairs: list[ClipPair]
    real_eff: list[np.ndarray]
    sim_eff: list[np.ndarray]
    starts: list[list[int]]
    clip_len: int = CLIP_LEN

    def clip(self, episode: int, side: str, start: int) -> np.ndarray:
        video = (self.real_eff if side == "real" else self.sim_eff)[episode]
        return video[start:start + self.clip_len]


def build_pairs(episodes: list[Episode], k_shift: int = 1, k_cross: int = 1,
                seed: int = 0, clip_len: int = CLIP_LEN, stride: int = STRIDE,
                grid_step: int = GRID_STEP) -> PairSet:
    """Positives at every grid start; per positive, k_shift time-shifted and
    k_cross cross-episode negatives (uniform over the valid candidates)."""
    if len(episodes) < 2 and k_cross > 0:
        raise ValueError("cross-episode negatives need at least two episodes")
    real_eff, sim_eff, starts = [], [], []
    for ep in episodes:
        resolution = ep.frames.shape[1]
        replay = sim.replay(sim.canonical_scene(ep.scene),
                            sim.initial_state(ep.scene), ep.actions, resolution)
        real_eff.append(effective_video(ep.frames, stride))
        sim_eff.append(effective_video(replay, stride))
        starts.append(clip_starts(len(real_eff[-1]), clip_len, grid_step))
    if not any(starts):
        raise ValueError("no episode admits a clip window")

    rng = rng_for(seed, "pairs")
    pairs: list[ClipPair] = []
    for i, ep_starts in enumerate(starts):
        for t in ep_starts:
            pairs.append(ClipPair(i, t, i, t, "positive"))
            shift_candidates = [s for s in ep_starts if s != t]
            for _ in range(k_shift if shift_candidates else 0):
                t2 = int(rng.choice(shift_candidates))
                pairs.append(ClipPair(i, t, i, t2, "neg_shift"))
            cross_candidates = [j for j in range(len(episodes))
                                if j != i and t in starts[j]]
            for _ in range(k_cross if cross_candidates else 0):
                j = int(rng.choice(cross_candidates))
                pairs.append(ClipPair(i, t, j, t, "neg_cross"))
    return PairSet(pairs, real_eff, sim_eff, starts, clip_len)


# -- model -------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeHyper:
    dim: int = 64
    heads: int = 8


class ProbeModel:
    def __init__(self, hyper: ProbeHyper = ProbeHyper(), seed: int = 0):
        self.hyper = hyper
        store = ParamStore(rng_for(seed, "probe-init"))
        d = hyper.dim
        self.query = store.gaussian("query", (1, d))
        self.segment = store.gaussian("segment", (2, d))
        self.wq = Linear(store, "wq", d, d)
        self.wk = Linear(store, "wk", d, d)
        self.wv = Linear(store, "wv", d, d)
        self.wo = Linear(store, "wo", d, d)
        self.ln_g = store.ones("ln.g", (d,))
        self.ln_b = store.zeros("ln.b", (d,))
        self.head = Linear(store, "head", d, 1)
        self.store = store

    @property
    def params(self) -> dict[str, Tensor]:
        return self.store.params

    def forward(self, z1: np.ndarray | Tensor, z2: np.ndarray | Tensor) -> Tensor:
        """(B, M, D) token sets for both clips -> (B,) alignment logits."""
        z1 = z1 if isinstance(z1, Tensor) else Tensor(z1)
        z2 = z2 if isinstance(z2, Tensor) else Tensor(z2)
        if z1.shape[-1] != self.hyper.dim or z2.shape[-1] != self.hyper.dim:
            raise ValueError("token dim differs from probe dim")
        squeeze = z1.ndim == 2
        if squeeze:
            z1 = z1.reshape(1, *z1.shape)
            z2 = z2.reshape(1, *z2.shape)
        b = z1.shape[0]
        tokens = concat([z1 + self.segment[0:1, :], z2 + self.segment[1:2, :]],
                        axis=1)
        query = concat([self.query.reshape(1, 1, -1)] * b, axis=0)
        attended = attention(self.wq(query), self.wk(tokens), self.wv(tokens),
                             self.hyper.heads)
        vec = self.wo(attended).layer_norm() * self.ln_g + self.ln_b
        logits = self.head(vec).reshape(b)
        return logits

    def save(self, path) -> None:
        save_checkpoint(path, self.store.arrays(),
                        meta={"dim": self.hyper.dim, "heads": self.hyper.heads})

    @classmethod
    def load(cls, path) -> "ProbeModel":
        arrays, meta = load_checkpoint(path)
        model = cls(ProbeHyper(dim=int(meta["dim"]), heads=int(meta["heads"])))
        model.store.load(arrays)
        return model


def probe_forward(z1: np.ndarray, z2: np.ndarray, probe: ProbeModel) -> float:
    with no_grad():
        return float(probe.forward(z1, z2).data[0])


def alignment_prob(logit):
    logit = np.asarray(logit, dtype=np.float64)
    if not np.all(np.isfinite(logit)):
        raise ValueError("logit must be finite")
    out = np.empty_like(logit)
    pos = logit >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-logit[pos]))
    ex = np.exp(logit[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def bce_loss(p, y) -> float:
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(-y * np.log(p) - (1.0 - y) * np.log(1.0 - p)))


def _bce_tensor(logits: Tensor, y: np.ndarray) -> Tensor:
    p = logits.sigmoid().clip(1e-12, 1.0 - 1e-12)
    yt = Tensor(y)
    return -(yt * p.log() + (1.0 - yt) * (1.0 - p).log()).mean()


# -- training ------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeTrainConfig:
    lr: float = 1e-4
    batch_pairs: int = 32
    max_epochs: int = 50
    patience: int = 6
    val_fraction: float = 0.2
    weight_decay: float = 0.01
    seed: int = 0


@dataclass
class ProbeTrainReport:
    train_bce: list[float] = field(default_factory=list)
    val_bce: list[float] = field(default_factory=list)
    best_epoch: int = 0
    val_accuracy: float = 0.0


class _ClipCache:
    """Each distinct (episode, side, start) clip is encoded exactly once."""

    def __init__(self, pair_set: PairSet, encoder: EncoderModel):
        keys = set()
        for p in pair_set.pairs:
            keys.add((p.episode_a, "real", p.start_a))
            keys.add((p.episode_b, "sim", p.start_b))
        keys = sorted(keys)
        clips = np.stack([pair_set.clip(e, side, s) for e, side, s in keys])
        encoded = []
        for i in range(0, len(clips), 64):
            encoded.append(encoder.encode_np(clips[i:i + 64]))
        tokens = np.concatenate(encoded, axis=0)
        self.tokens = {k: tokens[i] for i, k in enumerate(keys)}

    def batch(self, pairs: list[ClipPair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        z1 = np.stack([self.tokens[(p.episode_a, "real", p.start_a)] for p in pairs])
        z2 = np.stack([self.tokens[(p.episode_b, "sim", p.start_b)] for p in pairs])
        y = np.array([p.y for p in pairs])
        return z1, z2, y


def _split_by_episode(pair_set: PairSet, val_fraction: float,
                      rng: np.random.Generator) -> tuple[list[ClipPair], list[ClipPair]]:
    n_ep = len(pair_set.real_eff)
    order = rng.permutation(n_ep)
    n_val = max(1, int(round(val_fraction * n_ep)))
    val_eps = set(int(i) for i in order[:n_val])
    train, val = [], []
    for p in pair_set.pairs:
        a_val, b_val = p.episode_a in val_eps, p.episode_b in val_eps
        if not a_val and not b_val:
            train.append(p)
        elif a_val and b_val:
            val.append(p)
        # pairs straddling the split are dropped
    return train, val


def train_probe(pair_set: PairSet, encoder: EncoderModel,
                config: ProbeTrainConfig = ProbeTrainConfig()) -> tuple[ProbeModel, ProbeTrainReport]:
    """AdamW on BCE over cached encodings; early stop on validation BCE."""
    if not encoder.frozen:
        raise ValueError("encoder must be frozen before probe training")
    labels = {p.label != "positive" for p in pair_set.pairs}
    if len(labels) < 2:
        raise ValueError("pair set must contain both classes")

    rng = rng_for(config.seed, "probe-train")
    cache = _ClipCache(pair_set, encoder)
    train_pairs, val_pairs = _split_by_episode(pair_set, config.val_fraction, rng)
    if not train_pairs or not val_pairs:
        raise ValueError("episode split left an empty train or validation set")

    probe = ProbeModel(ProbeHyper(dim=encoder.hyper.dim), seed=config.seed)
    opt = AdamW(weight_decay=config.weight_decay)
    arrays = {k: t.data for k, t in probe.params.items()}
    report = ProbeTrainReport()
    best_val = np.inf
    best_arrays: dict[str, np.ndarray] = {k: v.copy() for k, v in arrays.items()}
    since_best = 0

    z1v, z2v, yv = cache.batch(val_pairs)
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(train_pairs))
        epoch_losses = []
        for lo in range(0, len(order), config.batch_pairs):
            batch = [train_pairs[i] for i in order[lo:lo + config.batch_pairs]]
            z1, z2, y = cache.batch(batch)
            for t in probe.params.values():
                t.grad = None
            loss = _bce_tensor(probe.forward(z1, z2), y)
            loss.backward()
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                     for k, t in probe.params.items()}
            opt.step(arrays, grads, lr=config.lr)
            epoch_losses.append(loss.item())
        report.train_bce.append(float(np.mean(epoch_losses)))
        with no_grad():
            val_logits = probe.forward(z1v, z2v).data
        val_loss = bce_loss(alignment_prob(val_logits), yv)
        report.val_bce.append(val_loss)
        if val_loss < best_val - 1e-6:
            best_val = val_loss
            best_arrays = {k: v.copy() for k, v in arrays.items()}
            report.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    probe.store.load(best_arrays)
    with no_grad():
        val_logits = probe.forward(z1v, z2v).data
    preds = alignment_prob(val_logits) > 0.5
    report.val_accuracy = float(np.mean(preds == (yv > 0.5)))
    return probe, report


def pair_accuracy(pair_set: PairSet, pairs: list[ClipPair],
                  encoder: EncoderModel, probe: ProbeModel) -> float:
    cache = _ClipCache(PairSet(pairs, pair_set.real_eff, pair_set.sim_eff,
                               pair_set.starts, pair_set.clip_len), encoder)
    z1, z2, y = cache.batch(pairs)
    with no_grad():
        logits = probe.forward(z1, z2).data
    return float(np.mean((alignment_prob(logits) > 0.5) == (y > 0.5)))


# -- sample scoring --------------------------------------------------------------------


def score_sample(sample: NeuralSample, encoder: EncoderModel, probe: ProbeModel,
                 aggregation: str = "mean") -> float:
    """Mean (or min) alignment probability over aligned clip windows of the
    generated video and the canonical replay of its pseudo-actions."""
    if sample.idm_actions is None:
        raise ValueError("sample has no pseudo-actions to verify")
    if aggregation not in ("mean", "min"):
        raise ValueError(f"unknown aggregation {aggregation!r}")
    resolution = sample.video.shape[1]
    replay = sim.replay(sim.canonical_scene(sample.scene), sample.initial_state(),
                        sample.idm_actions, resolution)
    gen_eff = pad_effective(effective_video(sample.video))
    rep_eff = pad_effective(effective_video(replay))
    starts = clip_starts(len(gen_eff)) or [0]
    gen_clips = np.stack([gen_eff[s:s + CLIP_LEN] for s in starts])
    rep_clips = np.stack([rep_eff[s:s + CLIP_LEN] for s in starts])
    z1 = encoder.encode_np(gen_clips)
    z2 = encoder.encode_np(rep_clips)
    with no_grad():
        logits = probe.forward(z1, z2).data
    probs = alignment_prob(logits)
    return float(probs.mean() if aggregation == "mean" else probs.min())
