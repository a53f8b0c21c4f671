"""Adam training loop over permuted textual encodings of a trajectory dataset."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import TrajectoryDataset
from .encode import Vocabulary, encode_trajectory, permute_visits
from .model import LoraAdapter, ModelConfig, SequenceTooLong, loss_and_grad

PERMUTE_MODES = ("per-epoch", "once", "off")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 48
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    permute_mode: str = "per-epoch"
    mode: str = "full"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.permute_mode not in PERMUTE_MODES:
            raise ValueError(f"permute_mode must be one of {PERMUTE_MODES}")
        if self.mode not in ("full", "lora-only"):
            raise ValueError("mode must be 'full' or 'lora-only'")


class AdamState:
    def __init__(self, tc: TrainConfig):
        self.tc = tc
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        tc = self.tc
        self.t += 1
        bc1 = 1.0 - tc.beta1**self.t
        bc2 = 1.0 - tc.beta2**self.t
        for name, g in grads.items():
            w = tensors[name]
            m = self.m.setdefault(name, np.zeros_like(w))
            v = self.v.setdefault(name, np.zeros_like(w))
            m *= tc.beta1
            m += (1 - tc.beta1) * g
            v *= tc.beta2
            v += (1 - tc.beta2) * g * g
            w -= (tc.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + tc.eps)).astype(w.dtype)


def _trainable_view(params, adapter: LoraAdapter | None, mode: str):
    """Flat name->array view of whatever the mode updates (arrays shared)."""
    view: dict[str, np.ndarray] = {}
    if mode == "full":
        view.update(params)
    if adapter is not None:
        for name, (a, b) in adapter.matrices.items():
            view[name + ".lora_A"] = a
            view[name + ".lora_B"] = b
    return view


def train(
    params: dict[str, np.ndarray],
    config: ModelConfig,
    dataset: TrajectoryDataset,
    vocab: Vocabulary,
    tc: TrainConfig,
    adapter: LoraAdapter | None = None,
):
    """Train in place; returns (params, adapter, per-epoch loss history in nats/token).

    Each epoch re-permutes visit order per `permute_mode`, shuffles, batches,
    and takes one Adam step per batch. Fully deterministic given the seed.
    """
    base = []
    for i, traj in enumerate(dataset.trajectories):
        seq = encode_trajectory(traj, vocab)
        if len(seq) > config.max_seq_len:
            tid = traj.meta if traj.meta is not None else str(i)
            raise SequenceTooLong(
                f"trajectory {tid}: encoded length {len(seq)} exceeds {config.max_seq_len}"
            )
        base.append(seq)

    permute_rng = np.random.default_rng([tc.seed, 1])
    shuffle_rng = np.random.default_rng([tc.seed, 2])
    dropout_rng = np.random.default_rng([tc.seed, 3])

    sequences = list(base)
    if tc.permute_mode == "once":
        sequences = [permute_visits(s, vocab, permute_rng) for s in base]

    opt = AdamState(tc)
    history: list[float] = []
    for _epoch in range(tc.epochs):
        if tc.permute_mode == "per-epoch":
            sequences = [permute_visits(s, vocab, permute_rng) for s in base]
        order = shuffle_rng.permutation(len(sequences))
        total_nll = 0.0
        total_pred = 0
        for start in range(0, len(order), tc.batch_size):
            batch = [sequences[k] for k in order[start : start + tc.batch_size]]
            loss, grads = loss_and_grad(
                params, config, batch, adapter=adapter, mode=tc.mode, lora_rng=dropout_rng
            )
            n_pred = sum(len(s) - 1 for s in batch)
            total_nll += loss * n_pred
            total_pred += n_pred
            opt.step(_trainable_view(params, adapter, tc.mode), grads)
        history.append(total_nll / total_pred)
    return params, adapter, history
