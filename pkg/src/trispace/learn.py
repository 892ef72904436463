"""Self-supervised objective for the temporal encoder, gradients and Adam.

The embedding loss compares each trajectory's embedding/input cosine with
that of a partner trajectory given by an explicit pairing permutation.  The
structure loss weights each embedding's squared norm by its summed distance
to every other node in spatial-embedding space.  Spatial embeddings enter as
constants: kNN selection is discrete, so no gradient flows through the graph.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .sfm import DEFAULT_K, DEFAULT_STEPS, spatial_embedding
from .tlm import TemporalEncoder
from .trajio import TemporalTensor

logger = logging.getLogger(__name__)

DEFAULT_ETA = 0.01
DEFAULT_LR = 1e-4
DEFAULT_EPOCHS = 100


class TrainingDiverged(RuntimeError):
    pass


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def row_cosines(E, X) -> torch.Tensor:
    """Cosine similarity between matching flattened rows; zero-norm rows give 0."""
    E, X = _as_tensor(E), _as_tensor(X)
    e, x = E.reshape(len(E), -1), X.reshape(len(X), -1)
    dot = (e * x).sum(dim=1)
    norm = e.norm(dim=1) * x.norm(dim=1)
    safe = torch.where(norm > 0, norm, torch.ones_like(norm))
    return torch.where(norm > 0, dot / safe, torch.zeros_like(dot))


def shift_pairing(n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Partner map pairing each element of a shuffled order with its successor."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    pairing = np.empty(n, dtype=np.intp)
    pairing[order] = np.roll(order, -1)
    return pairing


def loss_embedding(E_T, X_T, pairing) -> torch.Tensor:
    """Mean squared gap between each row's cosine and its partner's cosine."""
    E_T, X_T = _as_tensor(E_T), _as_tensor(X_T)
    if E_T.shape != X_T.shape:
        raise ValueError(f"shape mismatch {tuple(E_T.shape)} vs {tuple(X_T.shape)}")
    n = len(E_T)
    if n == 0:
        raise ValueError("empty batch")
    pairing = np.asarray(pairing, dtype=np.intp)
    if sorted(pairing.tolist()) != list(range(n)):
        raise ValueError("pairing must be a permutation of the batch")
    cos = row_cosines(E_T, X_T)
    return ((cos - cos[torch.from_numpy(pairing)]) ** 2).mean()


def structure_weights(E_S) -> np.ndarray:
    """w_i = sum_j ||E_S_i - E_S_j||_2."""
    from .sfm import distance_matrix

    E_S = np.asarray(E_S, dtype=np.float64)
    if len(E_S) < 2:
        return np.zeros(len(E_S))
    return distance_matrix(E_S).sum(axis=1)


def loss_structure(E_T, E_S=None, weights=None) -> torch.Tensor:
    """Mean over rows of ``w_i * ||E_T_i||^2`` (weights from ``E_S`` unless given)."""
    E_T = _as_tensor(E_T)
    if weights is None:
        E_S = np.asarray(E_S, dtype=np.float64)
        if len(E_S) != len(E_T):
            raise ValueError(f"row count mismatch {len(E_T)} vs {len(E_S)}")
        weights = structure_weights(E_S)
    w = _as_tensor(weights)
    if len(w) != len(E_T):
        raise ValueError(f"row count mismatch {len(E_T)} vs {len(w)}")
    sq = (E_T.reshape(len(E_T), -1) ** 2).sum(dim=1)
    return (w * sq).mean()


def loss_structure_smooth(E_T, E_S) -> torch.Tensor:
    """Graph-smoothness alternative: affinity-weighted squared gaps between embeddings.

    Affinity is ``1 / (1 + ||E_S_i - E_S_j||)``; normalised by ``N^2``.
    """
    from .sfm import distance_matrix

    E_T = _as_tensor(E_T)
    n = len(E_T)
    if n < 2:
        return E_T.sum() * 0.0
    aff = torch.from_numpy(1.0 / (1.0 + distance_matrix(E_S)))
    e = E_T.reshape(n, -1)
    sq = (e**2).sum(dim=1)
    d2 = (sq[:, None] + sq[None, :] - 2.0 * e @ e.T).clamp_min(0.0)
    return (aff * d2).sum() / n**2


def loss_total(l_e, l_s, eta: float = DEFAULT_ETA):
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    return l_e + eta * l_s


def backward(loss: torch.Tensor, params: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar loss with respect to named parameters.

    Parameters the loss does not depend on get exact zeros.
    """
    if not isinstance(loss, torch.Tensor) or not loss.requires_grad or loss.grad_fn is None:
        raise ValueError("loss was not computed from recorded tensors")
    if loss.numel() != 1:
        raise ValueError("loss must be a scalar")
    names = list(params)
    grads = torch.autograd.grad(loss, [params[k] for k in names], allow_unused=True)
    return {k: (torch.zeros_like(params[k]) if g is None else g) for k, g in zip(names, grads)}


@dataclass
class OptimState:
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: OptimState) -> None:
    """Bias-corrected Adam update applied in place."""
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        if not torch.isfinite(g).all():
            raise ValueError(f"non-finite gradient for {k}; step rejected")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    with torch.no_grad():
        for k, p in params.items():
            g = grads[k]
            if k not in state.m:
                state.m[k] = torch.zeros_like(p)
                state.v[k] = torch.zeros_like(p)
            m, v = state.m[k], state.v[k]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            p.sub_(state.lr * (m / bc1) / ((v / bc2).sqrt() + state.eps))


@dataclass
class TrainConfig:
    epochs: int = DEFAULT_EPOCHS
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eta: float = DEFAULT_ETA
    k: int = DEFAULT_K
    steps: int = DEFAULT_STEPS
    weight_mode: str = "distance"
    structure: str = "weighted_norm"  # or "smooth"
    patience: int = 10
    batch_size: int = 64
    graph_refresh: str = "epoch"  # or "step"
    seed: int = 0


@dataclass
class TrainResult:
    history: list[tuple[int, float, float]]
    best_epoch: int
    stopped_early: bool

    def to_csv(self, stream) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["epoch", "train_lse", "val_lse"])
        for e, tr, va in self.history:
            w.writerow([e, repr(tr), repr(va)])


def _structure_term(E_T, E_S, weights, cfg: TrainConfig):
    if cfg.structure == "smooth":
        return loss_structure_smooth(E_T, E_S)
    return loss_structure(E_T, weights=weights)


def _evaluate(E, X, attr, pairing, cfg: TrainConfig) -> float:
    E_S, _ = spatial_embedding(E, attr, cfg.k, cfg.steps, cfg.weight_mode)
    l_e = loss_embedding(E, X, pairing)
    l_s = _structure_term(E, E_S.values, structure_weights(E_S.values), cfg) if cfg.eta > 0 else 0.0
    return float(loss_total(l_e, l_s, cfg.eta))


def _length_batches(lengths: np.ndarray, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Minibatches of similar length (jittered sort, shuffled batch order).

    The encoder only runs each batch up to its longest member, so grouping
    by length avoids computing long mean-padded tails.
    """
    key = lengths * rng.uniform(0.85, 1.15, len(lengths))
    order = np.argsort(key, kind="stable")
    batches = [np.sort(order[i:i + size]) for i in range(0, len(order), size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def train_tlm(encoder: TemporalEncoder, train: TemporalTensor, train_attr: np.ndarray,
              val: TemporalTensor | None = None, val_attr: np.ndarray | None = None,
              cfg: TrainConfig | None = None) -> TrainResult:
    """Minimise the combined loss with minibatch Adam; restores the best-validation weights.

    Each epoch rebuilds the relation graph from the embeddings produced during
    the previous epoch (the initial encoding for epoch 1), then sweeps the
    shuffled training set once.  History row ``e`` holds the training loss on
    that snapshot and the validation loss after ``e`` epochs of updates.
    """
    cfg = cfg or TrainConfig()
    n = len(train)
    if n == 0:
        raise ValueError("empty training split")
    rng = np.random.default_rng(cfg.seed)
    eval_rng = np.random.default_rng([cfg.seed, 1])
    pair_train = shift_pairing(n, eval_rng)
    has_val = val is not None and len(val) > 0
    pair_val = shift_pairing(len(val), eval_rng) if has_val else None

    X = torch.from_numpy(train.values)
    M = torch.from_numpy(train.mask)
    params = encoder.named_trainable()
    state = OptimState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

    lengths = train.lengths
    E = encoder.encode(train)
    history: list[tuple[int, float, float]] = []
    best_val, best_epoch, best_state = math.inf, 0, None
    stopped_early = False

    for epoch in range(cfg.epochs + 1):
        E_S, _ = spatial_embedding(E, train_attr, cfg.k, cfg.steps, cfg.weight_mode)
        weights = structure_weights(E_S.values)
        l_e = float(loss_embedding(E, train.values, pair_train))
        l_s = float(_structure_term(E, E_S.values, weights, cfg)) if cfg.eta > 0 else 0.0
        train_lse = l_e + cfg.eta * l_s
        val_lse = _evaluate(encoder.encode(val), val.values, val_attr, pair_val, cfg) if has_val else train_lse
        history.append((epoch, train_lse, val_lse))
        logger.debug("epoch %d train %.6g val %.6g", epoch, train_lse, val_lse)
        if not (math.isfinite(train_lse) and math.isfinite(val_lse)):
            raise TrainingDiverged(f"loss became non-finite at epoch {epoch} (train={train_lse}, val={val_lse})")
        if val_lse < best_val:
            best_val, best_epoch = val_lse, epoch
            best_state = {k: v.detach().clone() for k, v in encoder.state_dict().items()}
        elif epoch - best_epoch >= cfg.patience:
            stopped_early = True
            break
        if epoch == cfg.epochs:
            break

        E_next = np.empty_like(E)
        for idx in _length_batches(lengths, cfg.batch_size, rng):
            it = torch.from_numpy(idx)
            Eb = encoder.forward_bucketed(X[it], M[it])
            loss = loss_embedding(Eb, X[it], shift_pairing(len(idx), rng))
            if cfg.eta > 0:
                if cfg.graph_refresh == "step" and len(idx) > 1:
                    S_b, _ = spatial_embedding(Eb.detach().numpy(), train_attr[idx], cfg.k, cfg.steps, cfg.weight_mode)
                    l_s = _structure_term(Eb, S_b.values, structure_weights(S_b.values), cfg)
                else:
                    l_s = _structure_term(Eb, E_S.values[idx], weights[idx], cfg)
                loss = loss_total(loss, l_s, cfg.eta)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite batch loss at epoch {epoch + 1}")
            adam_step(params, backward(loss, params), state)
            E_next[idx] = Eb.detach().numpy()
        E = E_next

    if best_state is not None:
        encoder.load_state_dict(best_state)
    return TrainResult(history, best_epoch, stopped_early)
