"""Training objectives and loops.

The contrastive loss scores each true future frame z_{t+k} against
within-utterance distractors via bilinear prediction heads; the cluster
loss is frame-level cross-entropy of the logits layer on mean-normalized
context vectors; the regularized total is ``cluster + reg_lambda * cpc``.
Both loops use Adam (beta1=0.9, beta2=0.999, eps=1e-8) and early stopping
on a seeded held-out split of the utterances.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .cluster import mean_normalize
from .corpus import SignalSequence
from .util import derive_seed


class UtteranceTooShortError(ValueError):
    """Utterance has too few frames for the configured future steps."""


class NonFiniteGradientError(FloatingPointError):
    """A gradient tensor contains NaN or infinity; training must abort."""


@dataclass(frozen=True)
class CPCConfig:
    future_steps: int = 4
    num_negatives: int = 8
    seed: int = 0
    within_utterance: bool = True  # fixed; negatives always come from the same utterance

    def __post_init__(self) -> None:
        if self.future_steps < 1:
            raise ValueError("future_steps must be >= 1")
        if self.num_negatives < 1:
            raise ValueError("num_negatives must be >= 1")
        if not self.within_utterance:
            raise ValueError("only within-utterance negative sampling is supported")


@dataclass(frozen=True)
class TrainConfig:
    reg_lambda: float = 1e-4
    epochs: int = 40
    patience: int = 8
    learning_rate: float = 1e-2
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# --- losses -------------------------------------------------------------------


@dataclass
class CpcGrads:
    d_z: np.ndarray
    d_c: np.ndarray
    d_heads: list[np.ndarray]


def cpc_loss(
    z: np.ndarray,
    c: np.ndarray,
    heads: list[np.ndarray],
    cfg: CPCConfig,
    seed=None,
) -> tuple[float, CpcGrads]:
    """Contrastive future-prediction loss and its exact gradients.

    For each valid t and each step k the candidate set is the positive
    z_{t+k} followed by ``num_negatives`` indices drawn uniformly (with
    replacement) from the utterance excluding t+k; the score of candidate
    z~ is z~^T W_k c_t and the per-(t, k) loss is -log softmax at the
    positive.  The reported loss is the mean over all (t, k).  Negative
    draws consume the RNG in (t outer, k inner) order.
    """
    z = np.asarray(z, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    t_total = z.shape[0]
    k_steps = cfg.future_steps
    if t_total <= k_steps:
        raise UtteranceTooShortError(
            f"utterance too short for K: {t_total} frames, future_steps={k_steps}"
        )
    if c.shape[0] != t_total:
        raise ValueError("Z and C must have the same number of rows")

    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    n_pos = t_total - k_steps
    # one vectorized draw is stream-equivalent to per-(t, k) draws in
    # (t outer, k inner) order, which is the documented sampling order
    draws = rng.integers(0, t_total - 1, size=(n_pos, k_steps, cfg.num_negatives))

    d_z = np.zeros_like(z)
    d_c = np.zeros_like(c)
    d_heads = []
    count = n_pos * k_steps
    loss = 0.0
    ts = np.arange(n_pos)
    for k in range(1, k_steps + 1):
        pos = ts + k
        negs = np.where(draws[:, k - 1] < pos[:, None], draws[:, k - 1], draws[:, k - 1] + 1)
        cand = np.concatenate([pos[:, None], negs], axis=1)   # (n_pos, 1 + N)
        w_k = heads[k - 1]
        u = c[:n_pos] @ w_k.T                                  # (n_pos, F_z)
        z_cand = z[cand]                                       # (n_pos, 1 + N, F_z)
        scores = np.einsum("tjf,tf->tj", z_cand, u)
        m = scores.max(axis=1, keepdims=True)
        exp = np.exp(scores - m)
        denom = exp.sum(axis=1)
        loss += float((np.log(denom) + m[:, 0] - scores[:, 0]).sum())
        d_s = exp / denom[:, None]
        d_s[:, 0] -= 1.0
        svec = np.einsum("tjf,tj->tf", z_cand, d_s)            # (n_pos, F_z)
        d_heads.append(svec.T @ c[:n_pos])
        d_c[:n_pos] += svec @ w_k
        np.add.at(d_z, cand.ravel(), (d_s[:, :, None] * u[:, None, :]).reshape(-1, z.shape[1]))

    inv = 1.0 / count
    d_z *= inv
    d_c *= inv
    for g in d_heads:
        g *= inv
    return loss * inv, CpcGrads(d_z=d_z, d_c=d_c, d_heads=d_heads)


@dataclass
class HucGrads:
    d_c_hat: np.ndarray
    d_logits_w: np.ndarray
    d_logits_b: np.ndarray


def huc_loss(
    c_hat: np.ndarray, labels: np.ndarray, logits_w: np.ndarray, logits_b: np.ndarray
) -> tuple[float, HucGrads]:
    """Per-frame mean cross-entropy of softmax(logits) against the labels."""
    c_hat = np.asarray(c_hat, dtype=np.float64)
    labels = np.asarray(labels)
    t_total = c_hat.shape[0]
    if len(labels) != t_total:
        raise ValueError(f"{len(labels)} labels for {t_total} frames")
    k = logits_w.shape[0]
    if t_total and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")

    scores = c_hat @ logits_w.T + logits_b      # (T, k)
    scores -= scores.max(axis=1, keepdims=True)
    exp = np.exp(scores)
    probs = exp / exp.sum(axis=1, keepdims=True)
    idx = np.arange(t_total)
    loss = float(-np.log(probs[idx, labels]).mean())

    d_scores = probs.copy()
    d_scores[idx, labels] -= 1.0
    d_scores /= t_total
    return loss, HucGrads(
        d_c_hat=d_scores @ logits_w,
        d_logits_w=d_scores.T @ c_hat,
        d_logits_b=d_scores.sum(axis=0),
    )


def reg_loss(huc: float, cpc: float, reg_lambda: float) -> float:
    """Regularized total: cluster loss plus reg_lambda times the contrastive loss."""
    if reg_lambda < 0:
        raise ValueError("reg_lambda must be >= 0")
    return huc + reg_lambda * cpc


# --- optimizer ----------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, arrays: list[np.ndarray]) -> "AdamState":
        return cls(m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays])


def adam_step(
    arrays: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float
) -> tuple[list[np.ndarray], AdamState]:
    """One Adam update over a flat list of tensors."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                f"non-finite gradient (shape {g.shape}); aborting training"
            )
    t = state.step + 1
    m = [ADAM_BETA1 * mi + (1 - ADAM_BETA1) * g for mi, g in zip(state.m, grads)]
    v = [ADAM_BETA2 * vi + (1 - ADAM_BETA2) * g * g for vi, g in zip(state.v, grads)]
    bias1 = 1 - ADAM_BETA1**t
    bias2 = 1 - ADAM_BETA2**t
    new = [
        p - lr * (mi / bias1) / (np.sqrt(vi / bias2) + ADAM_EPS)
        for p, mi, vi in zip(arrays, m, v)
    ]
    return new, AdamState(m=m, v=v, step=t)


def optimizer_step(
    params: enc.EncoderParams, grads: enc.EncoderParams, state: AdamState, lr: float
) -> tuple[enc.EncoderParams, AdamState]:
    new_arrays, new_state = adam_step(enc.param_arrays(params), enc.param_arrays(grads), state, lr)
    return enc.replace_arrays(params, new_arrays), new_state


# --- early stopping -----------------------------------------------------------


class EarlyStopper:
    """Stop after `patience` consecutive epochs without strict improvement."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record an epoch's validation loss; return True when training should stop."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# --- training loops -----------------------------------------------------------


@dataclass
class TrainResult:
    params: enc.EncoderParams
    history: list[dict]
    cpc_evaluations: int = 0


def _split_validation(corpus: list[SignalSequence], seed: int) -> tuple[list, list]:
    """Seeded 10% held-out split (at least one utterance each side when possible)."""
    n = len(corpus)
    order = np.random.default_rng(derive_seed(seed, "val-split")).permutation(n)
    n_val = min(max(1, round(0.1 * n)), n - 1) if n >= 2 else 0
    val_idx = set(order[:n_val].tolist())
    train = [corpus[i] for i in range(n) if i not in val_idx]
    val = [corpus[i] for i in range(n) if i in val_idx]
    return train, val if val else train


def _copy_params(params: enc.EncoderParams) -> enc.EncoderParams:
    return enc.replace_arrays(params, [a.copy() for a in enc.param_arrays(params)])


def _write_log(path, history) -> None:
    if path is None:
        return
    with open(path, "w", encoding="utf-8") as fh:
        for record in history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def train_cpc(
    corpus: list[SignalSequence],
    arch: enc.EncoderArch,
    cpc_cfg: CPCConfig,
    train_cfg: TrainConfig,
    num_classes: int = 1,
    log_path=None,
) -> TrainResult:
    """Contrastive pretraining with early stopping on held-out utterances.

    Returns the parameters achieving the lowest recorded validation loss.
    ``num_classes`` only sizes the (untrained) logits layer so checkpoints
    are shape-complete; it receives no gradient here.
    """
    params = enc.init_params(
        arch, derive_seed(train_cfg.seed, "init"), future_steps=cpc_cfg.future_steps,
        num_classes=num_classes,
    )
    if train_cfg.epochs == 0:
        return TrainResult(params=params, history=[])

    train_set, val_set = _split_validation(corpus, train_cfg.seed)

    def utterance_loss(p, sig, seed, with_grads):
        z, c, caches = enc.forward_with_cache(p, sig)
        loss, grads = cpc_loss(z, c, p.heads, cpc_cfg, seed=seed)
        if not with_grads:
            return loss, None
        full = enc.backward_from_cache(p, z, caches, (grads.d_z, grads.d_c))
        full.heads = grads.d_heads
        return loss, full

    def eval_split(p, split, tag):
        return float(
            np.mean([
                utterance_loss(p, sig, derive_seed(cpc_cfg.seed, tag, sig.utterance_id), False)[0]
                for sig in split
            ])
        )

    history = [
        {
            "epoch": 0,
            "train_loss": eval_split(params, train_set, "train"),
            "val_loss": eval_split(params, val_set, "val"),
            "lr": train_cfg.learning_rate,
            "seconds": 0.0,
        }
    ]
    state = AdamState.zeros(enc.param_arrays(params))
    stopper = EarlyStopper(train_cfg.patience)
    best_params = _copy_params(params)

    for epoch in range(1, train_cfg.epochs + 1):
        started = time.perf_counter()
        order = np.random.default_rng(derive_seed(train_cfg.seed, "order", epoch)).permutation(
            len(train_set)
        )
        epoch_losses = []
        for lo in range(0, len(order), train_cfg.batch_size):
            batch = [train_set[i] for i in order[lo : lo + train_cfg.batch_size]]
            grad_arrays = None
            for sig in batch:
                seed = derive_seed(cpc_cfg.seed, "train", epoch, sig.utterance_id)
                loss, grads = utterance_loss(params, sig, seed, True)
                epoch_losses.append(loss)
                arrays = enc.param_arrays(grads)
                grad_arrays = (
                    arrays if grad_arrays is None else [a + b for a, b in zip(grad_arrays, arrays)]
                )
            grad_arrays = [g / len(batch) for g in grad_arrays]
            new_arrays, state = adam_step(
                enc.param_arrays(params), grad_arrays, state, train_cfg.learning_rate
            )
            params = enc.replace_arrays(params, new_arrays)

        val_loss = eval_split(params, val_set, "val")
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                "val_loss": val_loss,
                "lr": train_cfg.learning_rate,
                "seconds": time.perf_counter() - started,
            }
        )
        stop = stopper.update(epoch, val_loss)
        if stopper.best_epoch == epoch:
            best_params = _copy_params(params)
        if stop:
            break

    _write_log(log_path, history)
    return TrainResult(params=best_params, history=history)


def train_huc(
    corpus: list[SignalSequence],
    init: enc.EncoderParams,
    labels_by_utterance: dict[str, np.ndarray],
    train_cfg: TrainConfig,
    cpc_cfg: CPCConfig,
    log_path=None,
) -> TrainResult:
    """Train the full model on pseudo-labels with the regularized loss.

    Each utterance's context vectors are mean-normalized before the logits
    layer; the contrastive term is weighted by ``train_cfg.reg_lambda`` and
    is never evaluated when the weight is zero (``cpc_evaluations`` counts
    the calls).  Per-epoch records carry the huc/cpc components so the
    identity total = huc + reg_lambda * cpc is checkable from the log.
    """
    for sig in corpus:
        labels = labels_by_utterance.get(sig.utterance_id)
        if labels is None:
            raise ValueError(f"no labels for utterance {sig.utterance_id}")
        expected = init.arch.num_frames(len(sig.samples))
        if len(labels) != expected:
            raise ValueError(
                f"labels for {sig.utterance_id} have {len(labels)} frames, encoder yields {expected}"
            )

    params = _copy_params(init)
    if train_cfg.epochs == 0:
        return TrainResult(params=params, history=[])

    lam = train_cfg.reg_lambda
    train_set, val_set = _split_validation(corpus, train_cfg.seed)
    cpc_calls = 0

    def utterance_loss(p, sig, seed, with_grads):
        nonlocal cpc_calls
        z, c, caches = enc.forward_with_cache(p, sig)
        c_hat = mean_normalize(c)
        labels = labels_by_utterance[sig.utterance_id]
        h_loss, h_grads = huc_loss(c_hat, labels, p.logits_w, p.logits_b)
        if lam > 0:
            cpc_calls += 1
            c_loss, c_grads = cpc_loss(z, c, p.heads, cpc_cfg, seed=seed)
        else:
            c_loss, c_grads = 0.0, None
        total = reg_loss(h_loss, c_loss, lam)
        if not with_grads:
            return total, h_loss, c_loss, None
        # d/dc of the mean-normalized cross-entropy term
        d_c = h_grads.d_c_hat - h_grads.d_c_hat.mean(axis=0, keepdims=True)
        d_z = np.zeros_like(z)
        if c_grads is not None:
            d_c = d_c + lam * c_grads.d_c
            d_z = lam * c_grads.d_z
        full = enc.backward_from_cache(p, z, caches, (d_z, d_c))
        if c_grads is not None:
            full.heads = [lam * g for g in c_grads.d_heads]
        full.logits_w = h_grads.d_logits_w
        full.logits_b = h_grads.d_logits_b
        return total, h_loss, c_loss, full

    def eval_split(p, split, tag):
        parts = [
            utterance_loss(p, sig, derive_seed(cpc_cfg.seed, tag, sig.utterance_id), False)[1:3]
            for sig in split
        ]
        mean_h = float(np.mean([h for h, _ in parts]))
        mean_c = float(np.mean([c for _, c in parts]))
        return reg_loss(mean_h, mean_c, lam), mean_h, mean_c

    t0, h0, c0 = eval_split(params, train_set, "train")
    v0 = eval_split(params, val_set, "val")[0]
    history = [
        {
            "epoch": 0,
            "train_loss": t0,
            "train_huc": h0,
            "train_cpc": c0,
            "val_loss": v0,
            "lr": train_cfg.learning_rate,
            "seconds": 0.0,
        }
    ]
    state = AdamState.zeros(enc.param_arrays(params))
    stopper = EarlyStopper(train_cfg.patience)
    best_params = _copy_params(params)

    for epoch in range(1, train_cfg.epochs + 1):
        started = time.perf_counter()
        order = np.random.default_rng(derive_seed(train_cfg.seed, "order", epoch)).permutation(
            len(train_set)
        )
        hucs, cpcs = [], []
        for lo in range(0, len(order), train_cfg.batch_size):
            batch = [train_set[i] for i in order[lo : lo + train_cfg.batch_size]]
            grad_arrays = None
            for sig in batch:
                seed = derive_seed(cpc_cfg.seed, "train", epoch, sig.utterance_id)
                total, h_l, c_l, grads = utterance_loss(params, sig, seed, True)
                hucs.append(h_l)
                cpcs.append(c_l)
                arrays = enc.param_arrays(grads)
                grad_arrays = (
                    arrays if grad_arrays is None else [a + b for a, b in zip(grad_arrays, arrays)]
                )
            grad_arrays = [g / len(batch) for g in grad_arrays]
            new_arrays, state = adam_step(
                enc.param_arrays(params), grad_arrays, state, train_cfg.learning_rate
            )
            params = enc.replace_arrays(params, new_arrays)

        val_loss = eval_split(params, val_set, "val")[0]
        mean_huc = float(np.mean(hucs))
        mean_cpc = float(np.mean(cpcs))
        history.append(
            {
                "epoch": epoch,
                "train_loss": reg_loss(mean_huc, mean_cpc, lam),
                "train_huc": mean_huc,
                "train_cpc": mean_cpc,
                "val_loss": val_loss,
                "lr": train_cfg.learning_rate,
                "seconds": time.perf_counter() - started,
            }
        )
        stop = stopper.update(epoch, val_loss)
        if stopper.best_epoch == epoch:
            best_params = _copy_params(params)
        if stop:
            break

    _write_log(log_path, history)
    return TrainResult(params=best_params, history=history, cpc_evaluations=cpc_calls)
