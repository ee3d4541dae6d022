"""Federated learning engine.

The local model is a two-layer perceptron (tanh hidden layer, linear output)
that regresses ``(normalized MCS index, power fraction)`` from the four link
features ``[snr_db, interference_db, load, speed_mps]``. Parameters live in
one flat vector laid out as ``[W1 (hidden x 4), b1, W2 (2 x hidden), b2]``.

Secure aggregation uses pairwise additive masks in the ring of integers
modulo ``2**128``. Updates are pre-scaled by their FedAvg weight and encoded
as fixed point with ``FRAC_BITS`` fractional bits, so masks cancel exactly
and the aggregator only ever handles masked ring elements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DivergenceError, DomainError, DropoutError, IoError, NoAggregatorError, ParseError

FEATURE_DIM = 4
LABEL_DIM = 2
HIDDEN = 16
DP_DELTA = 1e-5

# fixed input standardization, not learned
FEATURE_CENTER = np.array([12.5, -95.0, 0.5, 7.5])
FEATURE_SCALE = np.array([17.5, 15.0, 0.5, 7.5])

RING_BITS = 128
RING = 1 << RING_BITS
HALF_RING = 1 << (RING_BITS - 1)
FRAC_BITS = 80


def param_dim(feature_dim: int = FEATURE_DIM, hidden: int = HIDDEN, label_dim: int = LABEL_DIM) -> int:
    return (feature_dim + 1) * hidden + (hidden + 1) * label_dim


PARAM_DIM = param_dim()


def unpack(w: np.ndarray):
    h, f, l = HIDDEN, FEATURE_DIM, LABEL_DIM
    i = 0
    W1 = w[i:i + h * f].reshape(h, f); i += h * f
    b1 = w[i:i + h]; i += h
    W2 = w[i:i + l * h].reshape(l, h); i += l * h
    b2 = w[i:i + l]
    return W1, b1, W2, b2


def pack(W1, b1, W2, b2) -> np.ndarray:
    return np.concatenate([np.ravel(W1), np.ravel(b1), np.ravel(W2), np.ravel(b2)]).astype(float)


def init_params(rng: np.random.Generator, scale: float = 0.1) -> np.ndarray:
    """Small random hidden weights, zero output bias."""
    W1 = rng.normal(0.0, scale, size=(HIDDEN, FEATURE_DIM))
    b1 = np.zeros(HIDDEN)
    W2 = rng.normal(0.0, scale, size=(LABEL_DIM, HIDDEN))
    b2 = np.zeros(LABEL_DIM)
    return pack(W1, b1, W2, b2)


def _normalize(X: np.ndarray) -> np.ndarray:
    return (np.asarray(X, dtype=float) - FEATURE_CENTER) / FEATURE_SCALE


def predict(w: np.ndarray, X: np.ndarray) -> np.ndarray:
    W1, b1, W2, b2 = unpack(w)
    H = np.tanh(_normalize(X) @ W1.T + b1)
    return H @ W2.T + b2


def local_loss(w: np.ndarray, dataset) -> float:
    """Mean squared error over rows and label components."""
    X, Y = _xy(dataset)
    r = predict(w, X) - Y
    return float(np.mean(r * r))


def local_grad(w: np.ndarray, batch) -> np.ndarray:
    """Analytic gradient of the batch MSE with respect to the flat parameters."""
    X, Y = _xy(batch)
    W1, b1, W2, b2 = unpack(w)
    Xn = _normalize(X)
    H = np.tanh(Xn @ W1.T + b1)
    out = H @ W2.T + b2
    dout = 2.0 * (out - Y) / out.size
    gW2 = dout.T @ H
    gb2 = dout.sum(axis=0)
    dpre = (dout @ W2) * (1.0 - H * H)
    gW1 = dpre.T @ Xn
    gb1 = dpre.sum(axis=0)
    return pack(gW1, gb1, gW2, gb2)


def _xy(data):
    if isinstance(data, tuple):
        X, Y = data
    else:
        X, Y = data.features, data.labels
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim == 1:
        X, Y = X[None, :], Y[None, :]
    if len(X) == 0:
        raise DomainError("empty dataset")
    return X, Y


def local_train(W_t: np.ndarray, dataset, epochs: int, lr: float, batch_size: int,
                rng: np.random.Generator) -> np.ndarray:
    """Run ``epochs`` of shuffled mini-batch SGD from ``W_t``; return ``w_final - W_t``."""
    if epochs < 1:
        raise DomainError(f"epochs must be >= 1, got {epochs}")
    if lr < 0:
        raise DomainError(f"learning rate must be non-negative, got {lr}")
    X, Y = _xy(dataset)
    n = len(X)
    w = np.array(W_t, dtype=float, copy=True)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            w -= lr * local_grad(w, (X[idx], Y[idx]))
        loss = local_loss(w, (X, Y))
        if not math.isfinite(loss) or not np.all(np.isfinite(w)):
            raise DivergenceError(f"local loss became {loss}; learning rate {lr} too large")
    return w - W_t


# --------------------------------------------------------------------------
# Differential privacy

def gaussian_sigma(epsilon: float, clip: float, delta: float = DP_DELTA) -> float:
    """Per-coordinate std of the Gaussian mechanism for L2 sensitivity ``clip``."""
    if not epsilon > 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    if not clip > 0:
        raise DomainError(f"clip norm must be positive, got {clip}")
    if math.isinf(epsilon):
        return 0.0
    return clip * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def clip_update(delta_w: np.ndarray, clip: float) -> np.ndarray:
    norm = float(np.linalg.norm(delta_w))
    if norm <= clip:
        return np.array(delta_w, dtype=float, copy=True)
    return delta_w * (clip / norm)


def add_dp_noise(delta_w: np.ndarray, epsilon_round: float, clip: float,
                 rng: np.random.Generator, delta: float = DP_DELTA) -> np.ndarray:
    """Clip to ``clip`` in L2, then add Gaussian noise; ``epsilon_round=inf`` disables noise."""
    sigma = gaussian_sigma(epsilon_round, clip, delta)
    clipped = clip_update(delta_w, clip)
    if sigma == 0.0:
        return clipped
    return clipped + rng.normal(0.0, sigma, size=clipped.shape)


@dataclass
class PrivacyAccountant:
    """Basic-composition budget tracker.

    A device whose next spend would exceed ``epsilon_max`` is excluded for
    the rest of the run instead of overspending.
    """

    epsilon_max: float
    spent: dict[int, float] = field(default_factory=dict)
    excluded: set[int] = field(default_factory=set)

    def can_participate(self, device_id: int) -> bool:
        return device_id not in self.excluded

    def spend(self, device_id: int, epsilon_round: float) -> bool:
        if device_id in self.excluded:
            return False
        new = self.spent.get(device_id, 0.0) + epsilon_round
        # float accumulation of e.g. 10 x 0.1 must still admit the last round
        if new > self.epsilon_max * (1.0 + 1e-12):
            self.excluded.add(device_id)
            return False
        self.spent[device_id] = min(new, self.epsilon_max)
        return True

    def epsilon_spent(self, device_id: int) -> float:
        return self.spent.get(device_id, 0.0)


def spend_privacy(acct: PrivacyAccountant, device_id: int, epsilon_round: float) -> bool:
    """Charge one round; False means the device is (now) excluded."""
    return acct.spend(device_id, epsilon_round)


# --------------------------------------------------------------------------
# Secure aggregation

def encode_fixed(values: np.ndarray, frac_bits: int = FRAC_BITS) -> list[int]:
    """Encode floats as ring elements ``round(v * 2**frac_bits) mod 2**128``."""
    scaled = np.rint(np.asarray(values, dtype=float) * float(2 ** frac_bits))
    if not np.all(np.isfinite(scaled)):
        raise DomainError("cannot encode non-finite update")
    out = []
    for x in scaled:
        q = int(x)
        if not -HALF_RING <= q < HALF_RING:
            raise OverflowError("update magnitude exceeds the fixed-point range")
        out.append(q % RING)
    return out


def decode_fixed(ring_values: Iterable[int], frac_bits: int = FRAC_BITS) -> np.ndarray:
    denom = 1 << frac_bits
    out = []
    for v in ring_values:
        v %= RING
        if v >= HALF_RING:
            v -= RING
        out.append(v / denom)  # int / int is correctly rounded
    return np.array(out, dtype=float)


def ring_sum(vectors: Sequence[Sequence[int]]) -> list[int]:
    """Coordinate-wise sum modulo ``2**128``."""
    if not vectors:
        return []
    acc = [0] * len(vectors[0])
    for vec in vectors:
        for i, x in enumerate(vec):
            acc[i] += x
    return [a % RING for a in acc]


@dataclass(frozen=True)
class MaskedUpdate:
    device_id: int
    values: tuple[int, ...]  # ring elements
    weight: float  # |D_k|
    cohort: frozenset[int]  # every device masked together with this one


def weighted_terms(updates) -> list[tuple[int, np.ndarray, float]]:
    """Pre-scale each update by ``|D_k| / sum |D_j|`` (sorted by device id)."""
    ups = sorted(updates, key=lambda u: u[0])
    total = math.fsum(u[2] for u in ups)
    if not total > 0:
        raise DomainError("total weight must be positive")
    return [(k, np.asarray(dw, dtype=float) * (wk / total), wk) for k, dw, wk in ups]


def _pair_masks(n: int, dim: int, rng: np.random.Generator) -> list[list[int]]:
    """Net mask per position: ``sum_{j>i} m_ij - sum_{j<i} m_ji`` (mod ring).

    Each 128-bit mask is drawn as four 32-bit limbs; limb sums are kept in
    int64 and only reassembled into Python ints once per device.
    """
    acc = np.zeros((n, dim, 4), dtype=np.int64)
    for i in range(n - 1):
        m = rng.integers(0, 1 << 32, size=(n - i - 1, dim, 4), dtype=np.int64)
        acc[i] += m.sum(axis=0)
        acc[i + 1:] -= m
    shifts = [1 << (32 * l) for l in range(4)]
    nets = []
    for i in range(n):
        limbs = acc[i].tolist()
        nets.append([sum(int(c) * s for c, s in zip(row, shifts)) % RING for row in limbs])
    return nets


def mask_updates(updates, rng: np.random.Generator) -> list[MaskedUpdate]:
    """Mask one cluster's ``(device_id, noisy_update, |D_k|)`` triples.

    For every pair ``i < j`` (by device id) a shared mask ``m_ij`` is drawn
    from ``rng``; device ``i`` adds it and device ``j`` subtracts it. A
    single update passes through unmasked.
    """
    terms = weighted_terms(updates)
    if not terms:
        raise DomainError("no updates to mask")
    ids = frozenset(k for k, _, _ in terms)
    encoded = [encode_fixed(v) for _, v, _ in terms]
    if len(terms) == 1:
        k, _, wk = terms[0]
        return [MaskedUpdate(k, tuple(encoded[0]), wk, ids)]
    nets = _pair_masks(len(terms), len(encoded[0]), rng)
    out = []
    for (k, _, wk), q, m in zip(terms, encoded, nets):
        out.append(MaskedUpdate(k, tuple((a + b) % RING for a, b in zip(q, m)), wk, ids))
    return out


def secure_aggregate(masked: Sequence[MaskedUpdate]) -> tuple[np.ndarray, float]:
    """Return the FedAvg-weighted update and total weight from masked values only."""
    if not masked:
        raise DomainError("no masked updates")
    cohort = masked[0].cohort
    present = {m.device_id for m in masked}
    missing = cohort - present
    if missing:
        raise DropoutError(missing)
    ordered = sorted(masked, key=lambda m: m.device_id)
    total = math.fsum(m.weight for m in ordered)
    return decode_fixed(ring_sum([m.values for m in ordered])), total


def global_combine(W_t: np.ndarray, cluster_deltas: Sequence[np.ndarray], n_aggregators: int | None = None) -> np.ndarray:
    """``W_t + sum(deltas) / divisor``; divisor is the number of deltas unless given."""
    if len(cluster_deltas) == 0:
        raise NoAggregatorError("no live aggregator produced an update")
    divisor = len(cluster_deltas) if n_aggregators is None else n_aggregators
    total = np.zeros_like(W_t, dtype=float)
    for d in cluster_deltas:
        total = total + d
    return W_t + total / divisor


# --------------------------------------------------------------------------
# Evaluation

def mcs_index_from_output(y: np.ndarray, n_entries: int) -> np.ndarray:
    idx = np.floor(np.asarray(y, dtype=float) * (n_entries - 1) + 0.5)
    idx = np.nan_to_num(idx, nan=0.0, posinf=n_entries - 1, neginf=0.0)
    return np.clip(idx, 0, n_entries - 1).astype(int)


def model_accuracy(w: np.ndarray, validation, n_entries: int) -> float:
    """Fraction of rows whose predicted MCS index equals the oracle index."""
    X, Y = _xy(validation)
    pred = mcs_index_from_output(predict(w, X)[:, 0], n_entries)
    truth = mcs_index_from_output(Y[:, 0], n_entries)
    return float(np.mean(pred == truth))


# --------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_MAGIC = b"AITPMODL"


def save_checkpoint(path, w: np.ndarray) -> None:
    w = np.asarray(w, dtype="<f8")
    try:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(int(w.size).to_bytes(8, "little"))
            fh.write(w.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            head = fh.read(16)
            body = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(head) != 16 or head[:8] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not a model checkpoint")
    n = int.from_bytes(head[8:], "little")
    if len(body) != 8 * n:
        raise ParseError(f"{path}: expected {n} values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").astype(float)
