"""Gumbel noise, tempered softmax and the relaxed mask update used in training."""

from dataclasses import dataclass

import numpy as np

from vardfs import diffcore as dc
from vardfs.diffcore import Tensor
from vardfs.errors import ConfigError, DegenerateError, ExhaustedBudgetError


def make_rng(seed):
    """Seeded PCG64 generator; the same seed always yields the same stream."""
    return np.random.default_rng(np.uint64(seed))


_U_SCALE = 2.0 ** -53


def sample_gumbel(shape, rng):
    """I.i.d. standard Gumbel draws, -log(-log(u)) with u strictly inside (0, 1)."""
    if np.ndim(shape) == 0 and shape < 1:
        raise ValueError("sample_gumbel needs at least one draw")
    # midpoints of a 2**53 grid never hit 0 or 1
    u = (rng.integers(0, 2 ** 53, size=shape, dtype=np.int64) + 0.5) * _U_SCALE
    return -np.log(-np.log(u))


@dataclass
class TemperatureSchedule:
    """Non-increasing temperatures; epochs are spread evenly across ``values``."""

    values: tuple

    def __post_init__(self):
        self.values = tuple(float(v) for v in self.values)
        if not self.values:
            raise ConfigError("temperature schedule is empty")
        if any(v <= 0 for v in self.values):
            raise ConfigError("temperatures must be positive")
        if any(b > a for a, b in zip(self.values, self.values[1:])):
            raise ConfigError("temperature schedule must be non-increasing")

    @classmethod
    def geometric(cls, start=2.0, end=0.2, steps=10):
        if steps == 1:
            return cls((start,))
        return cls(tuple(np.geomspace(start, end, steps)))

    def at(self, epoch, n_epochs):
        if n_epochs <= 1:
            return self.values[0]
        idx = min(epoch * len(self.values) // n_epochs, len(self.values) - 1)
        return self.values[idx]


def one_hot_argmax(x, valid):
    """One-hot of the valid argmax along the last axis; ties go to the lowest index."""
    valid = np.broadcast_to(np.asarray(valid, dtype=bool), np.shape(x))
    if not np.all(valid.any(axis=-1)):
        raise DegenerateError("no valid entry to take the argmax over")
    idx = np.argmax(np.where(valid, x, -np.inf), axis=-1)
    out = np.zeros(np.shape(x))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out, idx


def tempered_softmax(logits, tau, valid=None):
    """softmax(logits / tau) over valid entries; tau == 0 gives the exact one-hot argmax."""
    logits = dc.as_tensor(logits)
    if valid is None:
        valid = np.ones(logits.shape, dtype=bool)
    if tau < 0:
        raise ValueError("temperature must be nonnegative")
    if tau == 0:
        return Tensor(one_hot_argmax(logits.data, valid)[0])
    return dc.masked_softmax(dc.scale(logits, 1.0 / tau), valid)


def relaxed_select(logits, hard_mask, selectable, tau, rng=None, gumbel=None):
    """One selection step of the relaxed trajectory.

    ``logits`` is a [b, n] tensor, ``hard_mask`` the current binary mask and
    ``selectable`` marks positions that are available and not yet chosen.
    A single Gumbel draw ``G`` feeds both the tempered and the zero-temperature
    softmax. Returns ``(m_relaxed, m_new, chosen)`` where ``m_relaxed`` is a
    tensor carrying gradients back to ``logits``.
    """
    logits = dc.as_tensor(logits)
    hard_mask = np.asarray(hard_mask, dtype=np.float64)
    selectable = np.asarray(selectable, dtype=bool)
    if not np.all(selectable.any(axis=-1)):
        raise ExhaustedBudgetError("no selectable feature left in some row")
    if gumbel is None:
        gumbel = sample_gumbel(logits.shape, rng)
    perturbed = dc.add(logits, gumbel)
    hard, chosen = one_hot_argmax(perturbed.data, selectable)
    soft = tempered_softmax(perturbed, tau, selectable)
    m_relaxed = dc.maximum(Tensor(hard_mask), soft)
    m_new = np.maximum(hard_mask, hard)
    return m_relaxed, m_new, chosen
