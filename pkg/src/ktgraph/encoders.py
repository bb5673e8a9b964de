"""Per-event feature encoders: performance, interval timing, repeat flags,
and concept embeddings.

Each encoder maps a [B, N] slab of neighbor-window values to a flat
[(B*N), dim] tensor, with padded positions forced to exact zero rows so the
window length never leaks into downstream state. Single sequences are just
the B=1 case.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .graph import DAY_SECONDS, STUDENT

def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _flat_column(values):
    return T.constant(np.asarray(values, dtype=np.float64).reshape(-1, 1))


def _mask_rows(out, mask, dim):
    m = np.repeat(np.asarray(mask, dtype=np.float64).reshape(-1, 1), dim, axis=1)
    return T.mul(out, T.constant(m))


class PerformanceEncoder:
    """Affine map of the binary response scalar; shared by both towers."""

    def __init__(self, dim, rng, name="perf"):
        self.dim = dim
        self.weight = T.Parameter(f"{name}.weight", uniform_init(rng, (1, dim), 1))
        self.bias = T.Parameter(f"{name}.bias", np.zeros(dim))

    def parameters(self):
        return [self.weight, self.bias]

    def encode(self, responses, mask):
        """[B, N] {0,1} responses -> [(B*N), dim]; padded rows are zero."""
        out = T.add(T.matmul(_flat_column(responses), self.weight.value), self.bias.value)
        return _mask_rows(out, mask, self.dim)


class DualTimeEncoder:
    """Interval features with separate short/long branches around a threshold.

    Gaps are between consecutive valid positions of the window (the first
    valid position uses a zero gap) and are rescaled to log1p(days) before
    the branch affine; branch choice stays on the raw gap versus the
    threshold. A common affine over relu(branch) finishes the feature.
    """

    def __init__(self, dim, rng, threshold=DAY_SECONDS, dual=True, enabled=True,
                 name="time"):
        self.dim = dim
        self.threshold = threshold
        self.dual = dual
        self.enabled = enabled
        if not enabled:
            return
        self.w_short = T.Parameter(f"{name}.w_short", uniform_init(rng, (1, dim), 1))
        self.b_short = T.Parameter(f"{name}.b_short", np.zeros(dim))
        if dual:
            self.w_long = T.Parameter(f"{name}.w_long", uniform_init(rng, (1, dim), 1))
            self.b_long = T.Parameter(f"{name}.b_long", np.zeros(dim))
        self.w_common = T.Parameter(f"{name}.w_common", uniform_init(rng, (dim, dim), dim))
        self.b_common = T.Parameter(f"{name}.b_common", np.zeros(dim))

    def parameters(self):
        if not self.enabled:
            return []
        params = [self.w_short, self.b_short]
        if self.dual:
            params += [self.w_long, self.b_long]
        return params + [self.w_common, self.b_common]

    @staticmethod
    def gaps(timestamps, mask, as_of=None):
        """Per-position gaps within the valid suffix of each window row."""
        ts = np.asarray(timestamps, dtype=np.int64)
        m = np.asarray(mask, dtype=bool)
        if as_of is not None:
            limit = np.asarray(as_of, dtype=np.int64).reshape(-1, 1)
            if np.any(ts[m] >= np.broadcast_to(limit, ts.shape)[m]):
                raise ValueError("valid timestamps must be strictly before as_of")
        dt = np.zeros_like(ts, dtype=np.float64)
        both = m[:, 1:] & m[:, :-1]
        diffs = (ts[:, 1:] - ts[:, :-1]).astype(np.float64)
        if np.any(diffs[both] < 0):
            raise ValueError("non-ascending valid timestamps in neighbor window")
        dt[:, 1:][both] = diffs[both]
        return dt

    def encode(self, timestamps, mask, as_of=None):
        ts = np.atleast_2d(timestamps)
        m = np.atleast_2d(mask)
        if not self.enabled:
            return T.constant(np.zeros((ts.size, self.dim)))
        dt = self.gaps(ts, m, as_of)
        scaled = _flat_column(np.log1p(dt / DAY_SECONDS))
        short = T.add(T.matmul(scaled, self.w_short.value), self.b_short.value)
        if self.dual:
            long = T.add(T.matmul(scaled, self.w_long.value), self.b_long.value)
            pick = np.repeat((dt <= self.threshold).reshape(-1, 1).astype(np.float64),
                             self.dim, axis=1)
            branch = T.add(T.mul(short, T.constant(pick)),
                           T.mul(long, T.constant(1.0 - pick)))
        else:
            branch = short
        out = T.add(T.matmul(T.relu(branch), self.w_common.value), self.b_common.value)
        return _mask_rows(out, m, self.dim)


class MultisetIndicator:
    """Affine map of the repeat-link flag; one parameter pair for both sides."""

    def __init__(self, dim, rng, enabled=True, name="multiset"):
        self.dim = dim
        self.enabled = enabled
        self.weight = T.Parameter(f"{name}.weight", uniform_init(rng, (1, dim), 1))
        self.bias = T.Parameter(f"{name}.bias", np.zeros(dim))

    def parameters(self):
        return [self.weight, self.bias] if self.enabled else []

    def encode(self, flags, mask):
        flags = np.asarray(flags)
        if not self.enabled:
            return T.constant(np.zeros((flags.size, self.dim)))
        out = T.add(T.matmul(_flat_column(flags), self.weight.value), self.bias.value)
        return _mask_rows(out, mask, self.dim)


class ConceptEmbedding:
    """Lookup table shared between the two towers."""

    def __init__(self, num_concepts, dim, rng, name="concept_emb"):
        self.dim = dim
        self.num_concepts = num_concepts
        self.table = T.Parameter(f"{name}.table",
                                 uniform_init(rng, (num_concepts, dim), dim))

    def parameters(self):
        return [self.table]

    def lookup(self, concept_ids):
        ids = np.asarray(concept_ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= self.num_concepts):
            raise ValueError(
                f"concept id out of range [0, {self.num_concepts}): "
                f"{ids.min()}..{ids.max()}")
        return T.take_rows(self.table.value, ids)

    def encode(self, concept_ids, mask):
        """Masked lookup for window slabs; padded rows are zero."""
        out = self.lookup(np.asarray(concept_ids).reshape(-1))
        return _mask_rows(out, mask, self.dim)


def multiset_flags(seq, target_question=None, target_concept=None, target_student=None):
    """Per-event repeat-link flags for one neighbor window.

    Student side: [question matches] + [concept matches], in {0, 1, 2}.
    Question side: [student matches], in {0, 1}. Padded positions are 0.
    """
    if seq.owner_kind == STUDENT:
        flags = ((seq.neighbor_ids == target_question).astype(np.int64)
                 + (seq.concepts == target_concept).astype(np.int64))
    else:
        flags = (seq.neighbor_ids == target_student).astype(np.int64)
    return np.where(seq.valid_mask, flags, 0)
