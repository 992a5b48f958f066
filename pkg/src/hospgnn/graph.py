"""Initial episode graph: embeddings, chained differences, edge channels.

Edge tensors carry up to three channels, in this fixed order:

* ``relative``    affinity of chained-difference features (leave-one-link
                  structure of the whole episode, not a pairwise quantity)
* ``similar``     evidence that two vertices share a class
* ``dissimilar``  evidence that they do not

Ablation variants drop channels; every function here takes the enabled
channel tuple and produces tensors with exactly that many channels, in
the order above.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateEpisodeError, ShapeError

CHANNEL_ORDER = ("relative", "similar", "dissimilar")
FULL_CHANNELS = CHANNEL_ORDER

DENOM_EPS = 1e-12

# single-letter spellings accepted by configs and the command line;
# "h" is a historical alias for the relative channel
_LETTERS = {"r": "relative", "h": "relative", "s": "similar", "d": "dissimilar"}


def parse_variant(text):
    """Translate a variant string into the enabled channel tuple.

    ``full`` enables everything; otherwise each letter of the string
    enables one channel (``rs``, ``sd``, ``d``, ...).
    """
    name = str(text).strip().lower()
    if name in ("full", "rsd", "hsd"):
        return FULL_CHANNELS
    enabled = set()
    for letter in name:
        if letter not in _LETTERS:
            raise ConfigError(
                f"unknown variant {text!r}: use 'full' or letters from r/s/d"
            )
        channel = _LETTERS[letter]
        if channel in enabled:
            raise ConfigError(f"variant {text!r} names {channel} twice")
        enabled.add(channel)
    if not enabled:
        raise ConfigError("variant enables no channels")
    return tuple(ch for ch in CHANNEL_ORDER if ch in enabled)


def channel_index(channels, name):
    if name not in channels:
        raise ConfigError(f"channel {name!r} not enabled (have {channels})")
    return channels.index(name)


def shift_matrix(m):
    """Constant M-by-M map sending row i to row i minus row i+1 (mod M)."""
    if m < 2:
        raise ShapeError(f"need at least 2 vertices, got {m}")
    return np.eye(m) - np.roll(np.eye(m), 1, axis=1)


def relative_features(feats):
    """Chained differences: row i becomes row i minus the next row,
    wrapping the last row around to the first.

    The episode's canonical vertex order fixes which difference each row
    is; rows telescope to zero when summed.
    """
    feats = T._as_tensor(feats)
    if feats.ndim != 2:
        raise ShapeError(f"expected (M, d) features, got {feats.shape}")
    m = feats.shape[0]
    d = T.Tensor(shift_matrix(m).astype(feats.dtype))
    return T.matmul(d, feats)


def pairwise_distances(feats):
    """Euclidean distance between every pair of rows, as an (M, M) tensor.

    Built from explicit row differences rather than the inner-product
    identity, which loses precision catastrophically near zero.
    """
    feats = T._as_tensor(feats)
    m, d = feats.shape
    left = T.reshape(feats, (m, 1, d))
    right = T.reshape(feats, (1, m, d))
    diff = T.sub(left, right)
    return T.sqrt(T.tensor_sum(T.mul(diff, diff), axis=2))


def init_relative_channel(rel_feats):
    """Initial relative-channel affinities.

    Entry (i, j) is one minus the distance between difference rows i and
    j, scaled by row i's total distance to every row (including itself
    and j). Diagonals are exactly 1 and each row sums to M - 1. The
    scaling is per-row, so the matrix is not symmetric in general.
    """
    dist = pairwise_distances(rel_feats)
    totals = T.tensor_sum(dist, axis=1, keepdims=True)
    if np.any(totals.data < DENOM_EPS):
        rows = np.flatnonzero(totals.data.reshape(-1) < DENOM_EPS)
        raise DegenerateEpisodeError(
            f"all difference features coincide (zero distance total at "
            f"row{'s' if rows.size > 1 else ''} {rows.tolist()})"
        )
    return T.sub(1.0, T.div(dist, totals))


def label_agreement_masks(episode):
    """Boolean (M, M) masks: pairs of label-visible supports that agree,
    and that disagree. Everything else (any query or hidden endpoint)
    is in neither mask."""
    visible = episode.label_mask
    both = np.logical_and.outer(visible, visible)
    same = np.equal.outer(episode.class_slots, episode.class_slots)
    return both & same, both & ~same


def init_edges(episode, channels, rel_channel=None, dtype=np.float64):
    """Stack the enabled channels of the initial edge tensor.

    Label channels: agreeing visible-support pairs get (similar 1,
    dissimilar 0), disagreeing ones (0, 1), and every pair touching a
    query or hidden support gets (0.5, 0.5). The diagonal follows the
    same rule, so a visible support is "similar" to itself; diagonals
    never reach the readout, which skips self-edges by construction.
    """
    agree, disagree = label_agreement_masks(episode)
    parts = []
    for ch in channels:
        if ch == "relative":
            if rel_channel is None:
                raise ShapeError("relative channel enabled but not provided")
            parts.append(rel_channel)
        elif ch == "similar":
            vals = np.full(agree.shape, 0.5, dtype=dtype)
            vals[agree] = 1.0
            vals[disagree] = 0.0
            parts.append(T.Tensor(vals))
        else:
            vals = np.full(agree.shape, 0.5, dtype=dtype)
            vals[agree] = 0.0
            vals[disagree] = 1.0
            parts.append(T.Tensor(vals))
    return T.stack_last(parts)
