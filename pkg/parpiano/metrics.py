"""Note-level transcription scores.

Pairs are eligible under tolerance tiers and matched one-to-one by a
maximum bipartite matching over the eligible pairs.
"""
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .errors import ConfigurationError
from .models import MAX_MIDI, MIN_MIDI, PRF, NoteEvent, NoteMetrics

Tier = Literal["onset", "with_offset", "with_offset_velocity"]
TIERS: Tuple[str, ...] = ("onset", "with_offset", "with_offset_velocity")

ONSET_TOL = 0.05
OFFSET_RATIO = 0.2
OFFSET_MIN = 0.05
VELOCITY_TOL = 0.1
LONG_NOTE_EXCESS = 3.0
LENGTH_EDGES = np.geomspace(0.1, 8.0, 9)


def _arrays(notes: Sequence[NoteEvent]):
    pitch = np.array([n.pitch for n in notes], dtype=np.int64)
    onset = np.array([n.onset for n in notes], dtype=np.float64)
    offset = np.array([n.offset for n in notes], dtype=np.float64)
    velocity = np.array([n.velocity for n in notes], dtype=np.float64)
    return pitch, onset, offset, velocity


def _maximum_matching(eligible: np.ndarray) -> List[Tuple[int, int]]:
    if eligible.size == 0 or not eligible.any():
        return []
    cols = maximum_bipartite_matching(csr_matrix(eligible.astype(np.int8)), perm_type="column")
    return [(int(r), int(c)) for r, c in enumerate(cols) if c >= 0]


def velocity_slope(ref: Sequence[NoteEvent], est: Sequence[NoteEvent], pairs: List[Tuple[int, int]]) -> float:
    """Least-squares s minimising sum (s*v_est - v_ref)^2 over the given pairs."""
    if not pairs:
        return 1.0
    v_ref = np.array([ref[i].velocity for i, _ in pairs], dtype=np.float64)
    v_est = np.array([est[j].velocity for _, j in pairs], dtype=np.float64)
    denom = float(np.dot(v_est, v_est))
    return float(np.dot(v_est, v_ref) / denom) if denom > 0 else 1.0


def eligible_pairs(
    ref: Sequence[NoteEvent],
    est: Sequence[NoteEvent],
    tier: Tier = "onset",
    onset_tol: float = ONSET_TOL,
    offset_ratio: float = OFFSET_RATIO,
    offset_min: float = OFFSET_MIN,
    velocity_tol: float = VELOCITY_TOL,
    velocity_scale: float = 1.0,
) -> np.ndarray:
    if tier not in TIERS:
        raise ConfigurationError(f"unknown matching tier {tier!r}")
    if not ref or not est:
        return np.zeros((len(ref), len(est)), dtype=bool)
    r_pitch, r_on, r_off, r_vel = _arrays(ref)
    e_pitch, e_on, e_off, e_vel = _arrays(est)

    ok = r_pitch[:, None] == e_pitch[None, :]
    # rounding keeps boundary cases like 0.05 from failing on float error
    ok &= np.round(np.abs(r_on[:, None] - e_on[None, :]), 7) <= onset_tol
    if tier != "onset":
        tol = np.maximum(offset_min, offset_ratio * (r_off - r_on))
        ok &= np.round(np.abs(r_off[:, None] - e_off[None, :]), 7) <= tol[:, None]
    if tier == "with_offset_velocity":
        ok &= np.abs(velocity_scale * e_vel[None, :] - r_vel[:, None]) <= velocity_tol * r_vel[:, None]
    return ok


def match_notes(
    ref: Sequence[NoteEvent],
    est: Sequence[NoteEvent],
    onset_tol: float = ONSET_TOL,
    offset_ratio: float = OFFSET_RATIO,
    offset_min: float = OFFSET_MIN,
    velocity_tol: float = VELOCITY_TOL,
    tier: Tier = "onset",
    scale_velocity: bool = True,
) -> List[Tuple[int, int]]:
    """Maximum one-to-one matching as (ref index, est index) pairs."""
    scale = 1.0
    if tier == "with_offset_velocity" and scale_velocity:
        onset_pairs = match_notes(ref, est, onset_tol=onset_tol, tier="onset")
        scale = velocity_slope(ref, est, onset_pairs)
    eligible = eligible_pairs(
        ref, est, tier, onset_tol, offset_ratio, offset_min, velocity_tol, velocity_scale=scale
    )
    return _maximum_matching(eligible)


def compute_metrics(
    ref: Sequence[NoteEvent],
    est: Sequence[NoteEvent],
    scale_velocity: bool = True,
    **tolerances,
) -> NoteMetrics:
    pairs = {
        tier: match_notes(ref, est, tier=tier, scale_velocity=scale_velocity, **tolerances) for tier in TIERS
    }
    prf = {tier: PRF.from_counts(len(p), len(ref), len(est)) for tier, p in pairs.items()}
    onset_recall = prf["onset"].recall
    excess = [est[j].duration - ref[i].duration for i, j in pairs["onset"]]
    return NoteMetrics(
        onset=prf["onset"],
        with_offset=prf["with_offset"],
        with_offset_velocity=prf["with_offset_velocity"],
        duration_accuracy=prf["with_offset"].recall / onset_recall if onset_recall > 0 else 0.0,
        long_note_rate=float(np.mean(np.array(excess) > LONG_NOTE_EXCESS)) if excess else 0.0,
        counts={
            "n_ref": len(ref),
            "n_est": len(est),
            **{f"matched_{tier}": len(p) for tier, p in pairs.items()},
        },
    )


def _length_bucket(duration: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(LENGTH_EDGES, duration, side="right") - 1
    return np.clip(idx, 0, len(LENGTH_EDGES) - 2)


def breakdown(
    ref: Sequence[NoteEvent],
    est: Sequence[NoteEvent],
    axis: Literal["pitch", "length"] = "length",
    **tolerances,
) -> pd.DataFrame:
    """Onset and with-offset recall per reference-note bucket; empty buckets are NaN."""
    onset_hit = np.zeros(len(ref), dtype=bool)
    offset_hit = np.zeros(len(ref), dtype=bool)
    for i, _ in match_notes(ref, est, tier="onset", **tolerances):
        onset_hit[i] = True
    for i, _ in match_notes(ref, est, tier="with_offset", **tolerances):
        offset_hit[i] = True

    if axis == "length":
        durations = np.array([n.duration for n in ref], dtype=np.float64)
        bucket = _length_bucket(durations)
        labels = [(float(lo), float(hi)) for lo, hi in zip(LENGTH_EDGES[:-1], LENGTH_EDGES[1:])]
    elif axis == "pitch":
        bucket = np.array([n.pitch - MIN_MIDI for n in ref], dtype=np.int64)
        labels = [(float(p), float(p)) for p in range(MIN_MIDI, MAX_MIDI + 1)]
    else:
        raise ConfigurationError(f"unknown breakdown axis {axis!r}")

    rows = []
    for k, (lo, hi) in enumerate(labels):
        members = bucket == k
        n = int(members.sum())
        rows.append(
            {
                "bucket": k,
                "lo": lo,
                "hi": hi,
                "n_ref": n,
                "onset_recall": onset_hit[members].mean() if n else np.nan,
                "with_offset_recall": offset_hit[members].mean() if n else np.nan,
            }
        )
    return pd.DataFrame(rows)


def macro_average(per_piece: Dict[str, NoteMetrics]) -> Optional[Dict[str, float]]:
    if not per_piece:
        return None
    frame = pd.DataFrame([m.flat() for m in per_piece.values()])
    return frame.mean().to_dict()
