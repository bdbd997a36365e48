from typing import Dict, Optional

import pandas as pd

from .metrics import macro_average
from .models import NoteMetrics

# Column order of the results table: note, note w/ offset, note w/ offset & velocity, duration accuracy.
METRIC_COLUMNS = [
    ("onset_p", "note P"),
    ("onset_r", "note R"),
    ("onset_f1", "note F1"),
    ("with_offset_p", "w/ offset P"),
    ("with_offset_r", "w/ offset R"),
    ("with_offset_f1", "w/ offset F1"),
    ("with_offset_velocity_p", "w/ off+vel P"),
    ("with_offset_velocity_r", "w/ off+vel R"),
    ("with_offset_velocity_f1", "w/ off+vel F1"),
    ("duration_accuracy", "duration acc"),
    ("long_note_rate", "long notes"),
]


def metrics_frame(per_piece: Dict[str, NoteMetrics], macro_row: bool = True) -> pd.DataFrame:
    """One row per piece (raw field names) plus a macro-averaged ``mean`` row."""
    keys = [k for k, _ in METRIC_COLUMNS]
    if not per_piece:
        return pd.DataFrame(columns=["piece"] + keys)
    rows = [{"piece": name, **m.flat()} for name, m in per_piece.items()]
    if macro_row:
        rows.append({"piece": "mean", **macro_average(per_piece)})
    return pd.DataFrame(rows)[["piece"] + keys]


def format_metrics_table(df: pd.DataFrame, label: Optional[str] = "piece") -> pd.DataFrame:
    if df is None or df.empty:
        return df
    out = pd.DataFrame({label: df[label]}) if label in df.columns else pd.DataFrame(index=df.index)
    for key, title in METRIC_COLUMNS:
        if key in df.columns:
            out[title] = (100.0 * df[key]).round(2)
    return out
