from typing import Dict, List, Optional, Union

import pandas as pd
from pydantic import BaseModel, Field

CHANNEL_TRAIN = "train"
CHANNEL_VALID = "valid"
CHANNEL_STREAM = "stream"


class TimelineEvent(BaseModel):
    # channel groups events for export: train, valid, stream
    channel: str
    step: int  # iteration for training, frame index for streaming
    action: str
    details: Dict[str, Union[float, int, str, None]] = Field(default_factory=dict)


class EventBus:
    def __init__(self):
        self.events: List[TimelineEvent] = []

    def log(self, event: TimelineEvent):
        self.events.append(event)

    def emit(self, channel: str, step: int, action: str, **details):
        self.log(TimelineEvent(channel=channel, step=step, action=action, details=details))

    def select(self, channel: str) -> List[TimelineEvent]:
        return [e for e in self.events if e.channel == channel]

    def to_dataframe(self, channel: Optional[str] = None) -> pd.DataFrame:
        events = self.events if channel is None else self.select(channel)
        if not events:
            return pd.DataFrame(columns=["channel", "step", "action"])
        rows = [{"channel": e.channel, "step": e.step, "action": e.action, **e.details} for e in events]
        return pd.DataFrame(rows)
