# Real-time autoregressive piano transcription (PAR / PAR-compact)
