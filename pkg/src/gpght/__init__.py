"""On-time-arrival routing with a history-aware decision Transformer trained by generalized policy gradient."""
