"""Configuration, checkpoints, evaluation and the command-line interface."""
