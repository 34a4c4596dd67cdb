"""Shared store of acceptance verdicts, printed in the terminal summary."""
LINES: dict[int, str] = {}
