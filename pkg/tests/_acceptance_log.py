"""Shared store for acceptance result lines (printed by conftest)."""

LINES: list[str] = []
