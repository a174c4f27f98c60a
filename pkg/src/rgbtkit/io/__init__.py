"""File formats, JSONL schemas and synthetic fixtures."""
