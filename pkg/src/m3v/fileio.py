"""Atomic file writing: outputs appear fully written or not at all."""

import json
import os


def atomic_write_text(path: str, text: str) -> None:
    """Write to a temp file in the target directory, then rename over `path`."""
    directory = os.path.dirname(os.path.abspath(path))
    tmp = os.path.join(directory, os.path.basename(path) + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, no whitespace, round-trip floats."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
