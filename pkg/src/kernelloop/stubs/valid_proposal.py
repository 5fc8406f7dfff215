"""Proposes one valid neighbour: the first tile parameter moved to 64 (or to 32 if it is already 64)."""

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
from _protocol import config_pairs, read_sections, write_response  # noqa: E402

cfg = config_pairs(read_sections().get("CONFIG", []))
key = next((k for k in ("tile_m", "tile_n", "tile_k") if k in cfg), None)
if key is None:
    sys.exit("no tile parameter to change")
cfg[key] = "32" if cfg[key] == "64" else "64"
write_response(cfg, f"stub: set {key}={cfg[key]}")
