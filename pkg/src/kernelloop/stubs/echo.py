"""Returns the current config unchanged."""

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
from _protocol import config_pairs, read_sections, write_response  # noqa: E402

write_response(config_pairs(read_sections().get("CONFIG", [])), "stub: no change")
