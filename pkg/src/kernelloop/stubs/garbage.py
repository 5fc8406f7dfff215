"""Answers every request with text that is not a response document."""

import sys

sys.stdin.read()
sys.stdout.write("certainly! here is a faster kernel:\n\x00\x01 tile_m == banana\n")
