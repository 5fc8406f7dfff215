"""Shared request parsing for the stub mutators (stdlib only)."""

import sys


def read_sections(stream=None):
    sections, current = {}, None
    for line in (stream or sys.stdin).read().splitlines():
        if line.startswith("--- "):
            current = line[4:].strip()
            sections[current] = []
        elif current is not None:
            sections[current].append(line)
    return sections


def config_pairs(lines):
    out = {}
    for line in lines:
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_response(config, description):
    body = "".join(f"{k}={config[k]}\n" for k in sorted(config))
    sys.stdout.write(f"--- CONFIG\n{body}--- DESCRIPTION\n{description}\n")
