"""Seed derivation.

A master seed expands into independent per-component seeds with splitmix64:
``derive_seed(master, "sweep", 3)`` mixes each path element in turn. String
labels enter through their CRC-32, integers directly.
"""
import zlib

_MASK = (1 << 64) - 1


def splitmix64(x):
    z = (x + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(master, *path):
    state = int(master) & _MASK
    for part in path:
        key = zlib.crc32(part.encode()) if isinstance(part, str) else int(part) & _MASK
        state = splitmix64(state ^ splitmix64(key))
    return state
