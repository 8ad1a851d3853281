"""Deterministic seed derivation (splitmix64)."""

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys) -> int:
    """Fold integer or string keys into ``seed``; result fits in 63 bits."""
    h = splitmix64(int(seed) & MASK64)
    for k in keys:
        if isinstance(k, str):
            raw = k.encode("utf-8")
            for i in range(0, len(raw), 8):
                h = splitmix64(h ^ int.from_bytes(raw[i:i + 8], "little"))
            k = len(raw)
        h = splitmix64(h ^ (int(k) & MASK64))
    return h >> 1
