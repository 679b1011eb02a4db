"""Independent slow-but-obvious reference implementations used as oracles.

These must never import from the edgebus package: the whole point is that a
disagreement with them means the production code path is wrong.
"""


def crc32_bitwise(data: bytes) -> int:
    """CRC-32, reflected, polynomial 0xEDB88320, init/finalize 0xFFFFFFFF."""
    crc = 0xFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            if crc & 1:
                crc = (crc >> 1) ^ 0xEDB88320
            else:
                crc >>= 1
    return crc ^ 0xFFFFFFFF


def fnv1a_32(data: bytes) -> int:
    """FNV-1a 32-bit: offset basis 2166136261, prime 16777619."""
    h = 2166136261
    for byte in data:
        h ^= byte
        h = (h * 16777619) & 0xFFFFFFFF
    return h
