import hashlib


def child_seed(master: int, name: str, index: int = 0) -> int:
    """Deterministic 63-bit seed derived from (master, experiment name, index)."""
    digest = hashlib.sha256(f"{int(master)}:{name}:{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1
