"""64-bit FNV-1a, used for text-block feature hashing and policy action ids."""

FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: str | bytes) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV_OFFSET_BASIS
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK
    return h


def fnv1a_64_hex(data: str | bytes) -> str:
    return format(fnv1a_64(data), "016x")
