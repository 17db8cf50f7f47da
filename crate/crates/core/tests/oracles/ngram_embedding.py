#!/usr/bin/env python3
"""Reference oracle for the deterministic-local embedder.

lowercase -> collapse whitespace -> pad with one space each side ->
character trigrams -> FNV-1a 64 of the UTF-8 bytes -> bucket = hash % dims ->
count -> L2 normalize.
"""
import math, sys

def fnv1a64(data: bytes) -> int:
    h = 0xcbf29ce484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001b3) & 0xFFFFFFFFFFFFFFFF
    return h

def embed(text: str, dims: int) -> list:
    s = " " + " ".join(text.lower().split()) + " "
    v = [0.0] * dims
    for i in range(len(s) - 2):
        v[fnv1a64(s[i:i + 3].encode("utf-8")) % dims] += 1.0
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]

def cosine(a, b):
    return sum(x * y for x, y in zip(a, b))

if __name__ == "__main__":
    dims = int(sys.argv[1]) if len(sys.argv) > 1 else 1536
    m = embed("contract manager", dims)
    print(repr(cosine(m, embed("contract manager duties", dims))))
    print(repr(cosine(m, embed("payment schedule", dims))))
