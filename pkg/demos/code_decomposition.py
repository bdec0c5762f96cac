"""
Splitting binary codes into subcodes
====================================

A D-bit token can be predicted as g independent b-bit pieces. Each piece
gets its own embedding table and output head, so the tables shrink from
2^D rows to g * 2^b rows.
"""

import numpy as np

from elmlab.vocab import VocabSpec, decompose, recompose

# an 8-bit code split into two 4-bit halves
spec = VocabSpec(8, 2, 4)
bits = np.array([1, 0, 1, 0, 0, 0, 1, 1])
parts = decompose(bits, spec)
print("bits", bits.tolist(), "->", spec, "subcodes", parts.tolist())
print("back to bits:", recompose(parts, spec).tolist())

# every code survives the round trip, for every split that divides D
D = 12
all_bits = ((np.arange(1 << D)[:, None] >> np.arange(D - 1, -1, -1)) & 1).astype(np.uint8)
for g in (1, 2, 3, 4):
    s = VocabSpec(D, g, D // g)
    ok = np.array_equal(recompose(decompose(all_bits, s), s), all_bits)
    print(f"D={D} {s}: round trip {'exact' if ok else 'BROKEN'}, table rows {g * s.sub_size} vs {1 << D}")
