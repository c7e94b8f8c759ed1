"""How far apart do optimized identity codewords sit?

Generates codebooks at a few dimensions and prints the minimum pairwise
distance before and after repulsion, then round-trips one through the
binary file format.

    python3 demos/codebook_spread.py
"""

import tempfile
from pathlib import Path

import numpy as np

from splatmem.codebook import (generate_codebook, integer_codebook,
                               load_codebook, min_pairwise_distance,
                               save_codebook)

N = 128

print(f"{'D':>4} {'random init':>12} {'optimized':>12}")
for d in (4, 8, 16, 28):
    init = generate_codebook(N, d, seed=0, steps=0)
    book = generate_codebook(N, d, seed=0)
    print(f"{d:>4} {min_pairwise_distance(init.vectors):>12.4f} "
          f"{min_pairwise_distance(book.vectors):>12.4f}")

# the scalar baseline has no geometry to optimize: codeword i is just i
ints = integer_codebook(8)
print("\ninteger codewords:", ints.vectors.ravel())

book = generate_codebook(N, 16, seed=0)
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "book.smcb"
    save_codebook(path, book)
    back = load_codebook(path)
# the file stores float32, so reloading costs ~1e-8 per coordinate
err = np.abs(back.vectors - book.vectors).max()
print(f"\nfile round trip ({book.n}x{book.d_id}): max error {err:.1e}")
