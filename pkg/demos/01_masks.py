"""Visibility masks, rendered as rasters.

Builds the small worked layout (2-token question, two 2-token thoughts, one
cache token between them) and prints the attention mask for each mode, so the
structural differences are visible side by side.
"""
import numpy as np

from gistkv.corpus import ROLE_NAMES, build_layout, make_vocab
from gistkv.masks import MaskMode, build_mask, dump_mask

vocab = make_vocab(16, 1)
layout = build_layout([1, 2], [[3, 4], [5, 6]], vocab)

print("layout roles: ", " ".join(ROLE_NAMES[r][0].upper() for r in layout.roles))
print()
for mode in MaskMode:
    mask = build_mask(layout, mode)
    print(f"--- {mode.value} ---")
    print(dump_mask(mask))
    print()

# the compression rule in words, read off the raster
tc = build_mask(layout, MaskMode.THOUGHT_CACHE)
print("cache row (position 4) sees:", np.nonzero(tc.allow[4])[0].tolist())
print("output row (position 5) sees:", np.nonzero(tc.allow[5])[0].tolist())
print("first token of thought 2 sees:", np.nonzero(tc.allow[6])[0].tolist())
