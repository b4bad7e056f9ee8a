"""
Parameter budget of a multigrid-in-channels block
=================================================

Counts weights of one block by enumeration and by the closed form, and
compares them with a fully coupled 3x3 convolution of the same width.
"""

import numpy as np

from mgic.core import BlockTemplate, MgicConfig, build_mgic_block, level_widths
from mgic.cost import closed_form_mgic_params, count_params, fully_coupled_params

# one block at width 64, groups of 8, coarsest width 8, 3x3 kernels
config = MgicConfig(s_g=8, s_c=8, template=BlockTemplate("simple", d=3))
block = build_mgic_block(64, config, rng=np.random.default_rng(0))
print("level widths:", level_widths(64, 8))

# enumerated and closed-form counts agree exactly
print("enumerated:", count_params(block, include_norm=False))
print("closed form:", closed_form_mgic_params(64, 8, 8, 3))
print("fully coupled:", fully_coupled_params(64, 3))

# doubling the width roughly doubles the MGIC cost, but quadruples the dense one
for c in (64, 128, 256, 512):
    mgic = closed_form_mgic_params(2 * c, 8, 8, 3) / closed_form_mgic_params(c, 8, 8, 3)
    dense = fully_coupled_params(2 * c, 3) / fully_coupled_params(c, 3)
    print(f"{c:4d} -> {2 * c:4d}: mgic x{mgic:.3f}, dense x{dense:.1f}")
