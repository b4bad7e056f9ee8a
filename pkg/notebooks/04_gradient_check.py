"""
Finite-difference check of the autograd engine
==============================================

Runs the central-difference harness on every primitive and on a full
MGIC block, and prints the worst relative error of each case.
"""

from mgic.config import resolve
from mgic.experiments import cmd_gradcheck

section, seed = resolve({"gradcheck": {"points": 3}}, "gradcheck")
print(cmd_gradcheck(section, seed).text)
