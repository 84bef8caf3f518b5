"""Continual semantic scene synthesis with a frozen base model.

A stream of scene domains extends a conditional generator's label space
and style through small per-domain parameter deltas; the base weights
stay byte-identical, so earlier domains keep generating exactly the same
images after any amount of later training.
"""

__version__ = "0.1.0"
