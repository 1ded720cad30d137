"""Action-chunk diffusion policies with prior-deviation guidance on toy 2D tasks.

Kept import-light so the CLI can set thread limits before numpy loads.
"""

__version__ = "0.1.0"
