"""moectl: toy instruction-guided diffusion image editing with a
mixture-of-experts text-condition controller."""

__version__ = "0.1.0"
