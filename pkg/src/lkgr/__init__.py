"""Knowledge-aware attentive graph convolution in the Lorentz model for recommendation."""

__version__ = "0.1.0"
