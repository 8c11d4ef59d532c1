"""Layer-detector defences with a reject option, fixed-budget RBF detectors and
defence-aware evasion attacks for measuring them."""

__version__ = "0.1.0"
