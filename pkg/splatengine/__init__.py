from .reconstruction import Reconstruction, ReconstructionOptions

__version__ = "0.1.0"
