"""Fine-grained text-motion retrieval with joint-angle Motion Images and MaxSim late interaction."""

__version__ = "0.1.0"
