"""CoEvo - co-evolution of equations and a reusable knowledge library."""

__version__ = "0.1.0"
__author__ = "Colby Jackson"
__description__ = "Equation discovery driven by a language model and a growing knowledge library"
