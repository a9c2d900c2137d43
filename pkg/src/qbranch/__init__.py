"""Numerical branching-tree dynamics for a total system with an internal measuring apparatus."""

__version__ = "0.1.0"

import logging as _logging

_logging.getLogger(__name__).addHandler(_logging.NullHandler())
