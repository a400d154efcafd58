"""Desk-scale vehicle-cloud testbed for adversarial perception and network impairment."""

__version__ = "0.1.0"
