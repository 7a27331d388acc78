"""Automated ventricular function measurement from cine cardiac MR DICOMs."""

__version__ = "0.1.0"
