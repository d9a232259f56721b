"""Capability machine toolkit: an ImpMod-style source language, a
capability target machine, the pointers-as-capabilities compiler
between them, trace semantics, back-translation and executable oracles."""

__version__ = "0.1.0"
