"""Reassembleable disassembly of x64 ELF binaries."""

__version__ = "0.1.0"
