"""A sandboxed eBPF-compatible virtual machine for small IoT scripts."""

__version__ = "0.1.0"
