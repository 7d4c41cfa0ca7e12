"""Formation planning guided by deformable virtual structures."""

__version__ = "0.1.0"
