"""Prototypical part networks on a small numpy autodiff kernel."""
