"""Knowledge tracing with multi-agent KC graphs, S-Q graphs and asymmetric cross-attention fusion."""

__version__ = "0.1.0"
