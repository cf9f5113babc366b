"""Deep belief network codes clustered by nonparametric maximum-margin clustering."""

__version__ = "0.1.0"
