"""Domain decomposition solver for entropic unbalanced optimal transport."""

from domdec.measures import (
    DivergenceSpec,
    Grid,
    GridMeasure,
    GridMismatchError,
    SparseCellMarginal,
    TransportProblem,
    assemble_y_marginal,
    kl_divergence,
    truncate_and_rebox,
)

__version__ = "0.1.0"
