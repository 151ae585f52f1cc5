"""Static figure generation for loop-rl experiment CSVs."""

from .render import (
    ColumnMismatchError,
    EmptyInputError,
    PlotError,
    PlotSpec,
    RenderResult,
    render,
)

__version__ = "0.1.0"
