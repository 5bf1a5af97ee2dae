"""gridmarket: a two-stage retail electricity market simulator.

Stage one clears a chance-constrained day-ahead market over a radial
distribution grid and prices it with uncertainty-adjusted distribution LMPs;
stage two runs rolling intra-day peer-to-peer flexibility trading among
microgrids.  See README.md for the command-line entry points.
"""

__version__ = "0.1.0"
