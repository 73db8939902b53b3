"""gert: urban RF ray tracing from building footprints and terrain, with seeded
Monte Carlo sensitivity sweeps over geometry and materials."""

__version__ = "0.1.0"
