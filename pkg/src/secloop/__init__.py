"""secloop: a deterministic, desk-scale security-automation loop.

Alert collection, summarization, strategy generation, simulated red/blue
execution, multi-part reward scoring, and group-relative policy
optimization, all reproducible from a single seed.
"""

__version__ = "0.1.0"
