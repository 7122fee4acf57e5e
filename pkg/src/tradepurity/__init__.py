"""Trade-resistance quantification and trade-network structure analysis.

Subpackages by stage: `corpus` (ingestion and panel assembly), `gravity`
(resistance extraction with a lognormal error model fitted by pseudo
maximum likelihood), `mixture` (two-component decomposition of resistance
into distance-driven and distance-free barriers, per-country purity
scores), `netgraph` (backbone extraction, community structure, boundary
indices), `report` (tabular summaries), and `pipeline` (cached,
deterministic multi-stage runs plus the command line front end).
"""

__version__ = "0.1.0"
