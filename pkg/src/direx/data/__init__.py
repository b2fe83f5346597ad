"""Bundled reference datasets from a photonic loophole-free Bell system.

Two snapshots are shipped, each as a raw counts table plus the
maximum-likelihood table fitted to it:

* ``design``: an early short acquisition used to size the experiment
  (about 8 minutes of trials);
* ``commissioning``: calibration trials from the first six cycles of the
  production run, used to pin the analysis parameters.
"""

from __future__ import annotations

from importlib import resources

from direx.model import ConditionalDistribution, CountsTable

__all__ = [
    "design_counts",
    "design_distribution",
    "commissioning_counts",
    "commissioning_distribution",
]


def _read(name: str) -> str:
    return resources.files(__package__).joinpath(name).read_text()


def design_counts() -> CountsTable:
    return CountsTable.from_json(_read("design_counts.json"))


def design_distribution() -> ConditionalDistribution:
    return ConditionalDistribution.from_json(_read("design_distribution.json"))


def commissioning_counts() -> CountsTable:
    return CountsTable.from_json(_read("commissioning_counts.json"))


def commissioning_distribution() -> ConditionalDistribution:
    return ConditionalDistribution.from_json(_read("commissioning_distribution.json"))
