"""Exception hierarchy shared by every module.

Each class carries a stable ``exit_code`` so the command line front end can
map failures onto distinct process exit statuses.
"""

from __future__ import annotations


class PolicyPanelError(Exception):
    exit_code = 10


# panel loading and transforms
class PanelError(PolicyPanelError):
    exit_code = 11


class MissingColumn(PanelError):
    exit_code = 12


class NonMonotoneCumulative(PanelError):
    exit_code = 13


class GapInDates(PanelError):
    exit_code = 14


class DuplicateCell(PanelError):
    exit_code = 15


class InvalidPolicyValue(PanelError):
    exit_code = 16


class UnknownState(PanelError):
    exit_code = 17


class UnknownColumn(PanelError):
    exit_code = 18


class ColumnRoleError(PanelError):
    exit_code = 19


class SeriesTooShort(PanelError):
    exit_code = 20


# estimation
class EstimationError(PolicyPanelError):
    exit_code = 30


class EmptyDesign(EstimationError):
    exit_code = 31


class RankDeficient(EstimationError):
    exit_code = 32

    def __init__(self, column: str, message: str | None = None):
        self.column = column
        super().__init__(message or f"design is rank deficient: column {column!r} "
                                    "is linearly dependent on earlier columns")


class Underdetermined(EstimationError):
    exit_code = 33


class SingleCluster(EstimationError):
    exit_code = 34


class DimensionMismatch(EstimationError):
    exit_code = 35


class UnknownCoefficient(EstimationError):
    exit_code = 36


class LeverageOne(EstimationError):
    exit_code = 37


# placebo
class AllReplicatesFailed(PolicyPanelError):
    exit_code = 40


# simulation and counterfactuals
class InvalidConfig(PolicyPanelError):
    exit_code = 50


class InsufficientSurvivors(PolicyPanelError):
    exit_code = 51

    def __init__(self, survivors: int, needed: int):
        self.survivors = survivors
        self.needed = needed
        super().__init__(f"only {survivors} epidemics fell inside the attack-rate band, "
                         f"{needed} requested")


class HorizonMismatch(PolicyPanelError):
    exit_code = 52


class NonconvergentPath(PolicyPanelError):
    exit_code = 53
