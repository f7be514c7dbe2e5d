"""Exception hierarchy.

Three families map onto CLI exit codes: data problems (1), estimation
failures such as singular local designs (2), and configuration mistakes (3).
"""


class DrDidScError(Exception):
    exit_code = 1


class DataError(DrDidScError):
    exit_code = 1


class MissingColumn(DataError):
    pass


class NonNumericOutcome(DataError):
    pass


class UnbalancedPanel(DataError):
    pass


class UnknownGroupLabel(DataError):
    pass


class EmptyPeriod(DataError):
    pass


class TooFewUnits(DataError):
    pass


class EstimationError(DrDidScError):
    exit_code = 2


class SingularLocalDesign(EstimationError):
    def __init__(self, message, group=None, period=None, stratum=None):
        tags = []
        if group is not None:
            tags.append(f"group={group}")
        if period is not None:
            tags.append(f"period={period}")
        if stratum is not None:
            tags.append(f"stratum={stratum}")
        if tags:
            message = f"{message} [{', '.join(tags)}]"
        super().__init__(message)
        self.group = group
        self.period = period
        self.stratum = stratum


class BandwidthRequired(EstimationError):
    pass


class DegenerateCovariate(EstimationError):
    pass


class SingularSystem(EstimationError):
    pass


class Underidentified(EstimationError):
    pass


class EmptyDonorPool(EstimationError):
    pass


class EventTimeOutOfRange(EstimationError):
    pass


class NoQualifyingGroup(EstimationError):
    pass


class BootstrapFailure(EstimationError):
    pass


class ConfigError(DrDidScError):
    exit_code = 3
