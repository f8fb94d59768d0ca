"""Exceptions."""

import logging

logger = logging.getLogger(__name__)


class SubnetraError(Exception):
    pass


class ConfigError(SubnetraError):
    def __init__(self, *, violations, source=None):
        self.violations = list(violations)
        self.source = source
        msg = [f"{source=}"] if source is not None else []
        msg += self.violations
        msg = ";\n".join(msg)
        super().__init__(msg)


class ContractViolation(SubnetraError, ValueError):
    pass


class EnumerationInfeasible(SubnetraError):
    def __init__(self, *, what, limits, given):
        self.what = what
        msg = [
            "enumeration infeasible",
            f"{what=}",
            f"{limits=}",
            f"{given=}",
        ]
        msg = ";\n".join(msg)
        super().__init__(msg)


class UnstableQueue(SubnetraError, ValueError):
    def __init__(self, *, p_arr, lambda_succ, rho):
        self.rho = rho
        msg = [
            "queue is unstable (rho >= 1)",
            f"{p_arr=}",
            f"{lambda_succ=}",
            f"{rho=}",
        ]
        msg = ";\n".join(msg)
        super().__init__(msg)


class PlacementError(SubnetraError):
    pass


class SweepError(SubnetraError):
    def __init__(self, *, failures, manifest=None):
        self.failures = list(failures)
        self.manifest = manifest
        msg = [f"{len(self.failures)} sweep point(s) failed"]
        if manifest is not None:
            msg.append(f"{manifest=}")
        msg += [f"{f['point']}: {f['error']}" for f in self.failures]
        msg = ";\n".join(msg)
        super().__init__(msg)
