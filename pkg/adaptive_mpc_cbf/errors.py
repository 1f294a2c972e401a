# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.


class AdaptiveMpcCbfError(Exception):
    """Base class for every error raised by this package."""


class DegenerateState(AdaptiveMpcCbfError):
    pass


class GeometryError(AdaptiveMpcCbfError):
    pass


class ShapeMismatch(AdaptiveMpcCbfError, ValueError):
    pass


class QpInfeasible(AdaptiveMpcCbfError):
    def __init__(self, min_violation: float) -> None:
        super().__init__(f'QP has no feasible point (minimum total violation {min_violation:.3e}).')
        self.min_violation = min_violation


class QpUnbounded(AdaptiveMpcCbfError):
    pass


class ParseError(AdaptiveMpcCbfError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None) -> None:
        location = f' at line {line}, column {column}' if line is not None else ''
        super().__init__(f'{message}{location}')
        self.line = line
        self.column = column


class CheckpointVersionError(AdaptiveMpcCbfError):
    pass


class IncompleteLog(AdaptiveMpcCbfError):
    def __init__(self, cav_ids: list[int]) -> None:
        super().__init__(f'CAVs {cav_ids} did not exit the control zone before the time cap.')
        self.cav_ids = cav_ids
