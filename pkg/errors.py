"""
Exception hierarchy shared by every module of the fine-tuning engine.

The CLI maps these onto exit codes: validation problems exit 2, numeric
and audit failures exit 3.
"""


class BsrError(Exception):
    """Base class for every engine error."""

    exit_code = 3


class DimensionError(BsrError):
    """Operand shapes disagree with what an operation requires."""

    exit_code = 2


class NumericError(BsrError):
    """An operation produced NaN or Inf."""


class RetentionViolation(BsrError):
    """A backward rule asked for a buffer its tape node never kept."""

    def __init__(self, node_id, role, op_kind=None):
        self.node_id = node_id
        self.role = role
        self.op_kind = op_kind
        where = f"{op_kind} node {node_id}" if op_kind else f"node {node_id}"
        super().__init__(f"{where} read buffer '{role}' which was not retained")


class PlanError(BsrError):
    """A plan (or a request derived from one) is invalid."""

    exit_code = 2

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DeterminismError(BsrError):
    """Two evaluations of the same closure at the same point disagreed."""


class ContractError(BsrError):
    """A caller broke an interface contract (frozen gradients, bad step sizes, ...)."""

    exit_code = 2


class AuditFailure(BsrError):
    """Tape retention differs from the analytical prediction."""

    def __init__(self, diffs):
        self.diffs = diffs
        roles = sorted({f"block {d['block']}: {d['role']}" for d in diffs})
        super().__init__("retention audit failed for " + ", ".join(roles))


class CheckpointError(BsrError):
    """A checkpoint file is malformed or does not match the model."""

    exit_code = 2
