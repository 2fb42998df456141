"""
Exception hierarchy shared by every layer; the CLI maps each class to an exit code.
"""


class CPNError(Exception):
    exit_code = 1


class ContractViolation(CPNError):
    """A caller broke a documented precondition (shape, width, mode, unknown task)"""
    exit_code = 2


class NumericFault(CPNError):
    """A non-finite value appeared in a forward or backward pass"""
    exit_code = 3

    def __init__(self, message, op=None, epoch=None, batch=None):
        self.message = message
        self.op = op
        self.epoch = epoch
        self.batch = batch
        details = [f"op={op}"] if op else []
        if epoch is not None:
            details.append(f"epoch={epoch}")
        if batch is not None:
            details.append(f"batch={batch}")
        super().__init__(f"{message} ({', '.join(details)})" if details else message)

    def with_provenance(self, epoch=None, batch=None):
        return NumericFault(self.message, op=self.op, epoch=epoch, batch=batch)


class DatasetIOError(CPNError):
    """Unreadable, corrupt or inconsistent dataset files"""
    exit_code = 4


class DemonstratorFailure(CPNError):
    """The heuristic controller could not solve a placement within the horizon limit"""
    exit_code = 1


def ensure(condition, message):
    """Raise ContractViolation unless condition holds"""
    if not condition:
        raise ContractViolation(message)
