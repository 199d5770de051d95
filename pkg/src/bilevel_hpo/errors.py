"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument broke a documented precondition (shape, range, tape)."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value.

    ``node``, ``t`` and ``k`` locate the failure when known: the tape node
    id, the outer step and the inner step respectively.
    """

    def __init__(self, message, node=None, t=None, k=None):
        super().__init__(message)
        self.node = node
        self.t = t
        self.k = k

    def located(self, t=None, k=None):
        """Return a copy annotated with outer/inner step coordinates."""
        t = self.t if t is None else t
        k = self.k if k is None else k
        where = ", ".join(f"{n}={v}" for n, v in (("t", t), ("k", k)) if v is not None)
        base = self.args[0].split(" [at ")[0]
        msg = f"{base} [at {where}]" if where else base
        return NumericError(msg, node=self.node, t=t, k=k)
