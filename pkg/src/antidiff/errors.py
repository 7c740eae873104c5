class DivergenceError(RuntimeError):
    """A loss or gradient went non-finite; ``context`` names where."""

    def __init__(self, message: str, context: dict | None = None):
        super().__init__(message)
        self.context = dict(context or {})

    def __str__(self) -> str:
        base = super().__str__()
        if not self.context:
            return base
        ctx = ", ".join(f"{k}={v}" for k, v in self.context.items())
        return f"{base} [{ctx}]"


def check_finite(value, what: str, **context) -> None:
    import torch

    if not bool(torch.isfinite(torch.as_tensor(value)).all()):
        raise DivergenceError(f"non-finite {what}", context)
