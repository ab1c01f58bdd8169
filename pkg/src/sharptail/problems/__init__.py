"""Built-in problems."""
from .kdv import KdvConfig, make_kdv
from .model2d import make_model2d
from .ou import make_ou, ou_analytic
from .quadratic import make_quadratic

__all__ = ["KdvConfig", "make_kdv", "make_model2d", "make_ou", "ou_analytic", "make_quadratic",
           "get_problem"]


def get_problem(name: str, **params):
    """Look up a problem factory by name (``model2d``, ``ou`` or ``kdv``)."""
    if name == "model2d":
        return make_model2d()
    if name == "ou":
        return make_ou(**params)
    if name == "kdv":
        return make_kdv(KdvConfig(**params))
    raise KeyError(f"unknown problem {name!r}")
