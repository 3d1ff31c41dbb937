"""The built-in module set."""

from __future__ import annotations

from .anomaly import AnomalyModule
from .base import Registry
from .capacity import CapacityModule
from .changepoint import ChangePointModule
from .correlation import CorrelationModule
from .idle import IdleModule
from .memleak import LeakModule

BUILTIN_MODULES = (
    AnomalyModule,
    CapacityModule,
    ChangePointModule,
    CorrelationModule,
    IdleModule,
    LeakModule,
)


def default_registry() -> Registry:
    """A fresh registry holding the six built-in analyses."""
    registry = Registry()
    for cls in BUILTIN_MODULES:
        registry.register_module(cls())
    return registry
