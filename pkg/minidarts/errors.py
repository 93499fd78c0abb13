#!/usr/bin/env python3
"""
Error types
===========

Every failure the engine can report derives from MiniDartsError, so callers
that only care about "something in the search went wrong" catch one type.
"""

from typing import Dict, List, Optional, Tuple


class MiniDartsError(Exception):
    """Base class for all engine errors"""


class DomainError(MiniDartsError, ValueError):
    """Mathematically invalid input: non-finite values, bad shapes, unknown ops"""


class StateError(MiniDartsError, RuntimeError):
    """Operation called in the wrong order (e.g. backward before forward)"""


class ConfigError(MiniDartsError, ValueError):
    """Unresolvable configuration, preset or dataset request"""


class IntegrityError(MiniDartsError):
    """Missing or corrupt on-disk artifact"""

    def __init__(self, message: str, epoch: Optional[int] = None):
        super().__init__(message)
        self.epoch = epoch


class DivergenceError(MiniDartsError, ArithmeticError):
    """Loss, gradient or trajectory went non-finite"""

    def __init__(self, message: str, epoch: Optional[int] = None, step: Optional[int] = None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class ConventionNotFoundError(MiniDartsError):
    """No update convention reproduced every restoration target"""

    def __init__(self, message: str, nearest: Dict[Tuple[str, str, str], List[Optional[int]]]):
        super().__init__(message)
        self.nearest = nearest
