"""Leveled LSM key-value store with Bloom-filter saturation attacks and a PRP-keyed defence."""

from .bloom import BloomParams, BloomState, bf_measure_fpr, bf_theoretical_fpr
from .errors import (
    BudgetExhausted,
    CorruptBlock,
    CorruptRun,
    InvalidParams,
    KeyTooLong,
    LsmGuardError,
    OpenFailed,
    UsageError,
)
from .lsm import HardenedStore, LsmStore, PublicParams, lsm_new, open_store
from .prp import PrpKey, prp_keygen

__version__ = "0.1.0"

__all__ = [
    "BloomParams", "BloomState", "bf_measure_fpr", "bf_theoretical_fpr",
    "BudgetExhausted", "CorruptBlock", "CorruptRun", "InvalidParams", "KeyTooLong",
    "LsmGuardError", "OpenFailed", "UsageError",
    "HardenedStore", "LsmStore", "PublicParams", "lsm_new", "open_store",
    "PrpKey", "prp_keygen",
]
