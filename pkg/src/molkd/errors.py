"""Exception hierarchy shared across the package."""

from __future__ import annotations


class MolKDError(Exception):
    """Base class for every error raised by molkd."""


# --- parsing -------------------------------------------------------------


class SmilesError(MolKDError, ValueError):
    """A SMILES string could not be parsed.

    ``offset`` is the byte offset of the fault in ``text``.
    """

    def __init__(self, message: str, text: str = "", offset: int = 0):
        self.text = text
        self.offset = offset
        super().__init__(f"{message} at offset {offset} in {text!r}")


class EmptyInput(SmilesError):
    pass


class UnclosedRing(SmilesError):
    pass


class UnbalancedParen(SmilesError):
    pass


class UnknownElement(SmilesError):
    pass


class MalformedBracketAtom(SmilesError):
    pass


class ReactionFormatError(MolKDError, ValueError):
    pass


class BadColumnCount(ReactionFormatError):
    pass


class YieldOutOfRange(ReactionFormatError):
    pass


# --- features ------------------------------------------------------------


class EmptyCorpus(MolKDError, ValueError):
    pass


class UnseenValue(MolKDError, KeyError):
    pass


class VocabMismatch(MolKDError, ValueError):
    pass


# --- numerics ------------------------------------------------------------


class ShapeMismatch(MolKDError, ValueError):
    pass


class DimMismatch(ShapeMismatch):
    pass


class TapeError(MolKDError, RuntimeError):
    pass


class NonFiniteValue(MolKDError, FloatingPointError):
    pass


# --- training / evaluation ----------------------------------------------


class BatchTooSmall(MolKDError, ValueError):
    pass


class EmptySet(MolKDError, ValueError):
    pass


class EmptyCandidates(MolKDError, ValueError):
    pass


class EmptyMetricInput(MolKDError, ValueError):
    pass


class EmptyDataset(MolKDError, ValueError):
    pass


class SingleClass(MolKDError, ValueError):
    pass


class LabelOutOfDomain(MolKDError, ValueError):
    pass


class BetaOutOfRange(MolKDError, ValueError):
    pass


class ConfigError(MolKDError, ValueError):
    pass


# --- persistence ---------------------------------------------------------


class CheckpointError(MolKDError, ValueError):
    pass


class BadMagic(CheckpointError):
    pass


class TruncatedPayload(CheckpointError):
    pass
