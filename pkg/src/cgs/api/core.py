import logging
import os

from dataclasses import fields


_logger = None


def logger() -> logging.Logger:
    """
    Return the logger to use.

    :return: the logger
    :rtype: logging.Logger
    """
    global _logger
    if _logger is None:
        _logger = logging.getLogger("cgs.api.core")
    return _logger


def get_default_config_dir():
    """
    Returns the default config dir.

    :return: the default config dir
    :rtype: str
    """
    home_dir = os.path.expanduser("~")
    config_dir = os.path.join(home_dir, ".config", "cgs")
    if not os.path.exists(config_dir):
        logger().info("Creating dir: %s" % config_dir)
        os.makedirs(config_dir)
    return config_dir


def get_default_bank_dir():
    """
    Returns the directory of the default foreground asset bank.

    :return: the bank directory
    :rtype: str
    """
    return os.path.join(get_default_config_dir(), "bank")


class CGSError(Exception):
    """
    Base class for all errors raised by the library. The exit code is used
    by the command-line tools.
    """
    exit_code = 1


class DataError(CGSError):
    """
    Invalid or inconsistent input data.
    """
    exit_code = 3


class NumericError(CGSError):
    """
    Non-finite values encountered during optimization.
    """
    exit_code = 4


class BehindCamera(DataError):
    pass


class NonRigidPose(DataError):
    pass


class TooFewPoints(DataError):
    pass


class InsufficientFrames(DataError):
    pass


class NoVisibility(DataError):
    pass


class DuplicateObjectId(DataError):
    pass


class OutsideLifespan(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class BadKappa(DataError):
    pass


class EmptyInput(DataError):
    pass


class EmptyMask(DataError):
    pass


class InvalidDepth(DataError):
    pass


class BadBounds(DataError):
    pass


class UnknownTrajectory(DataError):
    pass


class UnknownObject(DataError):
    pass


class BadTrajectory(DataError):
    pass


class ServiceUnreachable(DataError):
    pass


class MalformedResponse(DataError):
    pass


class UnparseableDescription(DataError):
    pass


class ParseError(DataError):
    pass


class VersionMismatch(DataError):
    pass


class MissingReference(DataError):
    pass


class UnknownAsset(DataError):
    pass


class DegenerateAsset(DataError):
    pass


class BankLocked(DataError):
    pass


def dataclass_from_dict(cls, d: dict, section: str = None):
    """
    Instantiates a config dataclass from a dictionary, rejecting unknown keys.
    Calls validate() on the result if the class defines it.

    :param cls: the dataclass
    :param d: the dictionary (may be None)
    :type d: dict
    :param section: the config section name for error messages
    :type section: str
    :return: the instance
    """
    if d is None:
        d = dict()
    if not isinstance(d, dict):
        raise ParseError("Section '%s' must be a mapping" % (section or cls.__name__))
    known = set(f.name for f in fields(cls))
    unknown = sorted(set(d.keys()) - known)
    if len(unknown) > 0:
        raise ParseError("Unknown option(s) in section '%s': %s" % (section or cls.__name__, ", ".join(unknown)))
    result = cls(**d)
    if hasattr(result, "validate"):
        result.validate()
    return result
