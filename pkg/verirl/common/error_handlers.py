# Copyright 2016, 2023 John J. Rofrano. All Rights Reserved.
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
# https://www.apache.org/licenses/LICENSE-2.0
"""
Module: error_handlers

Maps exceptions escaping a command to an exit code and a JSON error
object on standard error.
"""
import logging
from typing import Callable, Dict, Type

import click

from verirl.common import status
from verirl.common.jsonl import dumps
from verirl.decontam import DimensionMismatch, ProviderError, ZeroVector
from verirl.mathexpr import EvalError, ParseError
from verirl.models import ConfigError, DataValidationError, DatasetIOError
from verirl.verifier import InvalidChoice

logger = logging.getLogger("verirl")

HANDLERS: Dict[Type[BaseException], Callable[[BaseException], int]] = {}


def errorhandler(exc_type: Type[BaseException]):
    """Registers the decorated function as the handler of an exception type"""
    def decorator(func):
        HANDLERS[exc_type] = func
        return func
    return decorator


def handle(error: BaseException) -> int:
    """Runs the handler of the closest registered base class"""
    for klass in type(error).__mro__:
        if klass in HANDLERS:
            return HANDLERS[klass](error)
    return runtime_error(error)


def report(code: int, message: str) -> int:
    """Writes the JSON error object and returns the exit code"""
    click.echo(dumps({"status": code, "error": status.TITLES[code], "message": message}), err=True)
    return code


######################################################################
# Error Handlers
######################################################################
@errorhandler(DataValidationError)
def request_validation_error(error):
    """Handles invalid records, plans and phase data"""
    return schema_error(error)


@errorhandler(ParseError)
@errorhandler(InvalidChoice)
def schema_error(error):
    """Handles schema and parse errors with EXIT_3_SCHEMA"""
    message = str(error)
    logger.warning(message)
    return report(status.EXIT_3_SCHEMA, message)


@errorhandler(ConfigError)
def usage_error(error):
    """Handles invalid weights and hyperparameters with EXIT_2_USAGE"""
    message = str(error)
    logger.warning(message)
    return report(status.EXIT_2_USAGE, message)


@errorhandler(DatasetIOError)
@errorhandler(OSError)
def io_error(error):
    """Handles unreadable or unwritable files with EXIT_4_IO"""
    message = str(error)
    logger.error(message)
    return report(status.EXIT_4_IO, message)


@errorhandler(ProviderError)
@errorhandler(DimensionMismatch)
@errorhandler(ZeroVector)
def provider_error(error):
    """Handles embedding provider failures with EXIT_5_PROVIDER"""
    message = str(error)
    logger.error(message)
    return report(status.EXIT_5_PROVIDER, message)


@errorhandler(EvalError)
@errorhandler(Exception)
def runtime_error(error):
    """Handles everything else with EXIT_1_RUNTIME"""
    message = str(error)
    logger.critical(message)
    return report(status.EXIT_1_RUNTIME, message)
