######################################################################
# Copyright 2016, 2021 John J. Rofrano. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
######################################################################

"""
Log Handlers

This module contains utility functions to set up logging
consistently for every command
"""
import logging
import sys

LOG_FORMAT = "[%(asctime)s] [%(levelname)s] [%(module)s] %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S %z"


def init_logging(logger_name: str = "verirl", level=logging.INFO) -> logging.Logger:
    """Set up logging on standard error for the named logger"""
    logger = logging.getLogger(logger_name)
    logger.propagate = False
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
    logger.setLevel(level)
    # one handler, bound to whatever stderr is current
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    logger.addHandler(logging.StreamHandler(sys.stderr))
    formatter = logging.Formatter(LOG_FORMAT, DATE_FORMAT)
    for handler in logger.handlers:
        handler.setFormatter(formatter)
    logger.debug("Logging handler established")
    return logger
