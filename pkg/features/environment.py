"""
Environment for Behave Testing
"""
import logging
import os
import tempfile
from os import getenv

from behave import fixture, use_fixture
from click.testing import CliRunner

# Constants
LOG_LEVEL = getenv('VERIRL_LOG_LEVEL', 'WARNING')


######################################################################
# Before and After Hooks
######################################################################
def before_all(context):
    """Executed once before all tests"""
    context.runner = CliRunner()
    context.log_level = LOG_LEVEL
    context.config.setup_logging()


def after_all(context):
    """Executed once after all tests"""
    logging.getLogger("verirl").handlers.clear()


######################################################################
# Behave Fixture for a scratch directory per scenario
######################################################################
@fixture
def scratch_dir(context, *args, **kwargs):
    """Gives each scenario its own empty working directory"""
    home = os.getcwd()
    with tempfile.TemporaryDirectory() as tmp:
        os.chdir(tmp)
        context.workdir = tmp
        try:
            yield tmp
        finally:
            os.chdir(home)


def before_scenario(context, scenario):
    """Executed before each scenario"""
    use_fixture(scratch_dir, context)
    context.result = None
    context.files = {}
