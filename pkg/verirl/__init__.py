######################################################################
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# https://www.apache.org/licenses/LICENSE-2.0
######################################################################

"""
Package: verirl

Verifiable-reward reinforcement learning: rule-based rewards, GRPO,
a three-phase curriculum, train/test decontamination and a synthetic
environment to run it all on. The command line lives in verirl.cli.
"""

__version__ = "1.0.0"
