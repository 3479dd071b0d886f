# coding: utf8

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
Descriptive process exit codes, for improved code readability

Every command of the verirl CLI exits with one of these.
"""

EXIT_0_OK = 0
EXIT_1_RUNTIME = 1
EXIT_2_USAGE = 2
EXIT_3_SCHEMA = 3
EXIT_4_IO = 4
EXIT_5_PROVIDER = 5

TITLES = {
    EXIT_0_OK: "OK",
    EXIT_1_RUNTIME: "Runtime Error",
    EXIT_2_USAGE: "Usage Error",
    EXIT_3_SCHEMA: "Schema Error",
    EXIT_4_IO: "IO Error",
    EXIT_5_PROVIDER: "Provider Error",
}
