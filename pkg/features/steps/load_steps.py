######################################################################
# Copyright 2016, 2023 John J. Rofrano. All Rights Reserved.
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
Load Steps

Writes the JSONL files a scenario's commands read, from the scenario tables
"""
from behave import given

from verirl.common.jsonl import write_jsonl
from verirl.models import GroundTruth, Sample, TruthType


@given('the following grading records in "{filename}"')
def step_impl(context, filename):
    """ Write one grading record per table row """
    records = []
    for row in context.table:
        record = {
            "id": row["id"],
            "output": row["output"],
            "truth": row["truth"],
            "truth_type": row["truth_type"],
        }
        if row.get("options"):
            record["options"] = row["options"].split(",")
        records.append(record)
    context.files[filename] = write_jsonl(records, filename)
    print(f"Wrote {context.files[filename]} grading records to {filename}")


@given('the following samples in "{filename}"')
def step_impl(context, filename):  # noqa: F811
    """ Write one text sample per table row """
    samples = [
        Sample(id=row["id"], question=row["question"], truth=GroundTruth(TruthType.STRING, "n/a"))
        for row in context.table
    ]
    context.files[filename] = write_jsonl((s.serialize() for s in samples), filename)
    print(f"Wrote {context.files[filename]} samples to {filename}")
