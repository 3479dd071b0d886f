"""
Command Steps

Runs verirl commands inside the scenario directory and checks what they leave behind
"""
import json
import shlex
from os import path

from behave import when, then

from verirl.cli import cli


def read_records(filename):
    with open(filename, encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]


def output_records(context):
    records = []
    for line in context.result.output.splitlines():
        try:
            record = json.loads(line)
        except ValueError:
            continue
        if isinstance(record, dict):
            records.append(record)
    return records


@when('I run verirl "{command}"')
def step_impl(context, command):
    args = ["--out-dir", "."] + shlex.split(command)
    context.result = context.runner.invoke(cli, args)
    print(f"verirl {command} => {context.result.exit_code}")


@then('the command should exit with status {code:d}')
def step_impl(context, code):
    assert context.result.exit_code == code, \
        f"expected exit {code}, got {context.result.exit_code}: {context.result.output}"


@then('I should see "{text}" in the output')
def step_impl(context, text):
    assert text in context.result.output, f"'{text}' not in {context.result.output!r}"


@then('the answer should be reported as equivalent')
def step_impl(context):
    verdicts = [r for r in output_records(context) if "equivalent" in r]
    assert verdicts and verdicts[0]["equivalent"] is True, context.result.output


@then('"{filename}" should give record "{record_id}" a total reward of "{reward}"')
def step_impl(context, filename, record_id, reward):
    scores = {r["id"]: r["r_total"] for r in read_records(filename)}
    assert abs(scores[record_id] - float(reward)) < 1e-9, f"{record_id}: {scores[record_id]} != {reward}"


@then('"{filename}" should hold the ids "{ids}"')
def step_impl(context, filename, ids):
    assert [r["id"] for r in read_records(filename)] == ids.split(",")


@then('"{filename}" should remove "{record_id}" at stage "{stage}"')
def step_impl(context, filename, record_id, stage):
    stages = {r["id"]: r["stage"] for r in read_records(filename)}
    assert stages.get(record_id) == stage, f"{record_id}: {stages.get(record_id)} != {stage}"


@then('"{filename}" should be empty')
def step_impl(context, filename):
    assert read_records(filename) == []


@then('"{filename}" should hold {count:d} "{modality}" records')
def step_impl(context, filename, count, modality):
    records = read_records(filename)
    assert len(records) == count
    assert all(r["modality"] == modality for r in records)


@then('"{filename}" should hold {count:d} records')
def step_impl(context, filename, count):
    assert len(read_records(filename)) == count


@then('the phases "{phases}" should have been evaluated')
def step_impl(context, phases):
    evaluated = [r["phase"] for r in output_records(context) if "total_reward" in r]
    assert evaluated == phases.split(","), evaluated


@then('"{filename}" should exist')
def step_impl(context, filename):
    assert path.exists(filename)
