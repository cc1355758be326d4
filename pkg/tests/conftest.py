import os

import pytest

from pacbti_sim.assembler import InstrumentConfig, assemble, instrument, parse
from pacbti_sim.device import Device
from pacbti_sim.harness import FIXTURES_DIR, SCENARIOS_DIR, features_for

PLAIN = InstrumentConfig()
FULL = InstrumentConfig(pac=True, bti=True)

# benign inputs per shipped fixture
BENIGN_INPUTS = {
    "echo_service.s": [[1, 2, 3], [4, 5]],
    "fib_recursive.s": [[12]],
    "loop_sum.s": [[25]],
    "bubble_sort.s": [],
    "brute_target.s": [[7], [8], [9]],
    "reuse_demo.s": [],
    "fop_service.s": [],
}
OVERHEAD_CORPUS = ["echo_service.s", "fib_recursive.s", "loop_sum.s", "bubble_sort.s"]


def fixture_path(name):
    return os.path.join(FIXTURES_DIR, name)


def scenario_path(name):
    return os.path.join(SCENARIOS_DIR, name)


def load_fixture(name):
    with open(fixture_path(name)) as f:
        return parse(f.read())


def make_device(source_or_program, cfg=FULL, seed=1, inputs=(), **kw):
    program = parse(source_or_program) if isinstance(source_or_program, str) else source_or_program
    image = assemble(instrument(program, cfg))
    kw.setdefault("features", features_for(cfg))
    dev = Device(image, seed=seed, **kw).provision()
    dev.machine.inputs.extend(list(m) for m in inputs)
    return dev


@pytest.fixture
def echo_program():
    return load_fixture("echo_service.s")
