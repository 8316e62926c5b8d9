import pytest
from helpers import ACCEPTANCE_LINES

from driftlab.pipeline import RunConfig, prepare_data

TINY = dict(
    n_molecules=300,
    min_tokens=4,
    max_tokens=20,
    seq_len=24,
    d_tok=24,
    d_enc=24,
    d_z=4,
    d_trunk=24,
    d_phi=8,
    d_g=24,
    vae_epochs=2,
    vae_batch=32,
    n_g=8,
    n_pos=8,
    n_unc=8,
    n_cal_groups=4,
    stage2_steps=3,
    groups_per_step=2,
    aux_steps=20,
    samples_per_alpha=20,
    eval_batch=10,
)


@pytest.fixture(scope="session")
def tiny_config():
    return RunConfig(**TINY).validate()


@pytest.fixture(scope="session")
def tiny_data(tiny_config):
    return prepare_data(tiny_config)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
