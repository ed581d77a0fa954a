import numpy as np
import pytest

from egocal import (CalibrationProblem, Design, FieldData, GpHyperparams,
                    InputSpace, KernelSpec, TrainedEmulator, generate_field_data,
                    get_problem, train_emulator)


@pytest.fixture(scope="session")
def unit_space():
    return InputSpace(x_box=[[0.0, 1.0]], tau_box=[[0.0, 1.0]])


@pytest.fixture(scope="session")
def case1_setup():
    """Field data, prior and a trained emulator for the 2-d benchmark."""
    pdef = get_problem("case1")
    field = generate_field_data(pdef, seed=0)
    prior = pdef.make_prior()
    sim = pdef.make_simulator()
    rng = np.random.default_rng(11)
    from egocal import maximin_lhd
    pts = maximin_lhd(2, 25, box=pdef.space.joint_box, seed=4)
    y = sim.run_design(pts, pdef.space.d)
    em = train_emulator(Design(pdef.space, pts, y), seed=1)
    return {"pdef": pdef, "field": field, "prior": prior, "emulator": em}


def make_emulator(space, pts, outputs, psi, sigma2=1.0, beta=0.0,
                  family="matern52", nugget=1e-8):
    """Emulator with prescribed hyperparameters (no fitting)."""
    design = Design(space, pts, outputs, check_dedup=False)
    hyper = GpHyperparams(beta=np.atleast_1d(beta), sigma2=sigma2,
                          kernel=KernelSpec(family, psi), nugget=nugget)
    return TrainedEmulator(design, hyper)
