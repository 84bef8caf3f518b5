import importlib.resources as resources

import numpy as np
import pytest

from contscene import scenes as sc
from contscene.labels import load_mapping
from contscene.network import ModelConfig
from contscene.training import DomainTask, pretrain


def small_domain_spec(name):
    """16x24 variants of the built-in domains, for fast training tests."""
    objects = {
        "A": (sc.ObjectRule(cont_id=5, prob=0.9, count=(1, 2), width=(3, 5),
                            height=(2, 3), band="road"),),
        "B": (sc.ObjectRule(cont_id=5, prob=0.7, count=(1, 1), width=(3, 5),
                            height=(2, 3), band="road"),
              sc.ObjectRule(cont_id=6, prob=0.9, count=(1, 2), width=(2, 4),
                            height=(2, 3), band="road"),
              sc.ObjectRule(cont_id=7, prob=0.6, count=(1, 1), width=(2, 3),
                            height=(2, 2), band="ground"),
              sc.ObjectRule(cont_id=8, prob=0.7, count=(1, 1), width=(3, 5),
                            height=(2, 2), band="sky"),),
        "C": (sc.ObjectRule(cont_id=5, prob=0.7, count=(1, 1), width=(3, 5),
                            height=(2, 3), band="road"),
              sc.ObjectRule(cont_id=10, prob=0.9, count=(1, 1), width=(4, 8),
                            height=(2, 3), band="ground"),
              sc.ObjectRule(cont_id=9, prob=0.8, count=(1, 2), width=(3, 6),
                            height=(2, 2), band="ground"),
              sc.ObjectRule(cont_id=11, prob=0.5, count=(1, 1), width=(2, 4),
                            height=(2, 2), band="ground"),),
    }[name]
    big = sc.builtin_spec(name)
    return sc.DomainSpec(**{
        **big.__dict__, "height": 16, "width": 24,
        "building_count": (1, 2), "building_width": (2, 5), "building_height": (2, 6),
        "vegetation_count": (0, 1), "objects": objects,
    })


SMALL_CFG = ModelConfig(n_blocks=2, channels=(12, 8), hidden=8, z_dim=4,
                        base_h=8, base_w=12, d_channels=(8, 12, 16))


@pytest.fixture(scope="session")
def toy_registry():
    text = (resources.files("contscene") / "data" / "toy_abc.csv").read_text("utf-8")
    return load_mapping(text)


@pytest.fixture(scope="session")
def small_cfg():
    return SMALL_CFG


@pytest.fixture(scope="session")
def ds_a():
    return sc.make_dataset(small_domain_spec("A"), 24, 500)


@pytest.fixture(scope="session")
def ds_b():
    return sc.make_dataset(small_domain_spec("B"), 24, 900)


@pytest.fixture(scope="session")
def ckpt_a(toy_registry, ds_a):
    """A briefly pretrained base checkpoint shared by the fast tests."""
    task = DomainTask(domain="A", step=0, iterations=5, batch_size=1, seed=3)
    ckpt, _ = pretrain(SMALL_CFG, toy_registry, ds_a, task)
    return ckpt
