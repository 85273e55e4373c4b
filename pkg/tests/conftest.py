import numpy as np
import pytest
import torch

from hsdiff import unet

# Per-class training/testing counts of the four benchmark scenes, with their training fractions.
BENCHMARK_SPLITS = {
    "indian_pines": (0.10, [
        (5, 41), (143, 1285), (83, 747), (24, 213), (48, 435), (73, 657), (3, 25), (48, 430),
        (2, 18), (97, 875), (245, 2210), (59, 534), (20, 185), (126, 1139), (39, 347), (9, 84),
    ]),
    "paviau": (0.05, [
        (332, 6299), (932, 17717), (105, 1994), (153, 2911), (67, 1278), (251, 4778), (67, 1263),
        (184, 3498), (47, 900),
    ]),
    "houston2018": (0.05, [
        (490, 9309), (1625, 30877), (34, 650), (680, 12915), (251, 4770), (226, 4290), (13, 253),
        (1989, 37783), (11187, 212565), (2293, 43573), (1702, 32327), (76, 1442), (2317, 44031),
        (493, 9372), (347, 6590), (575, 10925), (7, 139), (327, 6220), (269, 5100), (341, 6483),
    ]),
    "longkou": (0.005, [
        (172, 34339), (42, 8332), (15, 3016), (316, 62896), (21, 4130), (59, 11795), (335, 66721),
        (36, 7088), (26, 5203),
    ]),
}


def tiny_unet_config(D=2, H=8, base=8, mult=(1, 2), temb=16, groups=4):
    return unet.UNetConfig(in_channels=D, image_size=H, base_channels=base, stage_multipliers=mult,
                           time_embed_dim=temb, groups_per_norm=groups)


def toy_unet_config(D=4, H=16):
    return unet.UNetConfig(in_channels=D, image_size=H, base_channels=16, stage_multipliers=(1, 2),
                           time_embed_dim=64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
