import numpy as np
import pytest

from promptseg.backbone import BackboneConfig, init_backbone
from promptseg.checkpoint import save_checkpoint
from promptseg.data import generate, source_domain_config, target_domain_config, write_dataset
from promptseg.training import TrainConfig, pretrain_backbone


MICRO = BackboneConfig(height=32, width=32, patch_h=8, patch_w=8, embed_dim=16,
                       layers=2, heads=2, mlp_hidden=32, decoder_blocks=2,
                       mask_hidden=16)


def micro_source_config(seed=1):
    return source_domain_config(seed=seed, height=32, width=32,
                                radius_min=3, radius_max=6, particle_rate=3.0)


def micro_target_config(seed=2):
    return target_domain_config(seed=seed, height=32, width=32,
                                radius_min=3, radius_max=6, particle_rate=3.0)


@pytest.fixture(scope="session")
def micro_config():
    return MICRO


@pytest.fixture(scope="session")
def micro_source():
    return generate(micro_source_config(), 32)


@pytest.fixture(scope="session")
def micro_target():
    return generate(micro_target_config(), 32)


@pytest.fixture(scope="session")
def micro_backbone(micro_source):
    """A briefly pretrained, frozen micro backbone shared across tests."""
    store = init_backbone(MICRO, seed=0)
    pretrain_backbone(store, micro_source[:24],
                      TrainConfig(lr=1e-3, epochs=10, batch_size=4, seed=0),
                      MICRO)
    return store


@pytest.fixture(scope="session")
def micro_backbone_ckpt(micro_backbone, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "micro.ckpt"
    save_checkpoint(path, micro_backbone, meta=MICRO.to_meta())
    return path


@pytest.fixture(scope="session")
def micro_target_dir(micro_target, tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "target"
    write_dataset(root, micro_target, micro_target_config(), "target")
    return root
