import numpy as np
import pytest
import torch

from osediff.errors import DataError, DimensionError, TrainingFailureError
from osediff.vae import ToyVAE, measure_latent_roundtrip, pretrain_vae


@pytest.fixture(scope="module")
def fresh_vae():
    torch.manual_seed(0)
    return ToyVAE(latent_channels=4, width=8)


def test_encode_shape_contract(fresh_vae):
    x = torch.zeros(1, 3, 32, 32)
    z = fresh_vae.encode(x)
    assert tuple(z.shape) == (1, 4, 8, 8)


def test_decode_shape_and_range(fresh_vae):
    z = torch.randn(2, 4, 8, 8, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        x = fresh_vae.decode(z)
    assert tuple(x.shape) == (2, 3, 32, 32)
    assert float(x.min()) >= -1.0 and float(x.max()) <= 1.0


def test_determinism(fresh_vae):
    x = torch.randn(1, 3, 16, 16, generator=torch.Generator().manual_seed(2))
    assert torch.equal(fresh_vae.encode(x), fresh_vae.encode(x))
    z = torch.randn(1, 4, 4, 4, generator=torch.Generator().manual_seed(3))
    assert torch.equal(fresh_vae.decode(z), fresh_vae.decode(z))


def test_dimension_errors(fresh_vae):
    with pytest.raises(DimensionError):
        fresh_vae.encode(torch.zeros(1, 3, 30, 30))
    with pytest.raises(DimensionError):
        fresh_vae.decode(torch.zeros(1, 7, 8, 8))


def test_pretrained_reaches_floor(tiny_vae, tiny_cfg):
    _, manifest = tiny_vae
    assert manifest["holdout_psnr"] >= tiny_cfg.vae_pretrain.psnr_floor


def test_roundtrip_contract(tiny_vae, tiny_dataset):
    vae, manifest = tiny_vae
    # fresh draws (different seed) stay under the manifest threshold
    mae = measure_latent_roundtrip(vae, tiny_dataset.x_hq, seed=77)
    assert mae <= manifest["latent_roundtrip_threshold"]


def test_empty_dataset_rejected(tiny_cfg):
    with pytest.raises(DataError):
        pretrain_vae(np.zeros((0, 3, 16, 16), dtype=np.float32), tiny_cfg.model,
                     tiny_cfg.vae_pretrain, seed=0)


def test_unreachable_floor_fails(tiny_dataset, tiny_cfg):
    import dataclasses

    cfg = dataclasses.replace(tiny_cfg.vae_pretrain, epochs=1, psnr_floor=90.0)
    with pytest.raises(TrainingFailureError):
        pretrain_vae(tiny_dataset.x_hq[:8], tiny_cfg.model, cfg, seed=0)


def test_seeded_determinism(tiny_dataset, tiny_cfg):
    import dataclasses

    cfg = dataclasses.replace(tiny_cfg.vae_pretrain, epochs=2, psnr_floor=0.0)
    v1, _ = pretrain_vae(tiny_dataset.x_hq[:16], tiny_cfg.model, cfg, seed=9)
    v2, _ = pretrain_vae(tiny_dataset.x_hq[:16], tiny_cfg.model, cfg, seed=9)
    for (k1, p1), (k2, p2) in zip(v1.state_dict().items(), v2.state_dict().items()):
        assert k1 == k2
        assert torch.equal(p1, p2), k1
