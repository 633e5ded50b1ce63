import zipfile

import pytest
import torch

from layersep.checkpoint import (
    Checkpoint,
    CheckpointFormatError,
    CheckpointMismatch,
    load_checkpoint,
    param_checksum,
    save_checkpoint,
)
from layersep.decompnet import DecompositionModel, ModelConfig

SMALL = ModelConfig(channels=1, feature_width=4, flow_width=8, group_width=8, recon_width=8, search_range=2)


def trained_checkpoint(stage="stage2"):
    torch.manual_seed(0)
    model = DecompositionModel(SMALL)
    opt = torch.optim.Adam(model.recon_parameters(), lr=1e-3)
    loss = sum(p.sum() for p in model.recon_parameters())
    loss.backward()
    opt.step()
    return Checkpoint.from_model(model, stage, seed=3, iteration=7, train_config={"lr_final": 1e-5},
                                 optimizer_state=opt.state_dict())


def test_roundtrip_bitwise(tmp_path):
    ck = trained_checkpoint()
    path = save_checkpoint(ck, tmp_path / "a.ckpt")
    back = load_checkpoint(path)
    assert list(back.params) == list(ck.params)
    for name in ck.params:
        assert torch.equal(back.params[name], ck.params[name])
        assert back.params[name].dtype == ck.params[name].dtype
    assert (back.stage, back.seed, back.iteration) == ("stage2", 3, 7)
    assert back.train_config == {"lr_final": 1e-5}
    model = back.build_model()
    assert param_checksum(model.state_dict()) == param_checksum(ck.params)


def test_resave_is_byte_identical(tmp_path):
    ck = trained_checkpoint()
    a = save_checkpoint(ck, tmp_path / "a.ckpt")
    b = save_checkpoint(load_checkpoint(a), tmp_path / "b.ckpt")
    assert a.read_bytes() == b.read_bytes()


def test_optimizer_state_restores(tmp_path):
    ck = trained_checkpoint()
    back = load_checkpoint(save_checkpoint(ck, tmp_path / "a.ckpt"))
    model = back.build_model()
    opt = torch.optim.Adam(model.recon_parameters(), lr=1e-3)
    opt.load_state_dict(back.optimizer_state)
    for idx, st in ck.optimizer_state["state"].items():
        assert torch.equal(opt.state_dict()["state"][idx]["exp_avg"], st["exp_avg"])


def test_missing_manifest(tmp_path):
    path = tmp_path / "bad.ckpt"
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("params/0000.npy", b"")
    with pytest.raises(CheckpointFormatError, match="manifest"):
        load_checkpoint(path)


def test_truncated_archive(tmp_path):
    path = save_checkpoint(trained_checkpoint(), tmp_path / "a.ckpt")
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_hash_mismatch_names_both(tmp_path):
    ck = load_checkpoint(save_checkpoint(trained_checkpoint(), tmp_path / "a.ckpt"))
    other = DecompositionModel(ModelConfig(channels=1, feature_width=6, flow_width=8, group_width=8,
                                           recon_width=8, search_range=2))
    with pytest.raises(CheckpointMismatch) as err:
        ck.load_into(other)
    assert ck.architecture_hash in str(err.value) and other.architecture_hash() in str(err.value)


def test_stage_tag_checked(tmp_path):
    path = save_checkpoint(trained_checkpoint("stage1"), tmp_path / "a.ckpt")
    assert load_checkpoint(path, expected_stage="stage1").stage == "stage1"
    with pytest.raises(ValueError, match="stage"):
        load_checkpoint(path, expected_stage=("stage2", "meta"))


def test_unknown_stage_rejected():
    with pytest.raises(ValueError):
        trained_checkpoint("warmup")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.ckpt")
