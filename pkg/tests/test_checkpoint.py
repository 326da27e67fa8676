import json
import zipfile

import pytest
import torch

from lsm.checkpoint import Checkpoint, load_checkpoint, restore_optimizer, save_checkpoint
from lsm.errors import CheckpointError
from lsm.model import LsmConfig, build_model, sequence_loss, with_overrides
from lsm.tokenizer import SEQ_LEN


@pytest.mark.parametrize("seed,overrides", [
    (0, {}),
    (1, dict(rope="learned_frequency", norm="layer", ffn_gated=False, activation="gelu_new")),
    (2, dict(n_kv_heads=1, activation="gelu_tanh", d_model=32, n_q_heads=2)),
])
def test_save_load_forward_identical(tmp_path, seed, overrides):
    model = build_model(with_overrides(LsmConfig(), **overrides), seed).eval()
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, metadata={"step": 7, "seed": seed, "loss_history": [1.0, 0.5]})
    ckpt = load_checkpoint(path)
    x = torch.randint(0, 128, (2, SEQ_LEN))
    with torch.no_grad():
        assert torch.equal(model(x), ckpt.model(x))
    assert ckpt.config == model.config
    assert ckpt.metadata["loss_history"] == [1.0, 0.5]


def test_equal_models_give_equal_bytes(tmp_path):
    save_checkpoint(build_model(LsmConfig(), 3), tmp_path / "a.ckpt")
    save_checkpoint(build_model(LsmConfig(), 3), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_archive_layout(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(build_model(LsmConfig(), 0), path)
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("checkpoint.json"))
        entry = header["tensors"][0]
        assert header["format"] == "lsm-checkpoint" and header["version"] == 1
        assert entry["dtype"] == "f32le"
        assert len(zf.read(entry["file"])) == 4 * torch.Size(entry["shape"]).numel()


def test_truncated_file_raises_structured_error(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(build_model(LsmConfig(), 0), path)
    path.write_bytes(path.read_bytes()[: path.stat().st_size // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_wrong_version_and_missing_tensor(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(build_model(LsmConfig(), 0), path)
    with zipfile.ZipFile(path) as zf:
        members = {n: zf.read(n) for n in zf.namelist()}
    header = json.loads(members["checkpoint.json"])

    def rewrite(h):
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("checkpoint.json", json.dumps(h))
            for n, data in members.items():
                if n != "checkpoint.json":
                    zf.writestr(n, data)

    rewrite({**header, "version": 99})
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
    rewrite({**header, "tensors": header["tensors"][1:]})
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(path)


def test_not_a_zip(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_optimizer_state_round_trip(tmp_path):
    model = build_model(LsmConfig(), 0)
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    tokens = torch.randint(1, 102, (2, SEQ_LEN))
    for _ in range(2):
        opt.zero_grad()
        sequence_loss(model, tokens, 0.5).backward()
        opt.step()
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, optimizer=opt)
    ckpt = load_checkpoint(path)
    model2 = ckpt.model.train()
    opt2 = torch.optim.AdamW(model2.parameters(), lr=1e-3)
    restore_optimizer(opt2, model2, ckpt.optimizer_state)
    for o in (opt, opt2):
        o.zero_grad()
    sequence_loss(model, tokens, 0.5).backward()
    sequence_loss(model2, tokens, 0.5).backward()
    opt.step()
    opt2.step()
    assert all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), model2.state_dict().values()))


def test_checkpoint_from_model_detaches():
    model = build_model(LsmConfig(), 0)
    ckpt = Checkpoint.from_model(model)
    with torch.no_grad():
        model.tok_emb.weight.add_(1.0)
    assert not torch.equal(ckpt.state["tok_emb.weight"], model.tok_emb.weight)
