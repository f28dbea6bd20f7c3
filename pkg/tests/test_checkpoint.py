import json

import numpy as np
import pytest
import torch

from latent3d.checkpoint import (
    load_module,
    load_optimizer_tensors,
    load_tensors,
    module_hash,
    optimizer_tensors,
    read_manifest,
    save_checkpoint,
)
from latent3d.errors import IoFailure, MissingComponent
from latent3d.model import build_model
from latent3d.projector import build_projector

from conftest import tiny_model_config, tiny_projector_config


def test_round_trip(tmp_path):
    m = build_model(tiny_model_config(), seed=1)
    p = build_projector(tiny_projector_config(zero_init_final=False), seed=2)
    save_checkpoint(tmp_path / "c", m, p, {"step": 7, "config_hash": "abc"})
    man = read_manifest(tmp_path / "c")
    assert man["step"] == 7 and man["has_projector"] and man["vlm_hash"] == module_hash(m)
    m2 = build_model(tiny_model_config(), seed=99)
    p2 = build_projector(tiny_projector_config(zero_init_final=False), seed=98)
    load_module(m2, tmp_path / "c", "vlm")
    load_module(p2, tmp_path / "c", "projector")
    assert module_hash(m2) == module_hash(m) and module_hash(p2) == module_hash(p)
    for arr in load_tensors(tmp_path / "c", "vlm").values():
        assert arr.dtype.byteorder in "<="


def test_overwrite_is_atomic_replace(tmp_path):
    m = build_model(tiny_model_config(), seed=1)
    save_checkpoint(tmp_path / "c", m, None, {"step": 1})
    save_checkpoint(tmp_path / "c", m, None, {"step": 2})
    assert read_manifest(tmp_path / "c")["step"] == 2
    assert not (tmp_path / "c.tmp").exists()


def test_missing_projector(tmp_path):
    save_checkpoint(tmp_path / "c", build_model(tiny_model_config(), seed=1), None, {})
    assert read_manifest(tmp_path / "c")["has_projector"] is False
    with pytest.raises(MissingComponent):
        load_module(build_projector(tiny_projector_config(), seed=2), tmp_path / "c", "projector")


def test_bad_manifest(tmp_path):
    with pytest.raises(IoFailure):
        read_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(IoFailure):
        read_manifest(tmp_path)


def test_optimizer_state_round_trip():
    lin = torch.nn.Linear(3, 2)
    names = [n for n, _ in lin.named_parameters()]
    opt = torch.optim.AdamW(lin.parameters(), lr=0.1)
    lin(torch.randn(4, 3)).sum().backward()
    opt.step()
    flat = {k: v.numpy() for k, v in optimizer_tensors(opt, names).items()}
    opt2 = torch.optim.AdamW(lin.parameters(), lr=0.1)
    load_optimizer_tensors(opt2, names, flat)
    for k, v in optimizer_tensors(opt2, names).items():
        assert np.array_equal(v.numpy(), flat[k])
