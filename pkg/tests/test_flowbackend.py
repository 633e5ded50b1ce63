import numpy as np
import pytest
import torch
from scipy.ndimage import gaussian_filter

from layersep.flowbackend import (
    BackendUnavailable,
    ConstantFlowBackend,
    FarnebackBackend,
    TorchScriptBackend,
    TranslationOracle,
    estimate_flow,
    ordered_pairs,
    pairwise_flows,
    pseudo_gt_layer_flows,
)
from layersep.flowio import FloFormatError, read_flo, write_flo
from layersep.tensorgrid import warp_bilinear


def smooth_texture(h, w, seed, sigma=2.0, channels=1):
    rng = np.random.default_rng(seed)
    img = np.stack([gaussian_filter(rng.random((h, w)), sigma) for _ in range(channels)])
    img = (img - img.min()) / (img.max() - img.min())
    return torch.from_numpy(img)


def translated_sequence(tex, t, step, size):
    """Frame j shows the texture shifted so that frame content moves by ``step`` per frame."""
    h, w = size
    dx, dy = step
    frames = []
    for j in range(t):
        ox, oy = 40 - j * dx, 40 - j * dy
        frames.append(tex[:, oy:oy + h, ox:ox + w])
    return torch.stack(frames)


def test_constant_backend_registered_shift():
    a, b = torch.rand(1, 3, 6, 6), torch.rand(1, 3, 6, 6)
    flow = estimate_flow(ConstantFlowBackend((3, -2)), a, b)
    assert torch.all(flow[:, 0] == 3) and torch.all(flow[:, 1] == -2)


def test_constant_backend_identical_inputs_zero():
    a = torch.rand(1, 3, 6, 6)
    assert torch.all(estimate_flow(ConstantFlowBackend((3, -2)), a, a.clone()) == 0)


def test_translation_oracle_recovers_shift():
    tex = smooth_texture(128, 128, 0)
    seq = translated_sequence(tex, 2, (3, -2), (48, 48))
    flow = TranslationOracle(max_displacement=6).estimate(seq[0], seq[1])
    assert torch.all(flow[0] == -3) and torch.all(flow[1] == 2)
    # registration convention: warp(src, V) ~ dst away from the border
    warped = warp_bilinear(seq[0], flow)
    assert torch.allclose(warped[:, 5:-5, 5:-5], seq[1][:, 5:-5, 5:-5])


def test_translation_oracle_identical_zero():
    a = smooth_texture(32, 32, 1)
    assert torch.all(TranslationOracle().estimate(a, a) == 0)


def test_farneback_translation_epe_below_one_pixel():
    tex = smooth_texture(160, 160, 2, sigma=3.0)
    seq = translated_sequence(tex, 2, (4, 0), (64, 64))
    flow = FarnebackBackend().estimate(seq[0], seq[1])
    # content moves +4 px, so src(p + V) = dst(p) needs V = (-4, 0)
    epe = torch.sqrt((flow[0] + 4) ** 2 + flow[1] ** 2)
    assert epe[8:-8, 8:-8].mean().item() < 1.0


def test_torchscript_missing_weights_names_path(tmp_path, monkeypatch):
    missing = tmp_path / "pwc.pt"
    with pytest.raises(BackendUnavailable, match=str(missing)):
        TorchScriptBackend(missing)
    monkeypatch.delenv("FLOW_WEIGHTS", raising=False)
    with pytest.raises(BackendUnavailable, match="FLOW_WEIGHTS"):
        TorchScriptBackend()


class _ShiftNet(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.offset = torch.nn.Parameter(torch.tensor([1.5, -0.5]))

    def forward(self, first, second):
        n, _, h, w = first.shape
        return self.offset.view(1, 2, 1, 1).expand(n, 2, h, w)


def test_torchscript_backend_loads_env_weights(tmp_path, monkeypatch):
    path = tmp_path / "net.pt"
    torch.jit.script(_ShiftNet()).save(str(path))
    monkeypatch.setenv("FLOW_WEIGHTS", str(path))
    backend = TorchScriptBackend()
    before = backend.checksum()
    flow = backend.estimate(torch.rand(2, 3, 5, 7), torch.rand(2, 3, 5, 7))
    assert flow.shape == (2, 2, 5, 7)
    assert torch.allclose(flow[:, 0], torch.tensor(1.5))
    assert backend.checksum() == before


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        ConstantFlowBackend().estimate(torch.rand(1, 1, 4, 4), torch.rand(1, 1, 4, 5))


def test_ordered_pairs_cover_all_distinct():
    for t in range(2, 8):
        pairs = ordered_pairs(t)
        assert len(pairs) == t * (t - 1)
        assert set(pairs) == {(j, k) for j in range(t) for k in range(t) if j != k}


def test_pseudo_gt_static_is_zero():
    seq = smooth_texture(32, 32, 3, channels=3).unsqueeze(0).repeat(3, 1, 1, 1)
    gt = pseudo_gt_layer_flows(TranslationOracle(), seq, seq.clone(), 2)
    assert set(gt) == {"B", "R"}
    assert all(torch.all(v == 0) for v in gt.values())


def test_pseudo_gt_coarse_unit_shift():
    tex = smooth_texture(160, 160, 4, channels=1).repeat(3, 1, 1)
    seq = translated_sequence(tex, 2, (32, 0), (64, 64))
    gt = pseudo_gt_layer_flows(TranslationOracle(max_displacement=32), seq, seq, 5)
    assert gt["B"].shape == (2, 2, 2, 2, 2)
    # frame 1 registered onto frame 0 needs +1 coarse pixel
    assert torch.all(gt["B"][1, 0, 0] == 1.0) and torch.all(gt["B"][1, 0, 1] == 0.0)
    assert torch.all(gt["B"][0, 1, 0] == -1.0)


def test_pseudo_gt_pair_count():
    seq = torch.rand(3, 1, 8, 8)
    flows = pairwise_flows(ConstantFlowBackend((1, 0)), seq)
    off_diag = [(j, k) for j in range(3) for k in range(3) if j != k]
    assert len(off_diag) == 6
    assert all(torch.all(flows[j, k, 0] == 1) for j, k in off_diag)
    assert all(torch.all(flows[i, i] == 0) for i in range(3))


def test_pseudo_gt_obstruction_only_background():
    seq = torch.rand(2, 1, 8, 8)
    assert set(pseudo_gt_layer_flows(ConstantFlowBackend(), seq, None, 1)) == {"B"}


class TestFlo:
    def test_roundtrip(self, tmp_path):
        flow = np.random.default_rng(0).normal(size=(5, 7, 2)).astype(np.float32)
        write_flo(tmp_path / "a.flo", flow)
        assert np.array_equal(read_flo(tmp_path / "a.flo"), flow)

    def test_zero_2x2_byte_layout(self, tmp_path):
        write_flo(tmp_path / "z.flo", np.zeros((2, 2, 2)))
        data = (tmp_path / "z.flo").read_bytes()
        assert len(data) == 4 + 8 + 32
        assert np.frombuffer(data[:4], "<f4")[0] == np.float32(202021.25)
        assert data[12:] == bytes(32)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.flo").write_bytes(np.zeros(3, "<f4").tobytes() + bytes(32))
        with pytest.raises(FloFormatError, match="magic"):
            read_flo(tmp_path / "bad.flo")

    def test_truncated(self, tmp_path):
        write_flo(tmp_path / "t.flo", np.zeros((4, 4, 2)))
        data = (tmp_path / "t.flo").read_bytes()
        (tmp_path / "t.flo").write_bytes(data[:-5])
        with pytest.raises(FloFormatError):
            read_flo(tmp_path / "t.flo")
