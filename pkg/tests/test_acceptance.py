"""Acceptance criteria 1-11.  A one-line verdict per criterion is printed in
the terminal summary (see ``conftest.pytest_terminal_summary``)."""
import math
import time

import numpy as np
import pytest
import torch

from mocgan import kernels
from mocgan.backbones import CropEncoder, RegionEncoder
from mocgan.checkpoint import state_checksum
from mocgan.cli import main as cli_main
from mocgan.config import LAMBDA_DEFAULTS, LOSS_NAMES, ModelConfig
from mocgan.damsm import MatchingBatch, aggregate_relevance, damsm_loss, region_context, uniform_loss_value
from mocgan.discriminators import ObjectDiscriminator, PatchDiscriminator, PhraseDiscriminator
from mocgan.evaluation import ActivationStats, fid, inception_score
from mocgan.generator import CRM, Generator
from mocgan.implicit_graph import (
    GraphConv,
    ImplicitGraph,
    ImplicitGraphEncoder,
    ImplicitRelationEstimator,
    build_pairs,
)
from mocgan.losses import LossBundle, box_l1
from mocgan.scene_composer import Aggregator, BoxRegressor, GraphSemanticMap
from mocgan.text_encoder import TextEncoder
from mocgan.training import Trainer

from test_kernels import brute_force, random_case

criterion = pytest.mark.criterion


# -- 1 ----------------------------------------------------------------------------------


@criterion(1, "shape conformance at 64/128/256")
def test_c01_shape_conformance():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    cfg = ModelConfig()
    with torch.no_grad():
        te = TextEncoder(40, 50, 256).eval()
        caps = torch.zeros(1, 20, dtype=torch.long)
        caps[0, :12] = torch.arange(2, 14)
        words, sent, mask = te(caps, torch.tensor([12]))
        assert words.shape == (1, 256, 20) and sent.shape == (1, 256) and int(mask.sum()) == 12

        o2i = torch.zeros(3, dtype=torch.long)
        pairs, owners = build_pairs(o2i)
        ire = ImplicitRelationEstimator()
        v_ir, beta, q = ire(torch.randn(3, 50), torch.randn(1, 50), torch.randn(1, 20, 50), words, mask, pairs, owners)
        assert q.shape == (6, 50) and beta.shape == (6, 20) and v_ir.shape == (6, 128)
        feats = ImplicitGraphEncoder(10).eval()(torch.tensor([1, 2, 3]), v_ir, pairs, owners, 1)
        assert feats.v_o.shape == (3, 128) and feats.v_r.shape == (6, 128)
        assert feats.u.shape == (6, 128) and feats.u_bar.shape == (1, 128)

        f, f_bar = RegionEncoder(128)(torch.rand(1, 3, 64, 64))
        assert f.shape == (1, 128, 289) and f_bar.shape == (1, 128)
        assert BoxRegressor()(feats.v_o).shape == (3, 4)
        assert GraphSemanticMap(128, 64, 256)(feats.u_bar, 64).shape == (1, 64, 64, 64)

        agg0 = Aggregator(192, 256)
        assert agg0(torch.zeros(1, 128, 64, 64), torch.zeros(1, 64, 64, 64)).shape == (1, 256, 64, 64)
        agg1 = Aggregator(320, 256)
        assert agg1(torch.zeros(1, 64, 64, 64), torch.zeros(1, 128, 64, 64), torch.zeros(1, 128, 64, 64)).shape == (1, 256, 64, 64)
        crm = CRM(256, 1024, 512)
        assert crm.net[0].in_channels == 1280 and crm.net[0].out_channels == 512
        assert crm(torch.zeros(1, 256, 64, 64), torch.zeros(1, 1024, 4, 4), 8).shape == (1, 512, 8, 8)

        gen = Generator(cfg).eval()
        assert [c.net[0].in_channels for c in gen.refiners[0].crms] == [256, 1280, 768, 512, 384]
        assert [c.net[0].out_channels for c in gen.refiners[0].crms] == [1024, 512, 256, 128, 64]
        graph = ImplicitGraph(torch.tensor([1, 2, 3]), feats.v_o, v_ir, pairs, o2i, owners)
        boxes = torch.tensor([[0, 0, .5, .5], [.5, .5, 1, 1], [.2, .1, .7, .4]])
        hidden, images = gen(feats, graph, boxes)
        assert [tuple(h.shape) for h in hidden] == [(1, 64, 64, 64), (1, 64, 128, 128), (1, 64, 256, 256)]
        assert [tuple(i.shape) for i in images] == [(1, 3, 64, 64), (1, 3, 128, 128), (1, 3, 256, 256)]

        vgg = CropEncoder()
        for res in (64, 128, 256):
            img = torch.randn(2, 3, res, res)
            assert PatchDiscriminator(res).eval()(img).shape == (2, 1, 8, 8)
            cond = PatchDiscriminator(res, 64, 128).eval()
            assert cond.features(img).shape == (2, 128, 16, 16) and cond.out[0].in_channels == 256
            assert cond(img, torch.randn(2, 128)).shape == (2, 1, 8, 8)
            od = ObjectDiscriminator(10, res).eval()
            crops = od.crops(img, boxes[:2], torch.tensor([0, 1]))
            assert crops.shape == (2, 3, res // 2, res // 2)
            real, cls = od.forward_crops(crops)
            assert real.shape == (2,) and cls.shape == (2, 10)
            assert vgg.crop_features(img, boxes[:2], torch.tensor([0, 1])).shape == (2, 512, 4, 4)
        h = torch.randn(2, 512, 4, 4)
        unc, con = PhraseDiscriminator(False).eval(), PhraseDiscriminator(True).eval()
        assert unc.in_channels == 1536 and con.in_channels == 1152
        assert unc(h, h, h).shape == (2, 1, 2, 2) and con(h, torch.randn(2, 128), h).shape == (2, 1, 2, 2)
    elapsed = time.perf_counter() - t0
    assert elapsed < 60, f"shape suite took {elapsed:.1f}s"


# -- 2 ----------------------------------------------------------------------------------


def _softmax_oracle(xs, valid=None):
    valid = valid if valid is not None else [True] * len(xs)
    e = [math.exp(x) if v else 0.0 for x, v in zip(xs, valid)]
    return [v / sum(e) for v in e]


@criterion(2, "attention weights: normalized, shift-invariant, oracle-exact")
def test_c02_attention():
    torch.manual_seed(2)
    ire = ImplicitRelationEstimator(word_dim=3, noise_dim=2, hidden=4, d_w=4, d_p=2).double()
    q = torch.tensor([[0.4, -1.2, 0.7], [2.0, 0.1, -0.3]], dtype=torch.float64)
    glove = torch.tensor([[[1.0, 0.5, 0], [0, 1, -1], [0.3, 0.3, 0.3], [2, 0, 1]]], dtype=torch.float64)
    words = torch.randn(1, 4, 4, dtype=torch.float64)
    mask = torch.tensor([[True, True, True, False]])
    _, beta = ire.attend(q, glove, words, mask, torch.tensor([0, 0]))
    for p in range(2):
        scores = [float(q[p] @ glove[0, t]) for t in range(4)]
        np.testing.assert_allclose(beta[p].numpy(), _softmax_oracle(scores, mask[0].tolist()), atol=1e-6)
    torch.testing.assert_close(beta.sum(1), torch.ones(2, dtype=torch.float64), atol=1e-12, rtol=0)
    # shift: add c * q / |q|^2 to every word vector -> each score moves by c
    unit = q / (q * q).sum(1, keepdim=True)
    _, shifted = ire.attend(q, glove.expand(2, -1, -1) + 4.0 * unit[:, None, :], words.expand(2, -1, -1),
                            mask.expand(2, -1), torch.tensor([0, 1]))
    torch.testing.assert_close(shifted, beta, atol=1e-6, rtol=0)

    # region attention: softmax over queries, then gamma1-sharpened softmax over regions
    u = torch.tensor([[0.2, -0.5, 1.0], [1.0, 0.3, -0.2]], dtype=torch.float64)
    f = torch.tensor([[0.1, 0.7, -0.3, 0.4], [0.4, -0.6, 0.9, 0.0], [1.2, 0.0, 0.5, -1.0]], dtype=torch.float64)
    g1 = 5.0
    s = (u @ f).tolist()
    s_bar = [[_softmax_oracle([s[i][j] for i in range(2)])[k] for j in range(4)] for k in range(2)]
    alpha = [_softmax_oracle([g1 * s_bar[k][j] for j in range(4)]) for k in range(2)]
    expected = np.array(alpha) @ f.numpy().T
    np.testing.assert_allclose(region_context(u, f, g1).numpy(), expected, atol=1e-6)
    assert np.allclose(np.sum(alpha, 1), 1.0)
    f_ext = torch.cat([f, torch.randn(1, 4, dtype=torch.float64)])
    u_ext = torch.cat([u, torch.ones(2, 1, dtype=torch.float64)], 1)
    torch.testing.assert_close(region_context(u_ext, f_ext, g1)[:, :3], region_context(u, f, g1), atol=1e-6, rtol=0)


# -- 3 ----------------------------------------------------------------------------------


@criterion(3, "DAMSM analytics")
def test_c03_damsm_analytics():
    g = torch.Generator().manual_seed(3)

    def batch(M, same=False):
        q, k = torch.randn(M, 4, 16, generator=g), torch.randn(M, 16, 289, generator=g)
        gq, gk = torch.randn(M, 16, generator=g), torch.randn(M, 16, generator=g)
        if same:
            q, k, gq, gk = q[:1].expand_as(q), k[:1].expand_as(k), gq[:1].expand_as(gq), gk[:1].expand_as(gk)
        return MatchingBatch(q, torch.ones(M, 4, dtype=torch.bool), k, gq, gk)

    assert abs(float(damsm_loss(batch(1)))) < 1e-9
    for M in (2, 4, 8):
        value = float(damsm_loss(batch(M, same=True)))
        assert abs(value - uniform_loss_value(M)) <= 0.1 * uniform_loss_value(M)
    for _ in range(100):
        T = int(torch.randint(1, 10, (1,), generator=g))
        rel = torch.rand(T, generator=g, dtype=torch.float64) * 2 - 1
        g2 = float(torch.rand(1, generator=g)) * 10 + 0.5
        r = float(aggregate_relevance(rel, g2))
        assert float(rel.max()) - 1e-12 <= r <= float(rel.max()) + math.log(T) / g2 + 1e-12


# -- 4 ----------------------------------------------------------------------------------


def _max_fd_rel_error(fn, x, eps=1e-6):
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.flatten()
    numeric = torch.zeros_like(analytic)
    flat = x.detach().flatten()
    for i in range(flat.numel()):
        plus, minus = flat.clone(), flat.clone()
        plus[i] += eps
        minus[i] -= eps
        numeric[i] = (fn(plus.view_as(x)) - fn(minus.view_as(x))) / (2 * eps)
    scale = torch.maximum(analytic.abs(), numeric.abs()).clamp_min(1e-3)
    return float(((analytic - numeric).abs() / scale).max().detach())


@criterion(4, "finite-difference gradient checks")
def test_c04_gradients():
    g = torch.Generator().manual_seed(4)
    M, T, D, R = 3, 2, 5, 4
    q = torch.randn(M, T, D, generator=g, dtype=torch.float64)
    k = torch.randn(M, D, R, generator=g, dtype=torch.float64)
    gq = torch.randn(M, D, generator=g, dtype=torch.float64)
    gk = torch.randn(M, D, generator=g, dtype=torch.float64)
    mask = torch.tensor([[True, True], [True, False], [True, True]])
    errs = [
        _max_fd_rel_error(lambda x: damsm_loss(MatchingBatch(x, mask, k, gq, gk)), q),
        _max_fd_rel_error(lambda x: damsm_loss(MatchingBatch(q, mask, x, gq, gk)), k),
        _max_fd_rel_error(lambda x: damsm_loss(MatchingBatch(q, mask, k, x, gk)), gq),
    ]
    torch.manual_seed(4)
    ire = ImplicitRelationEstimator(word_dim=3, noise_dim=2, hidden=6, d_w=4, d_p=3).double()
    pairs, owners = build_pairs(torch.zeros(3, dtype=torch.long))
    obj = torch.randn(3, 3, generator=g, dtype=torch.float64)
    z = torch.randn(1, 2, generator=g, dtype=torch.float64)
    glove = torch.randn(1, 4, 3, generator=g, dtype=torch.float64)
    words = torch.randn(1, 4, 4, generator=g, dtype=torch.float64)
    wmask = torch.tensor([[True, True, True, False]])
    weight = torch.randn(6, 3, generator=g, dtype=torch.float64)

    def rel(o=obj, gl=glove, w=words):
        return (ire(o, z, gl, w, wmask, pairs, owners)[0] * weight).sum()

    errs += [
        _max_fd_rel_error(lambda x: rel(w=x), words),
        _max_fd_rel_error(lambda x: rel(gl=x), glove),
        _max_fd_rel_error(lambda x: rel(o=x), obj),
    ]
    assert max(errs) < 1e-4, errs


# -- 5 ----------------------------------------------------------------------------------


@criterion(5, "phrase-order permutation invariance")
def test_c05_permutation():
    torch.manual_seed(5)
    ige = ImplicitGraphEncoder(6, 16, 32, 3, 24).double().eval()
    gc = GraphConv(16, 32).double()
    o2i = torch.tensor([0, 0, 0, 0, 1, 1, 1])
    pairs, owners = build_pairs(o2i)
    labels = torch.tensor([0, 1, 2, 3, 4, 5, 0])
    v_ir = torch.randn(len(pairs), 16, dtype=torch.float64)
    obj = torch.randn(7, 16, dtype=torch.float64)
    perm = torch.randperm(len(pairs))
    base = ige(labels, v_ir, pairs, owners, 2)
    permuted = ige(labels, v_ir[perm], pairs[perm], owners[perm], 2)
    torch.testing.assert_close(permuted.u_bar, base.u_bar, atol=1e-6, rtol=0)
    torch.testing.assert_close(gc(obj, v_ir[perm], pairs[perm])[0], gc(obj, v_ir, pairs)[0], atol=1e-6, rtol=0)
    rng = np.random.default_rng(5)
    for _ in range(20):
        case = random_case(rng, int(rng.integers(2, 6)), D=4, grid=16)
        p = rng.permutation(len(case[3]))
        a = kernels.compose_layout(*case, 16, 16)
        b = kernels.compose_layout(case[0], case[1][p], case[2], case[3][p], 16, 16)
        assert np.array_equal(a, b)


# -- 6 ----------------------------------------------------------------------------------


@criterion(6, "layout equals brute-force compositor on 50 random 8x8 cases")
def test_c06_layout_oracle():
    rng = np.random.default_rng(6)
    for _ in range(50):
        case = random_case(rng, int(rng.integers(2, 5)), D=3, grid=8)
        assert np.array_equal(kernels.compose_layout(*case, 8, 8), brute_force(*case, 8, 8))


# -- 7 ----------------------------------------------------------------------------------


@pytest.mark.slow
@criterion(7, "frozen parts unchanged across 10 adversarial steps")
def test_c07_freezing(smoke):
    before, after = smoke["checksums"]["before"], smoke["checksums"]["after_10"]
    changed = [k for k in before if before[k] != after[k]]
    assert not changed, changed
    tr = smoke["trainer"]
    frozen = tr.model.frozen_modules()
    assert state_checksum(frozen["text_encoder"]) == before["text_encoder"]
    assert state_checksum(tr.model.graph.ire) == before["ire"]


# -- 8 ----------------------------------------------------------------------------------


@pytest.mark.slow
@criterion(8, "desk-scale smoke training")
def test_c08_smoke_training(smoke):
    recs = smoke["records"]
    assert len(recs) == 500
    assert smoke["seconds"] < 30 * 60, f"took {smoke['seconds']:.0f}s"
    for r in recs:
        assert all(math.isfinite(r[k]) for k in LOSS_NAMES), r
    tail = recs[-25:]
    gap = np.mean([r["d_real_logit"] - r["d_fake_logit"] for r in tail])
    acc = np.mean([r["aux_acc"] for r in tail])
    chance = 1 / smoke["dataset"].n_categories
    l1_start, l1_end = smoke["l1"]
    print(f"D gap {gap:.3f}, aux acc {acc:.3f} (chance {chance:.3f}), L1 {l1_start:.4f} -> {l1_end:.4f}, "
          f"{smoke['seconds']:.0f}s")
    assert gap > 0
    assert acc > 2 * chance
    assert l1_end < l1_start


# -- 9 ----------------------------------------------------------------------------------


@criterion(9, "loss arithmetic")
def test_c09_loss_arithmetic(tiny_run, toy_dataset):
    tr = Trainer.resume(tiny_run["dir"] / "mocgan.pt", toy_dataset)
    assert tuple(tr.cfg.train.lambdas) == LAMBDA_DEFAULTS == (1, 1, 0.5, 1, 0.1, 0.5, 5, 10)
    batch = toy_dataset.batch(0, 4)
    z = tr.model.sample_noise(len(batch["cap_lens"]), torch.Generator().manual_seed(9))
    with torch.no_grad():
        enc = tr.model.encode(batch, z)
        _, fakes = tr.model.generator(enc["feats"], enc["graph"], batch["boxes"])
        boxes = tr.model.generator.box_regressor(enc["feats"].v_o)
        bundle = tr.generator_losses(batch, enc, fakes, boxes, torch.arange(len(enc["graph"].phr_to_img)))
    terms = bundle.as_floats()
    assert all(terms[k] != 0 for k in LOSS_NAMES)
    recomputed = math.fsum(w * terms[k] for w, k in zip(LAMBDA_DEFAULTS, LOSS_NAMES))
    same_precision = sum(w * bundle.terms[k].float() for w, k in zip(LAMBDA_DEFAULTS, LOSS_NAMES))
    assert float(bundle.total) == float(same_precision)
    synthetic = LossBundle({k: torch.tensor(v, dtype=torch.float64) for k, v in terms.items()})
    assert abs(float(synthetic.total) - recomputed) <= 1e-7
    b = torch.tensor([[0, 0, .5, .5], [.5, .5, 1, 1]])
    b_hat = torch.tensor([[0, 0, .5, .5], [.5, .5, .9, .9]])
    assert abs(float(box_l1(b, b_hat, torch.tensor([0, 0]))) - 0.2) < 1e-6


# -- 10 ---------------------------------------------------------------------------------


@criterion(10, "IS / FID sanity")
def test_c10_metrics():
    assert inception_score(np.full((50, 10), 0.1), 10)[0] == pytest.approx(1.0, abs=1e-12)
    for n in (2, 5, 10):
        assert inception_score(np.eye(n)[np.arange(10 * n) % n], 10)[0] == pytest.approx(n, abs=1e-9)
    rng = np.random.default_rng(10)
    for _ in range(5):
        a = ActivationStats.from_activations(rng.standard_normal((30, 6)) @ rng.standard_normal((6, 6)))
        b = ActivationStats.from_activations(rng.standard_normal((30, 6)) + rng.standard_normal(6))
        assert fid(a, a) == 0.0
        w, v = np.linalg.eigh(a.cov)
        root = v @ np.diag(np.sqrt(np.clip(w, 0, None))) @ v.T
        mid = np.linalg.eigvalsh(root @ b.cov @ root)
        oracle = ((a.mean - b.mean) ** 2).sum() + np.trace(a.cov) + np.trace(b.cov) - 2 * np.sqrt(np.clip(mid, 0, None)).sum()
        assert abs(fid(a, b) - oracle) <= 1e-5


# -- 11 ---------------------------------------------------------------------------------


@pytest.mark.slow
@criterion(11, "deterministic generation and exact resume")
def test_c11_determinism_and_resume(smoke, tmp_path, capsys):
    ckpt = str(smoke["run"] / "mocgan.pt")
    args = ["generate", "--checkpoint", ckpt, "--objects", "block,stripe,dot", "--caption",
            "a red block left of a blue stripe", "--seed", "1", "--grid"]
    assert cli_main([*args, "--out", str(tmp_path / "a")]) == 0
    assert cli_main([*args, "--out", str(tmp_path / "b")]) == 0
    for p in sorted((tmp_path / "a").glob("*.png")) + [tmp_path / "a" / "boxes.json"]:
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes(), p.name

    resumed = Trainer.resume(smoke["run"] / "step490.pt", smoke["dataset"])
    assert resumed.step == 490
    records = resumed.run(10)
    reference = smoke["records"][490:500]
    worst = 0.0
    for got, ref in zip(records, reference):
        assert got["step"] == ref["step"]
        for key in (*LOSS_NAMES, "G_total", "D_total", "d_real_logit", "d_fake_logit"):
            worst = max(worst, abs(got[key] - ref[key]) / max(abs(ref[key]), 1e-8))
    assert worst <= 1e-4, worst
