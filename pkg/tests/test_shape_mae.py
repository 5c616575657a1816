import shutil

import numpy as np
import pytest
import torch

from mvseg import blocks, datastore, shape_mae, trainer
from mvseg.errors import InputError, ShapeError
from mvseg.shape_mae import LossWeights, ShapeMAE


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    m = ShapeMAE()
    blocks.init_weights(m, blocks.LayerInit(seed=0))
    return m.eval()


def test_code_range_and_size(model, subject):
    views = torch.from_numpy(subject.source_views)
    for i in range(4):
        z = model.encode(views[i], i)
        assert z.shape == (512,)
        assert (z > 0).all() and (z < 1).all()
    assert model.code_dim == 512 and model.code_grid == 8


def test_codes_distinguish_inputs(model):
    z0 = model.encode(torch.zeros(128, 128), 0)
    z1 = model.encode(torch.ones(128, 128), 0)
    assert torch.linalg.norm(z0 - z1) > 0


def test_encode_deterministic(model, subject):
    x = torch.from_numpy(subject.source_views[3])
    assert torch.equal(model.encode(x, 3), model.encode(x, 3))


def test_encode_errors(model):
    with pytest.raises(ShapeError):
        model.encode(torch.zeros(64, 64), 0)
    with pytest.raises(IndexError):
        model.encode(torch.zeros(128, 128), 4)


def test_decode_shapes(model):
    z = torch.rand(512)
    for j in range(6):
        out = model.decode(z, j)
        assert out.shape == (2, 128, 128)
        assert torch.allclose(torch.softmax(out, 0).sum(0), torch.ones(128, 128), atol=1e-6)
    with pytest.raises(IndexError):
        model.decode(z, 6)
    with pytest.raises(ShapeError):
        model.decode(torch.rand(100), 0)


def test_independent_weights(model):
    enc = [dict(e.named_parameters()) for e in model.encoders]
    dec = [dict(d.named_parameters()) for d in model.decoders]
    assert len(enc) == 4 and len(dec) == 6
    for group in (enc, dec):
        for a in range(len(group)):
            for b in range(a + 1, len(group)):
                assert group[a].keys() == group[b].keys()
                assert all(group[a][k] is not group[b][k] for k in group[a])


def test_forward_all(model, subject):
    views = torch.from_numpy(subject.source_views)[None]
    with torch.no_grad():
        preds, codes = model.forward_all(views)
        again, _ = model.forward_all(views)
    assert preds.shape == (1, 4, 6, 2, 128, 128)
    assert codes.shape == (1, 4, 512)
    assert torch.equal(preds, again)
    for i in range(4):
        assert torch.equal(codes[0, i], model.encode(views[0, i], i))
    targets = torch.from_numpy(subject.target_masks)[None]
    l1 = shape_mae.shape_mae_loss(preds, targets, codes)
    l2 = shape_mae.shape_mae_loss(again, targets, codes)
    assert l1.total.item() == l2.total.item()


def test_forward_all_missing_view(model, subject):
    views = [torch.from_numpy(v)[None] for v in subject.source_views]
    views[1] = None
    with pytest.raises(InputError, match="LA2"):
        model.forward_all(views)


def test_regulariser_definition():
    z = torch.full((4, 512), 0.3, dtype=torch.float64)
    assert shape_mae.code_regularizer(z).item() == 0.0
    z[:, 0] = 0.4
    z[0, 0] = 0.8
    assert z[:, 0].mean().item() == pytest.approx(0.5)
    assert shape_mae.code_regularizer(z).item() == pytest.approx(0.03, abs=1e-12)


def random_terms(seed, n=2, size=8, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    preds = torch.randn(n, 4, 6, 2, size, size, generator=g, dtype=dtype)
    targets = torch.randint(0, 2, (n, 6, size, size), generator=g)
    codes = torch.rand(n, 4, 32, generator=g, dtype=dtype)
    return preds, targets, codes


def test_loss_terms_and_counts():
    preds, targets, codes = random_terms(0)
    t = shape_mae.shape_mae_loss(preds, targets, codes)
    assert (t.n_intra, t.n_inter) == (4, 20)
    assert len(shape_mae.INTRA_PAIRS) == 4 and len(shape_mae.INTER_PAIRS) == 20
    assert all(i == j for i, j in shape_mae.INTRA_PAIRS)
    assert all(i != j for i, j in shape_mae.INTER_PAIRS)
    # independent recomputation of each term from per-pixel log-softmax
    logp = torch.log_softmax(preds, dim=3)
    F = torch.stack([torch.stack([-logp[:, i, j].gather(1, targets[:, j][:, None]).mean()
                                  for j in range(6)]) for i in range(4)])
    intra = sum(F[i, i] for i in range(4))
    inter = sum(F[i, j] for i in range(4) for j in range(6) if i != j)
    diff = codes - codes.mean(1, keepdim=True)
    reg = (diff ** 2).sum(-1).mean()
    assert t.intra.item() == pytest.approx(intra.item(), rel=1e-12)
    assert t.inter.item() == pytest.approx(inter.item(), rel=1e-12)
    assert t.reg.item() == pytest.approx(reg.item(), rel=1e-12)
    assert t.total.item() == pytest.approx((intra + 0.5 * inter + 0.001 * reg).item(), rel=1e-12)


def test_loss_cardinality_errors():
    preds, targets, codes = random_terms(1)
    with pytest.raises(InputError):
        shape_mae.shape_mae_loss(preds[:, :3], targets, codes)
    with pytest.raises(InputError):
        shape_mae.shape_mae_loss(preds, targets[:, :5], codes)
    with pytest.raises(InputError):
        shape_mae.shape_mae_loss(preds, targets, codes[:, :2])
    with pytest.raises(InputError):
        LossWeights(alpha=-1.0)


def test_beta_only_adds_regulariser_gradient():
    torch.manual_seed(0)
    m = ShapeMAE(widths=(4, 8, 16), image_size=16).double()
    views = torch.rand(2, 4, 16, 16, dtype=torch.float64)
    targets = torch.randint(0, 2, (2, 6, 16, 16))

    def code_grad(beta):
        codes = torch.stack([m.encode(views[:, i], i) for i in range(4)], dim=1).detach().requires_grad_()
        preds = torch.stack([torch.stack([m.decoders[j](codes[:, i]) for j in range(6)], 1)
                             for i in range(4)], 1)
        loss = shape_mae.shape_mae_loss(preds, targets, codes, LossWeights(0.5, beta))
        (g,) = torch.autograd.grad(loss.total, codes)
        return g, codes

    g0, codes = code_grad(0.0)
    g1, _ = code_grad(0.7)
    c = codes.detach().requires_grad_()
    (g_reg,) = torch.autograd.grad(shape_mae.code_regularizer(c), c)
    assert torch.allclose(g1 - g0, 0.7 * g_reg, atol=1e-12)


def test_mean_pairwise_distance():
    codes = torch.zeros(1, 4, 3, dtype=torch.float64)
    codes[0, 1, 0] = 3.0
    # distances: (0,1)=3, (1,2)=3, (1,3)=3, rest 0 -> mean 9/6
    assert shape_mae.mean_pairwise_code_distance(codes) == pytest.approx(1.5)


@pytest.fixture(scope="module")
def mae_ckpt(tmp_path_factory):
    torch.manual_seed(0)
    m = ShapeMAE()
    blocks.init_weights(m, blocks.LayerInit(seed=5))
    path = tmp_path_factory.mktemp("ckpt") / "mae.ckpt"
    datastore.save_checkpoint(trainer.make_checkpoint("shape_mae", m), path)
    return path


def test_encode_priors(dataset, mae_ckpt, tmp_path):
    written, failures = shape_mae.encode_priors(dataset, mae_ckpt, tmp_path / "p")
    assert failures == {} and written == dataset.ids
    first = {}
    for sid in dataset.ids:
        path = datastore.priors_path(tmp_path / "p", sid)
        assert path.stat().st_size == 4 * 512 * 4
        codes = datastore.read_priors(path)
        assert (codes > 0).all() and (codes < 1).all()
        first[sid] = path.read_bytes()
    shape_mae.encode_priors(dataset, mae_ckpt, tmp_path / "p")
    assert all(datastore.priors_path(tmp_path / "p", s).read_bytes() == b for s, b in first.items())
    # codes follow the view order LA1, LA2, LA3, Mid-V
    model = trainer.model_from_checkpoint(mae_ckpt).eval()
    sub = dataset.load(dataset.ids[0])
    with torch.no_grad():
        z = model.encode(torch.from_numpy(sub.source_views[2]), 2).numpy()
    assert np.array_equal(datastore.read_priors(datastore.priors_path(tmp_path / "p", sub.id))[2], z)


def test_encode_priors_records_failures(dataset, mae_ckpt, tmp_path):
    root = tmp_path / "data"
    shutil.copytree(dataset.root, root)
    manifest = datastore.read_manifest(root)
    (manifest.subject_dir(manifest.ids[1]) / "la2_img.f32le").unlink()
    written, failures = shape_mae.encode_priors(manifest, mae_ckpt, tmp_path / "p")
    assert list(failures) == [manifest.ids[1]] and "la2_img" in failures[manifest.ids[1]]
    assert len(written) == len(manifest.ids) - 1
