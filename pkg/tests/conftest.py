import numpy as np
import pytest

from kpred import nets
from kpred.data import generate_dataset
from kpred.records import make_record


def toy_arch(**kw):
    base = dict(n_keypoints=3, n_cage=12, cage_template="icosphere0", n_points=64, feat_dim=16,
                enc_hidden=(8, 16), token_dim=4, token_hidden=8, decoder_points=8, decoder_hidden=16,
                attn_layers=1, heads=2, radius=0.3, dtype="float64")
    base.update(kw)
    return nets.Arch(**base)


def toy_bundle(seed=0, perturb_influence=True, **kw):
    """64-bit toy bundle.

    With ``perturb_influence`` the zero-initialised influence output layer and
    all biases get random values, which keeps ReLU pre-activations away from
    the kink for finite-difference checks.
    """
    b = nets.init_bundle(toy_arch(**kw), seed=seed)
    if perturb_influence:
        rng = np.random.default_rng(seed + 100)
        w = b.store["influence.l1.w"]
        w.data = rng.normal(scale=0.1, size=w.shape)
        for name in b.store.params:
            if name.endswith(".b"):
                t = b.store[name]
                t.data = rng.normal(scale=0.1, size=t.shape)
    return b


@pytest.fixture(scope="session")
def toy_data():
    return generate_dataset("table", (4, 4, 2), seed=7, n_points=64)


@pytest.fixture(scope="session")
def toy_records(toy_data):
    return [make_record(i, toy_data.points[i], toy_data.meshes[i], template="icosphere0")
            for i in toy_data.split.database]


def spread_keypoints(bundle, factor=10.0, attn=3.0):
    """Sharpen the keypoint head and attention logits for finite-difference checks.

    At init the keypoints sit near the centroid, regions coincide and attention
    is uniform, so query/key gradients fall below the FD roundoff floor.
    """
    for n in bundle.store.names(("keypoint.", "part_keypoint.")):
        bundle.store[n].data[...] *= factor
    for n in bundle.store.params:
        if "attn." in n and n.endswith((".wq", ".wk")):
            bundle.store[n].data[...] *= attn
    return bundle


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
