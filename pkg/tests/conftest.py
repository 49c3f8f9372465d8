"""Shared fixtures, frozen calibration constants, and independent test oracles."""

import math

import numpy as np
import pytest

from stexp.data import GenConfig, load_dataset, preprocess, synth_generate

# ---------------------------------------------------------------------------
# Frozen calibration record from the pre-build ridge-oracle run on the
# default synthetic dataset (4 slides x 128 spots, 96 genes, hvg 64,
# 4 domains, seed 7): mean per-gene PCC of a linear ridge decoder from raw
# pixels on the held-out slide. These values gate the planted-signal
# strength and set the end-to-end acceptance margin.
# ---------------------------------------------------------------------------
RIDGE_PCC_SIGNAL_1 = 0.909
RIDGE_PCC_SIGNAL_0 = -0.003
# Margin a trained model must put between itself and each trivial baseline:
ACCEPTANCE_MARGIN = round(0.25 * RIDGE_PCC_SIGNAL_1, 2)  # = 0.23

SYNTH_SEED = 7


def default_gen_config(**overrides) -> GenConfig:
    base = dict(n_slides=4, spots_per_slide=128, gene_num=96, n_domains=4, signal=1.0)
    base.update(overrides)
    return GenConfig(**base)


@pytest.fixture(scope="session")
def synth_dataset_dir(tmp_path_factory):
    """The acceptance-scale synthetic dataset (signal=1, seed 7), generated once."""
    root = tmp_path_factory.mktemp("synth_s1")
    synth_generate(default_gen_config(), SYNTH_SEED, root)
    return root


@pytest.fixture(scope="session")
def synth_slides(synth_dataset_dir):
    return load_dataset(synth_dataset_dir)


@pytest.fixture(scope="session")
def processed_holdout(synth_slides):
    """Preprocessed dataset with the last slide held out of training."""
    ids = [s.slide_id for s in synth_slides]
    return preprocess(synth_slides, hvg_num=64, train_ids=ids[:-1])


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------


def ridge_pixel_decoder_pcc(slides, hvg_num=64, ridge_lambda=1.0) -> float:
    """Dual-form ridge from flattened pixels to preprocessed expression.

    Trains on all slides but the last, evaluates mean per-gene Pearson r on
    the held-out slide. Independent of the package's model and inference
    paths (only reuses the preprocessing contract, which is arithmetic).
    """
    ids = [s.slide_id for s in slides]
    ds = preprocess(slides, hvg_num=hvg_num, train_ids=ids[:-1])
    x_train = np.concatenate(
        [s.patches.reshape(s.spot_num, -1) for s in ds.train_slides()]
    ).astype(np.float64)
    y_train = np.concatenate([s.expression for s in ds.train_slides()]).astype(np.float64)
    test = ds.get(ids[-1])
    x_test = test.patches.reshape(test.spot_num, -1).astype(np.float64)
    y_test = test.expression.astype(np.float64)

    x_mean, y_mean = x_train.mean(axis=0), y_train.mean(axis=0)
    xc, yc = x_train - x_mean, y_train - y_mean
    gram = xc @ xc.T + ridge_lambda * np.eye(xc.shape[0])
    dual = np.linalg.solve(gram, yc)
    pred = (x_test - x_mean) @ xc.T @ dual + y_mean

    rs = []
    for gene in range(y_test.shape[1]):
        p, o = pred[:, gene], y_test[:, gene]
        if p.std() == 0 or o.std() == 0:
            rs.append(0.0)
        else:
            rs.append(float(np.corrcoef(p, o)[0, 1]))
    return float(np.mean(rs))


def pearson_oracle(x: np.ndarray, y: np.ndarray) -> float:
    """Plain-formula Pearson r, written out without shortcuts."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mx, my = x.mean(), y.mean()
    num = float(((x - mx) * (y - my)).sum())
    den = math.sqrt(float(((x - mx) ** 2).sum())) * math.sqrt(float(((y - my) ** 2).sum()))
    return num / den


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta (Lentz's method)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-14:
            break
    return h


def incomplete_beta_oracle(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) from the continued-fraction series."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log(1.0 - x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p_oracle(r: float, n_samples: int) -> float:
    """Two-sided p for Pearson r under the exact-null t distribution."""
    df = n_samples - 2
    if abs(r) >= 1.0:
        return 0.0
    t2 = r * r * df / (1.0 - r * r)
    return incomplete_beta_oracle(df / 2.0, 0.5, df / (df + t2))
