"""Release-gate gradient checks: every layer type, the full model, all losses.

Each entry builds a deterministic scalar function of its leaves and runs
it through ``engine.grad_check``. Small ops are enumerated exhaustively;
the full-model checks sample a fixed number of entries per leaf (every
leaf is touched) because enumerating a few thousand parameters twice
per entry would blow the time budget without adding coverage.

``corrupt_op`` is a testing hook: it wraps the named entry's output in
an identity node whose backward pass scales gradients by 1.01, which
must make exactly that entry fail.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import ComplexTensor, Tensor, complex_affine, crelu, grad_check_report
from .model import CMixerConfig, CMixerModel, Toggles, init_params, sample_incentive
from .train import bce_with_logits, cross_entropy, ssl_loss

__all__ = ["OpResult", "SuiteResult", "run_suite", "TOLERANCE"]

TOLERANCE = 1e-4
_FULL_MODEL_SAMPLE = 40  # entries probed per leaf in whole-model checks


@dataclass
class OpResult:
    name: str
    max_rel_error: float
    checked: int
    skipped: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


@dataclass
class SuiteResult:
    results: list[OpResult]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def worst(self) -> OpResult:
        return max(self.results, key=lambda r: r.max_rel_error)

    def lines(self) -> list[str]:
        out = []
        for r in self.results:
            status = "ok" if r.passed else "FAIL"
            out.append(
                f"{status:4s} {r.name:24s} max_rel_err={r.max_rel_error:.3e} "
                f"checked={r.checked} skipped={r.skipped}"
            )
        return out


def _grad_scaled(t: Tensor, factor: float) -> Tensor:
    # identity forward with a deliberately wrong backward; testing hook only
    def backprop(g):
        t._accumulate(g * factor)

    return Tensor(t.data, (t,), backprop, "corrupted")


def _tiny_model() -> tuple[CMixerModel, CMixerConfig]:
    config = CMixerConfig(
        num_layers=2, hidden=8, seq=4, patch=4, token_hidden=8,
        channel_hidden=16, num_classes=2, in_channels=1, image_side=8,
    )
    # nonzero incentive output weights so gradients reach the hidden layer
    params = init_params(config, np.random.default_rng(0))
    jitter = np.random.default_rng(1)
    params["incentive.mu.weight"] = 0.05 * jitter.standard_normal((128, 1))
    params["incentive.sigma.weight"] = 0.05 * jitter.standard_normal((128, 1))
    return CMixerModel(config, params=params), config


def _suite_entries():
    rng = np.random.default_rng(42)
    entries = []

    def op(name, build, sample=None):
        entries.append((name, build, sample))

    a44 = rng.standard_normal((4, 4))
    b44 = rng.standard_normal((4, 4))
    gamma = rng.standard_normal(4)
    beta = rng.standard_normal(4)

    op("complex_affine", lambda: (
        lambda lv: (
            lambda out: engine.add(out.re.sum(), out.im.sum())
        )(complex_affine(lv["A"], lv["B"], ComplexTensor(lv["hre"], lv["him"]),
                         bias=ComplexTensor(lv["bre"], lv["bim"]))),
        {
            "A": rng.standard_normal((3, 4)), "B": rng.standard_normal((3, 4)),
            "hre": rng.standard_normal((4, 2)), "him": rng.standard_normal((4, 2)),
            "bre": rng.standard_normal(3), "bim": rng.standard_normal(3),
        },
    ))
    op("crelu", lambda: (
        lambda lv: (
            lambda out: engine.add(out.re.sum(), out.im.sum())
        )(crelu(ComplexTensor(lv["re"], lv["im"]))),
        {"re": rng.standard_normal((4, 4)) + 0.3, "im": rng.standard_normal((4, 4)) - 0.3},
    ))
    op("layernorm", lambda: (
        lambda lv: engine.mul(
            engine.layernorm(lv["x"], lv["g"], lv["b"], axis=1), a44
        ).sum(),
        {"x": rng.standard_normal((4, 4)), "g": gamma.copy(), "b": beta.copy()},
    ))
    op("matmul", lambda: (
        lambda lv: engine.tanh(engine.matmul(lv["x"], lv["y"])).sum(),
        {"x": rng.standard_normal((3, 4)), "y": rng.standard_normal((4, 3))},
    ))
    op("softmax", lambda: (
        lambda lv: engine.mul(engine.softmax(lv["x"], axis=1), b44).sum(),
        {"x": rng.standard_normal((4, 4))},
    ))
    op("log_softmax", lambda: (
        lambda lv: engine.mul(engine.log_softmax(lv["x"], axis=1), b44).sum(),
        {"x": rng.standard_normal((4, 4))},
    ))
    op("tanh", lambda: (
        lambda lv: engine.tanh(lv["x"]).sum(),
        {"x": rng.standard_normal((4, 4))},
    ))
    op("exp", lambda: (
        lambda lv: engine.exp(lv["x"]).sum(),
        {"x": rng.standard_normal((4, 4))},
    ))
    op("log", lambda: (
        lambda lv: engine.log(engine.add(engine.mul(lv["x"], lv["x"]), 0.2)).sum(),
        {"x": rng.standard_normal((4, 4))},
    ))
    op("softplus", lambda: (
        lambda lv: engine.softplus(lv["x"]).sum(),
        {"x": rng.standard_normal((4, 4))},
    ))
    op("mean", lambda: (
        lambda lv: engine.tmean(engine.mul(lv["x"], lv["x"]), axis=0).sum(),
        {"x": rng.standard_normal((4, 4))},
    ))

    # the incentive sampler with frozen noise
    eps = rng.standard_normal((2, 1, 4, 4))
    images = rng.random((2, 1, 4, 4))
    inc = {
        "incentive.hidden.weight": 0.3 * rng.standard_normal((16, 8)),
        "incentive.hidden.bias": 0.1 * rng.standard_normal(8),
        "incentive.mu.weight": 0.3 * rng.standard_normal((8, 1)),
        "incentive.mu.bias": np.zeros(1),
        "incentive.sigma.weight": 0.3 * rng.standard_normal((8, 1)),
        "incentive.sigma.bias": np.zeros(1),
    }
    op("incentive_sampler", lambda: (
        lambda lv: (
            lambda h: engine.mul(h.im, h.im).sum()
        )(sample_incentive(Tensor(images), lv, eps)),
        {k: v.copy() for k, v in inc.items()},
    ))

    model, config = _tiny_model()
    x = np.random.default_rng(5).random((2, 1, 8, 8))
    eps_model = np.random.default_rng(6).standard_normal(x.shape)
    labels = np.array([0, 1])
    onehot = np.eye(2)[labels]

    def model_loss_builder(loss_kind):
        def build():
            def f(lv):
                tape_params = lv
                toggles = Toggles()
                out = _forward_with(model, x, eps_model, tape_params, "classify", toggles)
                if loss_kind == "ce":
                    return cross_entropy(out, labels)
                return bce_with_logits(out, onehot)

            return f, model.copy_params()

        return build

    op("model_cross_entropy", model_loss_builder("ce"), sample=_FULL_MODEL_SAMPLE)
    op("model_bce", model_loss_builder("bce"), sample=_FULL_MODEL_SAMPLE)

    target_scores = np.random.default_rng(7).standard_normal((2, 128))

    def ssl_builder():
        def f(lv):
            out = _forward_with(model, x, eps_model, lv, "ssl", Toggles())
            return ssl_loss(out, target_scores, temperature=0.5)

        return f, model.copy_params()

    op("model_ssl_loss", ssl_builder, sample=_FULL_MODEL_SAMPLE)

    return entries


def _forward_with(model, x, eps, leaves, head, toggles):
    """Forward pass wiring externally provided leaf tensors as parameters."""
    from . import model as model_mod

    cfg = model.config
    h = sample_incentive(Tensor(np.asarray(x)), leaves, eps)
    h = model_mod.patchify(h, cfg.patch)
    h = model_mod._affine(h.swapaxes(-1, -2), leaves, "patch_embed", bias=True).swapaxes(-1, -2)
    for i in range(cfg.num_layers):
        h = model_mod.mixer_block_forward(h, leaves, f"block{i}")
    pooled = h.mean(axis=1)
    prefix, width = ("head", cfg.num_classes) if head == "classify" else ("ssl_head", 128)
    col = pooled.reshape((x.shape[0], cfg.hidden, 1))
    out = model_mod._affine(col, leaves, prefix, bias=True)
    out = ComplexTensor(
        out.re.reshape((x.shape[0], width)), out.im.reshape((x.shape[0], width))
    )
    return model_mod.pearson_project(out, use_real=toggles.p_r, use_imag=toggles.p_i)


def run_suite(corrupt_op: str | None = None) -> SuiteResult:
    """Run every check; returns per-op errors and wall time."""
    start = time.monotonic()
    results = []
    for name, build, sample in _suite_entries():
        f, leaves = build()
        if corrupt_op == name:
            inner = f

            def f(lv, _inner=inner):
                return _grad_scaled(_inner(lv), 1.01)

        report = grad_check_report(
            f, leaves, sample=sample, rng=np.random.default_rng(123)
        )
        results.append(OpResult(name, report.max_rel_error, report.checked, report.skipped))
    return SuiteResult(results, time.monotonic() - start)
