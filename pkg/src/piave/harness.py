"""Training and evaluation harness.

Training minimizes the negative scale-invariant SDR with Adam, clips the
global gradient norm at 5, halves the learning rate after 3 consecutive
epochs without validation improvement and stops after 6. Evaluation runs the
multi-view protocol: the original visual stream of each test item is
corrupted to the requested camera view while the pose-invariant stream stays
clean, then extraction quality is scored per view.
"""
from __future__ import annotations

import copy
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import dsp
from .autodiff import Tensor
from .data import ALL_VIEWS, Corpus, ViewLevel, corrupt_view, view_level
from .errors import ConfigError, DimensionError, TrainingDivergedError
from .model import ExtractionModel, ModelConfig, region_channel_slice

LN10 = math.log(10.0)


@dataclass
class TrainConfig:
    lr_init: float = 1e-3  # 1e-4 is the customary fine-tune setting
    max_epochs: int = 12
    patience_halve: int = 3
    patience_stop: int = 6
    clip_norm: float = 5.0
    batch_size: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    improve_tol: float = 1e-4  # strict improvement margin in dB; ties do not count
    calibrate_scale: bool = True  # fold the val-split least-squares output gain
    # into the decoder after training; the scale-invariant loss leaves output
    # gain free, which would make plain (scale-sensitive) SDR meaningless

    def validate(self) -> None:
        if self.patience_stop < self.patience_halve:
            raise ConfigError("patience_stop must be >= patience_halve")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.lr_init <= 0 or self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("lr_init, max_epochs and batch_size must be positive")

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainConfig":
        cfg = cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})
        cfg.validate()
        return cfg


class PlateauSchedule:
    """Halve-on-plateau learning-rate schedule with early stop.

    The validation metric is higher-is-better. Improvement means exceeding
    the best value seen so far by more than `improve_tol`; an improvement
    resets both counters. Halving resets only the halving counter, so the
    stop counter keeps running across halvings.
    """

    def __init__(self, lr_init: float, patience_halve: int = 3, patience_stop: int = 6,
                 improve_tol: float = 1e-4):
        self.lr = lr_init
        self.patience_halve = patience_halve
        self.patience_stop = patience_stop
        self.improve_tol = improve_tol
        self.best = -math.inf
        self.halve_counter = 0
        self.stop_counter = 0
        self.n_halvings = 0

    def update(self, val_metric: float) -> dict:
        improved = val_metric > self.best + self.improve_tol
        halved = False
        stop = False
        if improved:
            self.best = val_metric
            self.halve_counter = 0
            self.stop_counter = 0
        else:
            self.halve_counter += 1
            self.stop_counter += 1
            if self.halve_counter >= self.patience_halve:
                self.lr /= 2.0
                self.n_halvings += 1
                self.halve_counter = 0
                halved = True
            if self.stop_counter >= self.patience_stop:
                stop = True
        return {"lr": self.lr, "improved": improved, "halved": halved, "stop": stop}


class Adam:
    """Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def si_sdr_loss(est: Tensor, ref: Tensor) -> Tensor:
    """Negative SI-SDR averaged over the batch; est/ref are (B, L) graphs."""
    dot = ad.tsum(est * ref, axis=-1, keepdims=True)
    ref_energy = ad.tsum(ref * ref, axis=-1, keepdims=True)
    alpha = dot / ref_energy
    proj = alpha * ref
    resid = proj - est
    num = ad.tsum(ad.square(proj), axis=-1)
    den = ad.tsum(ad.square(resid), axis=-1)
    per_item = ad.log(num / den) * (-10.0 / LN10)
    return ad.mean(per_item)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def _mask_pi_batch(pi: np.ndarray, region: str) -> np.ndarray:
    sl = region_channel_slice(region, pi.shape[1])
    if sl is None:
        return pi
    pi = pi.copy()
    pi[:, sl, :] = 0.0
    return pi


def _load_batch(corpus: Corpus, items: list[dict], region: str, dtype=np.float32) -> dict:
    mixes, targets, origs, pis = [], [], [], []
    for item in items:
        loaded = corpus.load_item(item)
        mixes.append(loaded["mix"].samples)
        targets.append(loaded["target"].samples)
        origs.append(loaded["visual_orig"].T)  # (v, n)
        pis.append(loaded["visual_pi"].T)
    batch = {
        "mix": np.stack(mixes).astype(dtype)[:, None, :],
        "target": np.stack(targets).astype(dtype),
        "orig": np.stack(origs).astype(dtype),
        "pi": _mask_pi_batch(np.stack(pis).astype(dtype), region),
    }
    return batch


def _forward_batch(model: ExtractionModel, batch: dict) -> Tensor:
    mix = Tensor(batch["mix"])
    orig = Tensor(batch["orig"])
    pi = Tensor(batch["pi"]) if model.config.use_pose_invariant else None
    est = model.extract_graph(mix, orig, pi)
    return ad.reshape(est, (est.shape[0], est.shape[2]))


def _validation_si_sdr(model: ExtractionModel, corpus: Corpus, items: list[dict],
                       region: str, batch_size: int) -> float:
    scores = []
    with ad.no_grad():
        for lo in range(0, len(items), batch_size):
            batch = _load_batch(corpus, items[lo : lo + batch_size], region)
            est = _forward_batch(model, batch).data
            for i in range(est.shape[0]):
                scores.append(dsp.si_sdr_db(est[i], batch["target"][i]))
    return float(np.mean(scores))


def _calibrate_output_scale(model: ExtractionModel, corpus: Corpus, items: list[dict],
                            region: str, batch_size: int) -> float:
    """Fold the global least-squares gain argmin_s ||y - s*est|| into the decoder."""
    dot = 0.0
    energy = 0.0
    with ad.no_grad():
        for lo in range(0, len(items), batch_size):
            batch = _load_batch(corpus, items[lo : lo + batch_size], region)
            est = _forward_batch(model, batch).data.astype(np.float64)
            tgt = batch["target"].astype(np.float64)
            dot += float((est * tgt).sum())
            energy += float((est * est).sum())
    if energy == 0.0:
        return 1.0
    scale = dot / energy
    model.params["dec.w"].data *= model.dtype(scale)
    model.params["dec.b"].data *= model.dtype(scale)
    return scale


def train(
    model: ExtractionModel,
    corpus: Corpus,
    cfg: TrainConfig,
    region: str = "none",
    log=None,
) -> tuple[ExtractionModel, list[dict]]:
    """Optimize the model on the corpus train split; returns best-val weights.

    `region` applies the ablation channel mask to the pose-invariant stream
    during both training and validation.
    """
    cfg.validate()
    train_items = corpus.items("train")
    val_items = corpus.items("val")
    if not train_items or not val_items:
        raise ConfigError("corpus has an empty train or val split")

    rng = np.random.default_rng(cfg.seed)
    adam = Adam(model.params, cfg.lr_init, cfg.beta1, cfg.beta2, cfg.eps)
    sched = PlateauSchedule(cfg.lr_init, cfg.patience_halve, cfg.patience_stop, cfg.improve_tol)
    history: list[dict] = []
    best_val = -math.inf
    best_params = {k: p.data.copy() for k, p in model.params.items()}

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_items))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            chunk = [train_items[i] for i in order[lo : lo + cfg.batch_size]]
            batch = _load_batch(corpus, chunk, region)
            est = _forward_batch(model, batch)
            loss = si_sdr_loss(est, Tensor(batch["target"]))
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingDivergedError(
                    f"non-finite loss {loss_val} at epoch {epoch}, step {lo // cfg.batch_size}"
                )
            adam.zero_grad()
            ad.backward(loss)
            clip_gradients(model.params, cfg.clip_norm)
            adam.step()
            losses.append(loss_val)

        val_si_sdr = _validation_si_sdr(model, corpus, val_items, region, cfg.batch_size)
        decision = sched.update(val_si_sdr)
        adam.lr = decision["lr"]
        if val_si_sdr > best_val:
            best_val = val_si_sdr
            best_params = {k: p.data.copy() for k, p in model.params.items()}
        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_si_sdr": val_si_sdr,
            "lr": decision["lr"],
            "halved": decision["halved"],
            "improved": decision["improved"],
        }
        history.append(record)
        if log is not None:
            log(record)
        if decision["stop"]:
            break

    model.load_parameter_arrays(best_params)
    if cfg.calibrate_scale:
        _calibrate_output_scale(model, corpus, val_items, region, cfg.batch_size)
    return model, history


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("PIAVE_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class MetricReport:
    """Per-item scores plus view-level aggregates of one evaluation run."""

    split: str
    view: str
    seed: int
    config_fingerprint: str
    per_view: dict = field(default_factory=dict)
    avg7: float | None = None
    avg6: float | None = None
    failures: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "split": self.split,
            "view": self.view,
            "seed": self.seed,
            "config_fingerprint": self.config_fingerprint,
            "per_view": self.per_view,
            "avg7": self.avg7,
            "avg6": self.avg6,
            "failures": self.failures,
        }


def _finite_mean(values: list[float]) -> float:
    arr = np.asarray([v for v in values if math.isfinite(v)], dtype=np.float64)
    return float(arr.mean()) if arr.size else math.nan


def _eval_one(model: ExtractionModel, corpus: Corpus, item: dict, view: ViewLevel,
              region: str) -> dict:
    loaded = corpus.load_item(item)
    frames = loaded["visual_orig"]
    if item["view"] != view.value:
        if item["view"] != ViewLevel.FRONT.value:
            raise ConfigError(
                f"item {item['id']} stores view {item['view']!r}; can only re-corrupt "
                "items stored at the front view"
            )
        frames = corrupt_view(frames, view, corpus.config.corruption_seed)
    pi = loaded["visual_pi"]
    sl = region_channel_slice(region, pi.shape[1])
    if sl is not None:
        pi = pi.copy()
        pi[:, sl] = 0.0

    mix = loaded["mix"]
    target = loaded["target"]
    mix_t = Tensor(np.asarray(mix.samples, dtype=model.dtype)[None, None])
    orig_t = Tensor(frames.T[None].astype(model.dtype))
    pi_t = Tensor(pi.T[None].astype(model.dtype)) if model.config.use_pose_invariant else None
    with ad.no_grad():
        est = model.extract_graph(mix_t, orig_t, pi_t).data[0, 0].astype(np.float64)

    est_wf = dsp.Waveform(est, mix.sample_rate)
    return {
        "id": item["id"],
        "si_sdr": dsp.si_sdr(est_wf, target).value,
        "sdr": dsp.sdr(est_wf, target).value,
        "stoi": dsp.stoi(est_wf, target).value,
        "mix_si_sdr": dsp.si_sdr(mix, target).value,
    }


def evaluate(
    model: ExtractionModel,
    corpus: Corpus,
    split: str = "test",
    view: str | ViewLevel = "all",
    region: str = "none",
    seed: int = 0,
) -> MetricReport:
    """Score the model on one view, or on all seven with Avg(7)/Avg(6)."""
    items = corpus.items(split)
    if not items:
        raise ConfigError(f"split {split!r} is empty")
    views = list(ALL_VIEWS) if view == "all" else [view_level(view)]

    report = MetricReport(
        split=split,
        view="all" if view == "all" else views[0].value,
        seed=seed,
        config_fingerprint=model.config.fingerprint(),
    )
    workers = _worker_count()
    for v in views:
        results = []
        def job(item, _v=v):
            return _eval_one(model, corpus, item, _v, region)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(job, item) for item in items]
                for item, fut in zip(items, futures):
                    try:
                        results.append(fut.result())
                    except Exception as exc:  # noqa: BLE001 - reported per item
                        report.failures.append({"id": item["id"], "error": str(exc)})
        else:
            for item in items:
                try:
                    results.append(job(item))
                except Exception as exc:  # noqa: BLE001 - reported per item
                    report.failures.append({"id": item["id"], "error": str(exc)})
        if not results:
            raise ConfigError(f"no item of split {split!r} could be evaluated")
        report.per_view[v.value] = {
            "items": results,
            "si_sdr": _finite_mean([r["si_sdr"] for r in results]),
            "sdr": _finite_mean([r["sdr"] for r in results]),
            "stoi": _finite_mean([r["stoi"] for r in results]),
            "si_sdr_improvement": _finite_mean(
                [r["si_sdr"] - r["mix_si_sdr"] for r in results]
            ),
        }
    if view == "all":
        report.avg7, report.avg6 = aggregate_views(
            {v: report.per_view[v]["sdr"] for v in report.per_view}
        )
    return report


def aggregate_views(per_view_sdr: dict) -> tuple[float, float]:
    """(mean over all seven views, mean excluding the front view)."""
    keys = {view_level(k).value for k in per_view_sdr}
    expected = {v.value for v in ALL_VIEWS}
    if keys != expected:
        missing = sorted(expected - keys)
        raise DimensionError(f"need all seven views, missing {missing}")
    values = {view_level(k).value: float(v) for k, v in per_view_sdr.items()}
    avg7 = sum(values.values()) / 7.0
    avg6 = sum(v for k, v in values.items() if k != ViewLevel.FRONT.value) / 6.0
    return avg7, avg6


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = ("full", "wo_pf", "mask_lip", "mask_upper")


def _variant_setup(variant: str, base: ModelConfig) -> tuple[ModelConfig, str]:
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    cfg = copy.deepcopy(base)
    region = "none"
    if variant == "wo_pf":
        cfg.use_pose_invariant = False
    elif variant == "mask_lip":
        region = "lip"
    elif variant == "mask_upper":
        region = "upper"
    return cfg, region


def run_ablation(
    corpus: Corpus,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    variants=ABLATION_VARIANTS,
    seeds=(0,),
    log=None,
) -> dict:
    """Train each variant under identical seeds and score it on all views."""
    if not seeds:
        raise ConfigError("need at least one seed")
    report: dict = {"variants": {}, "seeds": list(seeds)}
    for variant in variants:
        cfg, region = _variant_setup(variant, model_cfg)
        runs = {}
        for seed in seeds:
            model = ExtractionModel(cfg, seed=seed)
            t_cfg = copy.deepcopy(train_cfg)
            t_cfg.seed = seed
            model, history = train(model, corpus, t_cfg, region=region, log=log)
            result = evaluate(model, corpus, "test", "all", region=region, seed=seed)
            if variant == "wo_pf" and model.stats["pi_frames_consumed"] != 0:
                raise ConfigError("wo_pf variant consumed the pose-invariant stream")
            runs[str(seed)] = {
                "per_view_sdr": {v: report_v["sdr"] for v, report_v in result.per_view.items()},
                "per_view_si_sdr": {
                    v: report_v["si_sdr"] for v, report_v in result.per_view.items()
                },
                "avg7": result.avg7,
                "avg6": result.avg6,
                "mean_si_sdr": _finite_mean(
                    [report_v["si_sdr"] for report_v in result.per_view.values()]
                ),
                "epochs": len(history),
            }
        report["variants"][variant] = {
            "seeds": runs,
            "mean_avg7": _finite_mean([r["avg7"] for r in runs.values()]),
            "mean_avg6": _finite_mean([r["avg6"] for r in runs.values()]),
            "mean_si_sdr": _finite_mean([r["mean_si_sdr"] for r in runs.values()]),
        }
    if "full" in report["variants"]:
        base_avg6 = report["variants"]["full"]["mean_avg6"]
        report["deltas_vs_full"] = {
            variant: report["variants"][variant]["mean_avg6"] - base_avg6
            for variant in report["variants"]
        }
    return report
