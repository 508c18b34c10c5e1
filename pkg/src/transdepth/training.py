"""Training loop (Adam), checkpoints, and corpus evaluation."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .data import SceneSample, write_depth_png, write_gray_png
from .fusion import PipelineOutput, forward_pipeline
from .geometry import DepthPlanes
from .networks import DepthModel, NetworkConfig
from .objectives import LossWeights, MetricReport, aggregate, evaluate, total_loss

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "transdepth-checkpoint"
LOG_COLUMNS = ("iteration", "loss", "l_restored", "l_multi", "l_single", "l_normal")

# TrainConfig fields that change the model or its planes; a checkpoint and a
# config must agree on all of them.
MODEL_KEYS = ("d_min", "d_max", "planes", "base_channels", "feature_stride", "feature_channels",
              "injection_scales", "inject")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    iterations: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    d_min: float = 0.3
    d_max: float = 1.5
    planes: int = 45
    lambda1: float = 0.8
    lambda2: float = 0.5
    lambda3: float = 0.0005
    base_channels: int = 16
    feature_stride: int = 4
    feature_channels: int = 16
    injection_scales: int = 3
    inject: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.iterations < 0:
            raise ValueError("learning_rate and batch_size must be positive, iterations >= 0")
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.epsilon > 0):
            raise ValueError("adam betas must lie in [0, 1) and epsilon be positive")
        self.network  # validates the architecture fields
        self.weights

    @property
    def network(self) -> NetworkConfig:
        return NetworkConfig(base_channels=self.base_channels, feature_stride=self.feature_stride,
                             feature_channels=self.feature_channels,
                             injection_scales=self.injection_scales, plane_count=self.planes,
                             inject=self.inject, seed=self.seed)

    @property
    def depth_planes(self) -> DepthPlanes:
        return DepthPlanes(self.d_min, self.d_max, self.planes)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: type(f.default) for f in fields(cls)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        types = cls.field_types()
        unknown = sorted(set(d) - set(types))
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**{k: parse_value(types[k], v, k) for k, v in d.items()})


def parse_value(kind: type, value, key: str = "?"):
    if kind is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if kind is int:
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"{key}: expected an integer, got {value!r}")
        try:
            return int(value) if not isinstance(value, str) else int(value.strip())
        except ValueError:
            raise ValueError(f"{key}: expected an integer, got {value!r}") from None
    try:
        return kind(value)
    except ValueError:
        raise ValueError(f"{key}: expected {kind.__name__}, got {value!r}") from None


def read_config_file(path) -> dict:
    """JSON object, or flat ``key = value`` lines (``#`` starts a comment)."""
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ValueError(f"config {path} must be a JSON object")
        return data
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


# --------------------------------------------------------------------------
# optimisation


class Adam:
    """Bias-corrected Adam over a fixed, ordered parameter list."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        for p in self.params:
            if not np.isfinite(p.grad).all():
                raise FloatingPointError(f"non-finite gradient for parameter {p.name}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in self.params:
            g = p.grad
            m = self.m[p.name] = self.beta1 * self.m[p.name] + (1 - self.beta1) * g
            v = self.v[p.name] = self.beta2 * self.v[p.name] + (1 - self.beta2) * g * g
            # parameters are replaced, never written in place
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, state: Adam) -> None:
    """Apply one update to ``params`` using the gradients they hold."""
    if [p.name for p in params] != [p.name for p in state.params]:
        raise ValueError("parameter list does not match optimizer state")
    state.step()


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: DepthModel, cfg: TrainConfig, optimizer: Adam | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": cfg.to_dict(),
        "network": model.cfg.to_dict(),
        "step": optimizer.step_count if optimizer else 0,
        "parameters": [{"id": p.name, "shape": list(p.shape), "values": p.data.ravel().tolist()}
                       for p in model.parameters()],
    }
    if optimizer is not None:
        doc["optimizer"] = {
            "m": [{"id": p.name, "values": optimizer.m[p.name].ravel().tolist()}
                  for p in optimizer.params],
            "v": [{"id": p.name, "values": optimizer.v[p.name].ravel().tolist()}
                  for p in optimizer.params],
        }
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)
    return path


@dataclass
class Checkpoint:
    config: TrainConfig
    model: DepthModel
    optimizer: Adam


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    cfg = TrainConfig.from_dict(doc["config"])
    model = DepthModel(NetworkConfig.from_dict(doc["network"]))
    params = {p.name: p for p in model.parameters()}
    records = {r["id"]: r for r in doc["parameters"]}
    if set(records) != set(params):
        raise ValueError(f"checkpoint parameters differ from the architecture: "
                         f"missing {sorted(set(params) - set(records))}, "
                         f"unexpected {sorted(set(records) - set(params))}")
    for name, p in params.items():
        rec = records[name]
        if tuple(rec["shape"]) != p.shape:
            raise ValueError(f"parameter {name}: checkpoint shape {rec['shape']} != {list(p.shape)}")
        p.data = np.asarray(rec["values"], dtype=np.float64).reshape(p.shape)
    opt = Adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    opt.step_count = int(doc.get("step", 0))
    if "optimizer" in doc:
        for key in ("m", "v"):
            store = getattr(opt, key)
            for rec in doc["optimizer"][key]:
                store[rec["id"]] = np.asarray(rec["values"], dtype=np.float64).reshape(
                    params[rec["id"]].shape)
    return Checkpoint(cfg, model, opt)


def config_mismatch(a: TrainConfig, b: TrainConfig, keys=MODEL_KEYS) -> list[str]:
    da, db = a.to_dict(), b.to_dict()
    return [k for k in keys if da[k] != db[k]]


# --------------------------------------------------------------------------
# training


def batch_indices(iteration: int, batch_size: int, n: int, seed: int) -> list[int]:
    """Samples used at ``iteration``: consecutive slots of per-epoch seeded permutations."""
    out, perms = [], {}
    for g in range(iteration * batch_size, (iteration + 1) * batch_size):
        epoch, pos = divmod(g, n)
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([seed, epoch]).permutation(n)
        out.append(int(perms[epoch][pos]))
    return out


@dataclass
class TrainResult:
    model: DepthModel
    optimizer: Adam
    log: list[dict]
    checkpoint: Path | None


def _check_samples(samples, cfg: TrainConfig):
    if not samples:
        raise ValueError("no training samples")
    for s in samples:
        cfg.network.check_image(*s.gt_depth.shape)


def train(samples: list[SceneSample], cfg: TrainConfig, out_dir=None,
          resume: Checkpoint | None = None) -> TrainResult:
    """Minimise the masked objective over ``samples`` for ``cfg.iterations`` steps.

    Each step averages the loss of ``cfg.batch_size`` samples. A CSV log and
    checkpoints go to ``out_dir`` when given. A non-finite loss or gradient
    stops training after saving the last good parameters to
    ``last_good.json``.
    """
    _check_samples(samples, cfg)
    planes = cfg.depth_planes
    weights = cfg.weights
    if resume is not None:
        bad = config_mismatch(resume.config, cfg)
        if bad:
            raise ValueError(f"resume checkpoint disagrees with config on {bad}")
        model, opt = resume.model, resume.optimizer
        opt.lr = cfg.learning_rate
    else:
        model = DepthModel(cfg.network)
        opt = Adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.csv"
        fresh = resume is None or not log_path.exists()
        log_file = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(log_file)
        if fresh:
            writer.writerow(LOG_COLUMNS)
    log = []
    start = time.perf_counter()
    try:
        for it in range(opt.step_count, cfg.iterations):
            model.zero_grad()
            terms = np.zeros(5)
            for idx in batch_indices(it, cfg.batch_size, len(samples), cfg.seed):
                sample = samples[idx]
                with dc.Tape() as tape:
                    out = forward_pipeline(sample, model, planes)
                    lt = total_loss(out, sample.gt_depth, sample.mask, weights,
                                    sample.rig.ref_intrinsics)
                    loss = dc.mul(lt.total, 1.0 / cfg.batch_size)
                if not np.isfinite(lt.total.data):
                    raise FloatingPointError(f"non-finite loss at iteration {it + 1}")
                dc.backward(tape, loss)
                terms += np.array([lt.total.item(), lt.restored, lt.multi, lt.single, lt.normal])
            terms /= cfg.batch_size
            opt.step()
            row = dict(zip(LOG_COLUMNS, [it + 1, *terms.tolist()]))
            log.append(row)
            if writer is not None:
                writer.writerow([it + 1] + [repr(float(x)) for x in terms])
                log_file.flush()
            if (it + 1) % 25 == 0 or it + 1 == cfg.iterations:
                logger.info("iter %d loss %.5f (restored %.4f multi %.4f single %.4f) %.1fs",
                            it + 1, *terms[:4], time.perf_counter() - start)
            if out_dir is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"checkpoint_{it + 1:06d}.json", model, cfg, opt)
    except FloatingPointError:
        if out_dir is not None:
            # parameters are only replaced after a fully finite step, so these are good
            save_checkpoint(out_dir / "last_good.json", model, cfg, opt)
        raise
    finally:
        if log_file is not None:
            log_file.close()
    ckpt = save_checkpoint(out_dir / "checkpoint.json", model, cfg, opt) if out_dir else None
    return TrainResult(model, opt, log, ckpt)


def read_log(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(f)]


# --------------------------------------------------------------------------
# evaluation


def predict(sample: SceneSample, model: DepthModel, planes: DepthPlanes) -> PipelineOutput:
    """Forward pass with no tape (nothing is recorded)."""
    return forward_pipeline(sample, model, planes)


@dataclass
class SampleEvaluation:
    id: str
    restored: MetricReport
    single: MetricReport
    multi: MetricReport

    def to_dict(self) -> dict:
        return {"id": self.id, "restored": self.restored.to_dict(),
                "single": self.single.to_dict(), "multi": self.multi.to_dict()}


def write_prediction(out: PipelineOutput, directory, sample_id: str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_depth_png(directory / f"{sample_id}_restored.png", out.depth_restored.data)
    write_depth_png(directory / f"{sample_id}_single.png", out.depth_single.data)
    write_depth_png(directory / f"{sample_id}_multi.png", out.depth_multi.data)
    write_gray_png(directory / f"{sample_id}_conf_multi.png", out.conf_multi.data)
    write_gray_png(directory / f"{sample_id}_conf_single.png", out.conf_single.data)


def evaluate_corpus(samples: list[SceneSample], model: DepthModel, planes: DepthPlanes,
                    out_dir=None, figures: bool = False) -> dict:
    """Metrics for every sample and their masked-pixel-weighted aggregate.

    With ``out_dir`` this also writes ``reports/<id>.json``,
    ``aggregate.json`` and the predicted depth/confidence PNGs; ``figures``
    adds a matplotlib panel per sample.
    """
    per_sample = []
    out_dir = Path(out_dir) if out_dir is not None else None
    for sample in samples:
        out = predict(sample, model, planes)
        ev = SampleEvaluation(sample.id,
                              evaluate(out.depth_restored, sample.gt_depth, sample.mask),
                              evaluate(out.depth_single, sample.gt_depth, sample.mask),
                              evaluate(out.depth_multi, sample.gt_depth, sample.mask))
        per_sample.append(ev)
        if out_dir is not None:
            (out_dir / "reports").mkdir(parents=True, exist_ok=True)
            (out_dir / "reports" / f"{sample.id}.json").write_text(
                json.dumps(ev.to_dict(), indent=1) + "\n")
            write_prediction(out, out_dir / "depth", sample.id)
            if figures:
                from .plotting import plot_sample
                plot_sample(sample, out, out_dir / "figures" / f"{sample.id}.png")
    result = {
        "samples": [e.to_dict() for e in per_sample],
        "aggregate": {
            branch: aggregate([getattr(e, branch) for e in per_sample]).to_dict()
            for branch in ("restored", "single", "multi")
        },
    }
    if out_dir is not None:
        (out_dir / "aggregate.json").write_text(json.dumps(result["aggregate"], indent=1) + "\n")
    return result
