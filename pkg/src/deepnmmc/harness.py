"""Experiment pipeline: pretrain, cluster, fine-tune, evaluate, and emit artifacts.

Ground-truth labels only ever reach the metric functions; every training
call below receives instances or codes alone.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .baselines import DpmPrior, dpm_gibbs, gmm_em, kmeans, pca_project
from .data_io import Dataset, SampleSpec, load_mnist_idx, load_newsgroups_binary, split_sample, subsample_indices
from .dbn import Dbn, encode_batch, save_dbn, train_dbn
from .finetune import ClassRbm, finetune, label_log_posterior, save_class_rbm, top_layer_inputs
from .metrics import adjusted_rand_index, pairwise_f
from .nmmc import CodeTransform, NmmcConfig, NmmcResult, NmmcState, run_nmmc
from .rbm import CdConfig, Rbm, train_rbm

STAGES = ("data", "pretrain", "cluster", "finetune", "evaluate", "baselines")


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "mnist"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    newsgroups_train: str = ""
    newsgroups_test: str = ""
    train_count: int = 5000
    test_count: int = 1000
    layer_sizes: Tuple[int, ...] = (400, 100)
    learning_rate: float = 0.1
    epochs: int = 100
    cd_steps: int = 1
    batch_size: int = 100
    finetune_epochs: int = 100
    finetune_enabled: bool = True
    alpha_init: float = 4.0
    lam: float = 15.0
    C: float = 0.001
    iterations: int = 100
    new_cluster_df: float = 3.0
    new_cluster_scale: float = 0.03
    alpha_prior_shape: float = 1.0
    alpha_prior_rate: float = 1.0
    # Codes are centred and rescaled to this RMS norm before clustering (0 keeps raw codes).
    code_norm: float = 400.0
    code_bias: float = 0.1
    baselines: Tuple[Tuple[str, int], ...] = ()
    out_dir: str = "runs"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        object.__setattr__(self, "baselines", tuple((str(n), int(k)) for n, k in self.baselines))
        if not self.layer_sizes or min(self.layer_sizes) < 1:
            raise ValueError("layer_sizes must be a non-empty list of positive integers")
        if self.dataset not in ("mnist", "newsgroups"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        for name, _ in self.baselines:
            if name not in ("kmeans", "gmm", "pca_kmeans"):
                raise ValueError(f"unknown baseline {name!r}")
        if self.code_norm < 0 or self.code_bias < 0:
            raise ValueError("code_norm and code_bias must be non-negative")
        # Remaining ranges are checked by the per-module config types.
        self.cd_config()
        self.nmmc_config()
        SampleSpec(self.train_count, self.test_count, self.seed)

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        import yaml

        with open(path) as fh:
            values = yaml.safe_load(fh) or {}
        if not isinstance(values, dict):
            raise ValueError(f"{path}: expected a key-value mapping")
        return cls.from_mapping(values)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["layer_sizes"] = list(self.layer_sizes)
        out["baselines"] = [list(b) for b in self.baselines]
        return out

    def stage_seed(self, stage: str) -> int:
        return int(np.random.SeedSequence([self.seed, STAGES.index(stage)]).generate_state(1, np.uint64)[0])

    def cd_config(self, epochs: Optional[int] = None, stage: str = "pretrain") -> CdConfig:
        return CdConfig(self.learning_rate, self.epochs if epochs is None else epochs,
                        self.cd_steps, self.batch_size, self.stage_seed(stage))

    def nmmc_config(self, **overrides) -> NmmcConfig:
        base = NmmcConfig(self.alpha_init, self.lam, self.C, self.iterations, self.stage_seed("cluster"),
                          self.new_cluster_df, self.new_cluster_scale,
                          self.alpha_prior_shape, self.alpha_prior_rate)
        return replace(base, **overrides)

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / f"seed_{self.seed}"


@dataclass
class ExperimentReport:
    seed: int
    config: dict
    metrics: Dict[str, Dict[str, float]] = field(default_factory=dict)
    final_K: int = 0
    alpha_trajectory: List[float] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# artifacts

def _format(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_metrics_csv(rows, path, columns: Optional[Sequence[str]] = None):
    """Write dicts (or dataclass rows) as comma-separated text with a header line.

    Floats use the shortest repr that round-trips, so output is a pure
    function of the input values.
    """
    rows = [dataclasses.asdict(r) if dataclasses.is_dataclass(r) else dict(r) for r in rows]
    if columns is None:
        if not rows:
            raise ValueError("columns are required for an empty log")
        columns = list(rows[0])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_format(row[c]) for c in columns])
    Path(path).write_text(buf.getvalue())


def read_metrics_csv(path) -> List[dict]:
    def parse(text):
        for kind in (int, float):
            try:
                return kind(text)
            except ValueError:
                pass
        return text

    with open(path, newline="") as fh:
        return [{k: parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def weight_mosaic(rbm: Rbm, tile_shape: Optional[Tuple[int, int]] = None,
                  columns: Optional[int] = None) -> np.ndarray:
    """Grid of per-hidden-unit weight images as uint8, one pixel of black between tiles."""
    d, n = rbm.weights.shape
    if tile_shape is None:
        side = math.isqrt(d)
        if side * side != d:
            raise ValueError(f"visible size {d} is not a perfect square; give tile_shape")
        tile_shape = (side, side)
    th, tw = tile_shape
    if th * tw != d:
        raise ValueError(f"tile shape {tile_shape} does not hold {d} weights")
    cols = columns or math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    out = np.zeros((rows * (th + 1) - 1, cols * (tw + 1) - 1), dtype=np.uint8)
    for j in range(n):
        w = rbm.weights[:, j]
        lo, hi = w.min(), w.max()
        tile = np.full(d, 128.0) if hi == lo else 255.0 * (w - lo) / (hi - lo)
        r, c = divmod(j, cols)
        out[r * (th + 1):r * (th + 1) + th, c * (tw + 1):c * (tw + 1) + tw] = \
            np.rint(tile).astype(np.uint8).reshape(th, tw)
    return out


def export_weight_images(rbm: Rbm, path, tile_shape: Optional[Tuple[int, int]] = None,
                         columns: Optional[int] = None) -> Tuple[int, int]:
    """Write the weight mosaic as a binary PGM (P5); returns (height, width)."""
    img = weight_mosaic(rbm, tile_shape, columns)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    return h, w


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # header is four whitespace-separated tokens followed by exactly one whitespace byte
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    payload = raw[pos + 1:]
    if maxval != 255 or len(payload) != w * h:
        raise ValueError("unexpected PGM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)


_CLUSTER_MAGIC = b"DNNMMC\x00\x00"


def clustering_to_bytes(transform: CodeTransform, state: NmmcState) -> bytes:
    # u32 version, N, K, code dim, out dim; f64 alpha, lam, C, factor, bias;
    # f64 mean[dim], thetas[K*out]; i64 counts[K], assignments[N].
    head = _CLUSTER_MAGIC + struct.pack("<IIIII", 1, state.N, state.K, transform.dim, state.dim)
    head += struct.pack("<5d", state.alpha, state.lam, state.C, transform.factor, transform.bias)
    body = [np.ascontiguousarray(a, dtype=t).tobytes() for a, t in
            ((transform.mean, "<f8"), (state.thetas, "<f8"), (state.counts, "<i8"), (state.assignments, "<i8"))]
    return head + b"".join(body)


def clustering_from_bytes(buf: bytes) -> Tuple[CodeTransform, NmmcState]:
    if buf[:8] != _CLUSTER_MAGIC:
        raise ValueError("not a clustering checkpoint (bad magic)")
    version, n, k, dim, out = struct.unpack_from("<IIIII", buf, 8)
    if version != 1:
        raise ValueError(f"unsupported clustering checkpoint version {version}")
    alpha, lam, C, factor, bias = struct.unpack_from("<5d", buf, 28)
    pos = 68

    def take(count, dtype):
        nonlocal pos
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).copy()
        pos += arr.nbytes
        return arr

    mean = take(dim, "<f8")
    thetas = take(k * out, "<f8").reshape(k, out)
    counts = take(k, "<i8")
    assignments = take(n, "<i8")
    transform = CodeTransform(mean.astype(np.float64), factor, bias)
    return transform, NmmcState(assignments.astype(np.int64), thetas.astype(np.float64),
                                counts.astype(np.int64), alpha, lam, C)


# ---------------------------------------------------------------------------
# stages

def load_data(config: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    spec = SampleSpec(config.train_count, config.test_count, config.stage_seed("data"))
    if config.dataset == "mnist":
        train = load_mnist_idx(config.train_images, config.train_labels)
        test = load_mnist_idx(config.test_images or config.train_images,
                              config.test_labels or config.train_labels)
        if config.test_images:
            return split_sample(train, test, spec)
        source = train
    else:
        source = load_newsgroups_binary(config.newsgroups_train)
        if config.newsgroups_test:
            return split_sample(source, load_newsgroups_binary(config.newsgroups_test), spec)
    # One source file: draw disjoint train and test rows from a single permutation.
    idx = subsample_indices(source.n, spec.train_count + spec.test_count, spec.seed)
    parts = idx[:spec.train_count], idx[spec.train_count:]
    return tuple(Dataset(source.instances[p], source.labels[p], source.name) for p in parts)


def pretrain(config: ExperimentConfig, train: Dataset):
    log = []
    dbn = train_dbn(train.instances, config.layer_sizes, config.cd_config(),
                    callback=lambda layer, epoch, err: log.append(
                        {"layer": layer, "epoch": epoch, "reconstruction_error": err}))
    return dbn, log


def fit_transform(config: ExperimentConfig, codes) -> CodeTransform:
    if config.code_norm == 0:
        return CodeTransform.identity(codes.shape[1])
    return CodeTransform.fit(codes, config.code_norm, config.code_bias)


def cluster(config: ExperimentConfig, codes, truth=None, **overrides):
    """NMMC on transformed codes. ``truth`` only feeds the per-sweep ARI column."""
    transform = fit_transform(config, codes)
    log = []

    def record(rec, state):
        row = {"iteration": rec.iteration, "K": rec.K, "alpha": rec.alpha, "objective": rec.objective}
        if truth is not None:
            row["train_ari"] = adjusted_rand_index(state.assignments, truth)
        log.append(row)

    result = run_nmmc(transform.apply(codes), config.nmmc_config(**overrides), callback=record)
    return transform, result, log


def score(pred, truth) -> Dict[str, float]:
    return {"ari": adjusted_rand_index(pred, truth), "f": pairwise_f(pred, truth),
            "clusters": int(np.unique(pred).size)}


def _timed(timings, stage, fn, *args, **kwargs):
    start = time.perf_counter()
    try:
        out = fn(*args, **kwargs)
    except Exception as exc:
        raise StageError(stage, exc) from exc
    timings[stage] = time.perf_counter() - start
    return out


def run_experiment(config: ExperimentConfig, write: bool = True) -> ExperimentReport:
    """Pretrain a DBN, cluster its training codes, fine-tune, and evaluate.

    Train labels are the NMMC assignments (pre) or the fine-tuned posterior
    argmax (post); test labels come from the highest clustering score on
    encoded test codes (pre) or the fine-tuned pipeline (post). With
    ``write`` the run directory receives checkpoints, CSV logs and a JSON
    report; the CSV logs and checkpoints carry no wall-clock values.
    """
    report = ExperimentReport(config.seed, config.to_dict())
    t = report.timings
    train, test = _timed(t, "data", load_data, config)
    y_train, y_test = train.labels, test.labels

    dbn, pretrain_log = _timed(t, "pretrain", pretrain, config, replace(train, labels=None))

    def encode_all():
        inputs = [top_layer_inputs(dbn, d.instances) for d in (train, test)]
        return inputs, [encode_batch(Dbn([dbn.top]), x) for x in inputs]

    (in_train, in_test), (codes_train, codes_test) = _timed(t, "encode", encode_all)
    transform, result, nmmc_log = _timed(t, "cluster", cluster, config, codes_train, y_train)
    state = result.state
    report.final_K = state.K
    report.alpha_trajectory = [row["alpha"] for row in nmmc_log]

    def evaluate_pre():
        pre_test = state.predict(transform.apply(codes_test))
        return {"train": score(result.assignments, y_train), "test": score(pre_test, y_test)}

    report.metrics["pretrain"] = _timed(t, "evaluate", evaluate_pre)

    model = None
    if config.finetune_enabled:
        model = _timed(t, "finetune", finetune, dbn, transform.code_weights(state.thetas), in_train,
                       result.assignments, config.cd_config(config.finetune_epochs, "finetune"))
        report.metrics["finetune"] = {
            "train": score(np.argmax(label_log_posterior(model, in_train), axis=1), y_train),
            "test": score(np.argmax(label_log_posterior(model, in_test), axis=1), y_test),
        }

    def run_baselines():
        out = {}
        seed = config.stage_seed("baselines") % 2**32
        for name, k in config.baselines:
            if name == "kmeans":
                pred = kmeans(codes_train, k, seed)
            elif name == "gmm":
                pred = gmm_em(codes_train, k, seed)
            else:
                pred = kmeans(pca_project(train.instances, config.layer_sizes[-1]), k, seed)
            out[f"{name}_{k}"] = {"train": score(pred, y_train)}
        return out

    report.metrics.update(_timed(t, "baselines", run_baselines))

    if write:
        out = config.run_dir
        out.mkdir(parents=True, exist_ok=True)
        save_dbn(dbn, out / "dbn.bin")
        (out / "clustering.bin").write_bytes(clustering_to_bytes(transform, state))
        if model is not None:
            save_class_rbm(model, out / "class_rbm.bin")
        write_metrics_csv(pretrain_log, out / "pretrain_log.csv", ["layer", "epoch", "reconstruction_error"])
        write_metrics_csv(nmmc_log, out / "nmmc_log.csv", ["iteration", "K", "alpha", "objective", "train_ari"])
        write_metrics_csv(metric_rows(report), out / "metrics.csv", METRIC_COLUMNS)
        (out / "report.json").write_text(report.to_json() + "\n")
    return report


METRIC_COLUMNS = ["seed", "stage", "split", "ari", "f", "clusters"]


def metric_rows(report: ExperimentReport) -> List[dict]:
    return [{"seed": report.seed, "stage": stage, "split": split, **vals}
            for stage, splits in report.metrics.items() for split, vals in splits.items()]


def summarize(reports: Sequence[ExperimentReport]) -> List[dict]:
    """Mean and standard deviation of every metric across seeds."""
    groups: Dict[Tuple[str, str, str], List[float]] = {}
    for report in reports:
        for row in metric_rows(report):
            for metric in ("ari", "f", "clusters"):
                groups.setdefault((row["stage"], row["split"], metric), []).append(float(row[metric]))
    return [{"stage": s, "split": sp, "metric": m, "mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)}
            for (s, sp, m), v in groups.items()]


def run_seeds(config: ExperimentConfig, seeds: Sequence[int], write: bool = True) -> List[ExperimentReport]:
    reports = [run_experiment(replace(config, seed=int(s)), write) for s in seeds]
    if write:
        Path(config.out_dir).mkdir(parents=True, exist_ok=True)
        write_metrics_csv(summarize(reports), Path(config.out_dir) / "summary.csv",
                          ["stage", "split", "metric", "mean", "std", "n"])
    return reports


# ---------------------------------------------------------------------------
# NMMC versus DPM

COMPARE_COLUMNS = ["method", "seed", "iteration", "K", "alpha", "objective", "train_ari", "elapsed_ms"]


def compare_nmmc_dpm(config: ExperimentConfig, codes, truth, seeds: Sequence[int],
                     iterations: Optional[int] = None):
    """Run NMMC and the DPM sampler on the same codes with the same seeds.

    NMMC sees the configured code transform (which includes its offset
    column); DPM gets the untransformed codes, since its data-driven prior
    is affine-equivariant. Returns (per-sweep rows, per-seed summary rows).
    """
    codes = np.asarray(codes, dtype=np.float64)
    iterations = config.iterations if iterations is None else iterations
    rows, summary = [], []
    for seed in seeds:
        seed = int(seed)
        cfg = replace(config, seed=seed, iterations=iterations)
        final = {}

        transform = fit_transform(cfg, codes)

        def nmmc_cb(rec, state):
            rows.append({"method": "nmmc", "seed": seed, "iteration": rec.iteration, "K": rec.K,
                         "alpha": rec.alpha, "objective": rec.objective,
                         "train_ari": adjusted_rand_index(state.assignments, truth), "elapsed_ms": rec.elapsed_ms})

        res = run_nmmc(transform.apply(codes), cfg.nmmc_config(), callback=nmmc_cb)
        final["nmmc"] = (adjusted_rand_index(res.assignments, truth), res.state.K, res.log)

        def dpm_cb(rec, z):
            rows.append({"method": "dpm", "seed": seed, "iteration": rec.iteration, "K": rec.K,
                         "alpha": rec.alpha, "objective": rec.objective,
                         "train_ari": adjusted_rand_index(z, truth), "elapsed_ms": rec.elapsed_ms})

        dres = dpm_gibbs(codes, DpmPrior.from_data(codes, config.alpha_init), iterations,
                         cfg.stage_seed("cluster"), callback=dpm_cb)
        final["dpm"] = (adjusted_rand_index(dres.labels, truth), dres.log[-1].K, dres.log)
        for method, (ari, k, log) in final.items():
            sweeps = [r.elapsed_ms for r in log[1:]] or [log[0].elapsed_ms]
            summary.append({"method": method, "seed": seed, "final_ari": ari, "final_K": k,
                            "mean_sweep_ms": float(np.mean(sweeps))})
    return rows, summary


def sweep_times(config: ExperimentConfig, codes, sweeps: int = 3, seed: int = 0) -> Dict[str, float]:
    """Mean per-sweep wall time (ms) of both samplers on one code matrix."""
    codes = np.asarray(codes, dtype=np.float64)
    cfg = replace(config, seed=seed, iterations=sweeps)
    nm = run_nmmc(fit_transform(cfg, codes).apply(codes), cfg.nmmc_config())
    dp = dpm_gibbs(codes, DpmPrior.from_data(codes, config.alpha_init), sweeps, cfg.stage_seed("cluster"))
    return {"nmmc": float(np.mean([r.elapsed_ms for r in nm.log[1:]])),
            "dpm": float(np.mean([r.elapsed_ms for r in dp.log[1:]]))}


def timing_codes(config: ExperimentConfig, dbn: Dbn, inputs, dims: Sequence[int]) -> Dict[int, np.ndarray]:
    """Codes of several widths: a fresh top RBM of each size trained on the top-layer inputs."""
    out = {}
    for dim in dims:
        if dim == dbn.top.n_hidden:
            top = dbn.top
        else:
            top = train_rbm(inputs, int(dim), config.cd_config(stage="pretrain"))
        out[int(dim)] = encode_batch(Dbn([top]), inputs)
    return out


TIMING_COLUMNS = ["axis", "value", "nmmc_ms", "dpm_ms", "ratio"]


def timing_study(config: ExperimentConfig, codes_by_dim: Dict[int, np.ndarray],
                 sizes: Sequence[int] = (), sweeps: int = 3) -> List[dict]:
    """Per-sweep time against code width, and against N on the first code matrix."""
    rows = []
    for dim, codes in codes_by_dim.items():
        t = sweep_times(config, codes, sweeps)
        rows.append({"axis": "dim", "value": dim, "nmmc_ms": t["nmmc"], "dpm_ms": t["dpm"],
                     "ratio": t["nmmc"] / t["dpm"]})
    base = next(iter(codes_by_dim.values()))
    for n in sizes:
        t = sweep_times(config, base[:n], sweeps)
        rows.append({"axis": "N", "value": n, "nmmc_ms": t["nmmc"], "dpm_ms": t["dpm"],
                     "ratio": t["nmmc"] / t["dpm"]})
    return rows
