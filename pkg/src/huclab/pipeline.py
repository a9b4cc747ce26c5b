"""Pipeline orchestration: config, stage graph, caching, reports.

Stages write their artifacts under ``run_dir/<stage>/`` together with a
``stage.json`` recording the config hash, the effective seed, the upstream
stage fingerprints and a sha256 per output file.  A stage whose recorded
hashes all match the on-disk state is up to date and rerunning it is a
no-op.  One pipeline seed drives every stage through derived sub-seeds.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cluster as cl
from . import dimreduce as dr
from . import encoder as enc
from . import evaluate as ev
from . import io as hio
from . import objective as obj
from .corpus import CorpusConfig, gen_corpus, make_abx_triplets
from .util import canonical_json, derive_seed


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("invalid config:\n" + "\n".join(f"  - {v}" for v in violations))


class MissingDependencyError(RuntimeError):
    pass


class RunDirLockedError(RuntimeError):
    pass


# --- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class SamplingConfig:
    mode: str = "farthest"
    n_select: int = 2
    m_grid: tuple[int, ...] = (2, 3, 4, 6, 8)
    include_fraction: float = 0.5

    def __post_init__(self) -> None:
        if self.mode not in ("none", "random", "poisson", "farthest", "nearest"):
            raise ValueError(f"sampling.mode must be one of none|random|poisson|farthest|nearest, got {self.mode!r}")
        if self.mode in ("farthest", "nearest"):
            if self.n_select < 1:
                raise ValueError("sampling.n_select must be >= 1")
            grid = tuple(self.m_grid)
            if len(grid) < 3 or any(b <= a for a, b in zip(grid, grid[1:])):
                raise ValueError("sampling.m_grid must hold >= 3 strictly increasing cluster counts")
            if any(m < 1 for m in grid):
                raise ValueError("sampling.m_grid entries must be >= 1")
        if not 0 < self.include_fraction <= 1:
            raise ValueError("sampling.include_fraction must be in (0, 1]")


@dataclass(frozen=True)
class EvalConfig:
    abx_triplets: int = 150
    ued_transform: ev.SignalTransform = field(default_factory=ev.SignalTransform)
    probe_max_iters: int = 150
    probe_learning_rate: float = 1.0
    probe_tol: float = 1e-7
    bootstrap_resamples: int = 200

    def __post_init__(self) -> None:
        if self.abx_triplets < 1:
            raise ValueError("eval.abx_triplets must be >= 1")
        if self.probe_max_iters < 1:
            raise ValueError("eval.probe.max_iters must be >= 1")
        if self.bootstrap_resamples < 1:
            raise ValueError("eval.bootstrap_resamples must be >= 1")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int
    corpus: CorpusConfig
    arch: enc.EncoderArch
    cpc: obj.CPCConfig
    train: obj.TrainConfig
    k: int
    sampling: SamplingConfig
    d: int
    gbdt: dr.BoostConfig
    eval: EvalConfig
    run_dir: str | None = None


_SCHEMA = {
    "seed": ("int", 0),
    "corpus": {
        "num_speakers": ("int", 4),
        "num_phonemes": ("int", 4),
        "utterances_per_speaker": ("int", 10),
        "phones_per_utterance": ("int", 6),
        "frames_per_phone": ("int", 6),
        "samples_per_frame": ("int", 24),
        "speaker_strength": ("number", 3.0),
        "noise_std": ("number", 0.05),
    },
    "arch": {
        "conv_layers": ("conv_layers", [[4, 4, 12], [3, 3, 16], [2, 2, 20]]),
        "recurrent_layers": ("int", 2),
        "hidden_dim": ("int", 32),
        "activation": ("str", "relu"),
    },
    "cpc": {
        "future_steps": ("int", 4),
        "num_negatives": ("int", 8),
    },
    "train": {
        "reg_lambda": ("number", 1e-4),
        "epochs": ("int", 40),
        "patience": ("int", 8),
        "learning_rate": ("number", 1e-2),
        "batch_size": ("int", 4),
    },
    "k": ("int", 8),
    "sampling": {
        "mode": ("str", "farthest"),
        "n_select": ("int", 2),
        "m_grid": ("int_list", [2, 3, 4, 6, 8]),
        "include_fraction": ("number", 0.5),
    },
    "d": ("int", 24),
    "gbdt": {
        "rounds": ("int", 20),
        "max_depth": ("int", 3),
        "learning_rate": ("number", 0.3),
        "min_split_gain": ("number", 0.0),
        "subsample": ("number", 1.0),
    },
    "eval": {
        "abx_triplets": ("int", 150),
        "ued_transform": {
            "kind": ("str", "feature_noise"),
            "param": ("number", 0.5),
        },
        "probe": {
            "max_iters": ("int", 300),
            "learning_rate": ("number", 1.0),
            "tol": ("number", 1e-7),
        },
        "bootstrap_resamples": ("int", 200),
    },
    "paths": {
        "run_dir": ("optional_str", None),
    },
}


def _check_type(value, kind: str, path: str, violations: list[str]) -> bool:
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            violations.append(f"{path}: expected an integer, got {value!r}")
            return False
    elif kind == "number":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            violations.append(f"{path}: expected a number, got {value!r}")
            return False
    elif kind == "str":
        if not isinstance(value, str):
            violations.append(f"{path}: expected a string, got {value!r}")
            return False
    elif kind == "optional_str":
        if value is not None and not isinstance(value, str):
            violations.append(f"{path}: expected a string or null, got {value!r}")
            return False
    elif kind == "int_list":
        if not isinstance(value, list) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            violations.append(f"{path}: expected a list of integers, got {value!r}")
            return False
    elif kind == "conv_layers":
        ok = isinstance(value, list) and all(
            isinstance(l, list) and len(l) == 3 and all(isinstance(v, int) for v in l)
            for l in value
        )
        if not ok:
            violations.append(f"{path}: expected a list of [kernel, stride, channels] triples, got {value!r}")
            return False
    return True


def _merge(user: dict, schema: dict, prefix: str, violations: list[str]) -> dict:
    out = {}
    for key, spec in schema.items():
        path = f"{prefix}{key}"
        if isinstance(spec, dict):
            sub = user.get(key, {})
            if not isinstance(sub, dict):
                violations.append(f"{path}: expected an object, got {sub!r}")
                sub = {}
            out[key] = _merge(sub, spec, path + ".", violations)
        else:
            kind, default = spec
            if key in user:
                value = user[key]
                if _check_type(value, kind, path, violations):
                    out[key] = value
                else:
                    out[key] = default
            else:
                out[key] = default
    for key in user:
        if key not in schema:
            violations.append(f"unknown key: {prefix}{key}")
    return out


def build_config(raw: dict, seed_override: int | None = None) -> PipelineConfig:
    """Validate a raw config dict, fill defaults and construct the config.

    Every violation is collected; a single ConfigError reports them all.
    """
    violations: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["top level must be a JSON object"])
    merged = _merge(raw, _SCHEMA, "", violations)
    if seed_override is not None:
        merged["seed"] = seed_override
    seed = merged["seed"]

    def construct(factory, **kwargs):
        try:
            return factory(**kwargs)
        except ValueError as err:
            violations.append(str(err))
            return None

    corpus = construct(CorpusConfig, **merged["corpus"], seed=derive_seed(seed, "corpus"))
    arch = construct(
        enc.EncoderArch,
        conv_layers=tuple(tuple(l) for l in merged["arch"]["conv_layers"]),
        recurrent_layers=merged["arch"]["recurrent_layers"],
        hidden_dim=merged["arch"]["hidden_dim"],
        activation=merged["arch"]["activation"],
    )
    cpc = construct(obj.CPCConfig, **merged["cpc"], seed=derive_seed(seed, "cpc"))
    train = construct(obj.TrainConfig, **merged["train"], seed=derive_seed(seed, "train"))
    sampling = construct(
        SamplingConfig,
        mode=merged["sampling"]["mode"],
        n_select=merged["sampling"]["n_select"],
        m_grid=tuple(merged["sampling"]["m_grid"]),
        include_fraction=merged["sampling"]["include_fraction"],
    )
    gbdt = construct(dr.BoostConfig, **merged["gbdt"], seed=derive_seed(seed, "gbdt"))
    transform = construct(ev.SignalTransform, **merged["eval"]["ued_transform"])
    eval_cfg = None
    if transform is not None:
        eval_cfg = construct(
            EvalConfig,
            abx_triplets=merged["eval"]["abx_triplets"],
            ued_transform=transform,
            probe_max_iters=merged["eval"]["probe"]["max_iters"],
            probe_learning_rate=merged["eval"]["probe"]["learning_rate"],
            probe_tol=merged["eval"]["probe"]["tol"],
            bootstrap_resamples=merged["eval"]["bootstrap_resamples"],
        )

    if merged["k"] < 1:
        violations.append("k must be >= 1")
    if merged["d"] < 1:
        violations.append("d must be >= 1")
    if arch is not None:
        if merged["d"] > arch.hidden_dim:
            violations.append(
                f"d ({merged['d']}) must not exceed arch.hidden_dim ({arch.hidden_dim})"
            )
        if corpus is not None and corpus.samples_per_frame != arch.total_stride:
            violations.append(
                f"corpus.samples_per_frame ({corpus.samples_per_frame}) must equal the product "
                f"of arch conv strides ({arch.total_stride})"
            )
    if violations:
        raise ConfigError(violations)
    return PipelineConfig(
        seed=seed,
        corpus=corpus,
        arch=arch,
        cpc=cpc,
        train=train,
        k=merged["k"],
        sampling=sampling,
        d=merged["d"],
        gbdt=gbdt,
        eval=eval_cfg,
        run_dir=merged["paths"]["run_dir"],
    )


def parse_config(path, seed_override: int | None = None) -> PipelineConfig:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return build_config(raw, seed_override)


def config_to_dict(config: PipelineConfig) -> dict:
    """Canonical user-shaped dict (derived sub-seeds excluded): the echo dump."""
    return {
        "seed": config.seed,
        "corpus": {
            k: getattr(config.corpus, k)
            for k in _SCHEMA["corpus"]
        },
        "arch": {
            "conv_layers": [list(l) for l in config.arch.conv_layers],
            "recurrent_layers": config.arch.recurrent_layers,
            "hidden_dim": config.arch.hidden_dim,
            "activation": config.arch.activation,
        },
        "cpc": {
            "future_steps": config.cpc.future_steps,
            "num_negatives": config.cpc.num_negatives,
        },
        "train": {k: getattr(config.train, k) for k in _SCHEMA["train"]},
        "k": config.k,
        "sampling": {
            "mode": config.sampling.mode,
            "n_select": config.sampling.n_select,
            "m_grid": list(config.sampling.m_grid),
            "include_fraction": config.sampling.include_fraction,
        },
        "d": config.d,
        "gbdt": {k: getattr(config.gbdt, k) for k in _SCHEMA["gbdt"]},
        "eval": {
            "abx_triplets": config.eval.abx_triplets,
            "ued_transform": {
                "kind": config.eval.ued_transform.kind,
                "param": config.eval.ued_transform.param,
            },
            "probe": {
                "max_iters": config.eval.probe_max_iters,
                "learning_rate": config.eval.probe_learning_rate,
                "tol": config.eval.probe_tol,
            },
            "bootstrap_resamples": config.eval.bootstrap_resamples,
        },
        "paths": {"run_dir": config.run_dir},
    }


def config_hash(config: PipelineConfig) -> str:
    return hashlib.sha256(canonical_json(config_to_dict(config)).encode("utf-8")).hexdigest()


# --- stage machinery -----------------------------------------------------------


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _stage_dir(run_dir, stage: str) -> Path:
    return Path(run_dir) / stage


def _stage_info_path(run_dir, stage: str) -> Path:
    return _stage_dir(run_dir, stage) / "stage.json"


def stage_fingerprint(run_dir, stage: str) -> str | None:
    info = _stage_info_path(run_dir, stage)
    if not info.exists():
        return None
    return hashlib.sha256(info.read_bytes()).hexdigest()


def _is_up_to_date(run_dir, stage: str, cfg_hash: str, upstream: dict[str, str]) -> bool:
    info_path = _stage_info_path(run_dir, stage)
    if not info_path.exists():
        return False
    try:
        info = json.loads(info_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return False
    if info.get("config_hash") != cfg_hash or info.get("upstream") != upstream:
        return False
    stage_dir = _stage_dir(run_dir, stage)
    for rel, digest in info.get("outputs", {}).items():
        out = stage_dir / rel
        if not out.exists() or _sha256_file(out) != digest:
            return False
    return True


def _write_stage_info(run_dir, stage: str, config: PipelineConfig, upstream: dict[str, str]) -> None:
    stage_dir = _stage_dir(run_dir, stage)
    outputs = {}
    for path in sorted(stage_dir.rglob("*")):
        if path.is_file() and path.name != "stage.json":
            outputs[str(path.relative_to(stage_dir))] = _sha256_file(path)
    info = {
        "stage": stage,
        "config_hash": config_hash(config),
        "seed": config.seed,
        "upstream": upstream,
        "outputs": outputs,
    }
    _stage_info_path(run_dir, stage).write_text(canonical_json(info), encoding="utf-8")


# --- stage implementations -------------------------------------------------------


def _load_run_corpus(run_dir):
    return hio.load_corpus(_stage_dir(run_dir, "gen-corpus"))


def _load_features(run_dir) -> dict[str, np.ndarray]:
    feat_dir = _stage_dir(run_dir, "extract") / "features"
    return {p.stem: hio.read_features(p) for p in sorted(feat_dir.glob("*.hucf"))}


def _stage_gen_corpus(config: PipelineConfig, run_dir) -> None:
    corpus = gen_corpus(config.corpus)
    hio.save_corpus(_stage_dir(run_dir, "gen-corpus"), corpus, config.corpus)


def _stage_pretrain_cpc(config: PipelineConfig, run_dir) -> None:
    corpus = _load_run_corpus(run_dir)
    stage_dir = _stage_dir(run_dir, "pretrain-cpc")
    result = obj.train_cpc(
        corpus,
        config.arch,
        config.cpc,
        config.train,
        num_classes=config.k,
        log_path=stage_dir / "train_log.jsonl",
    )
    hio.write_checkpoint(stage_dir / "cpc.hucp", result.params)


def _stage_extract(config: PipelineConfig, run_dir) -> None:
    corpus = _load_run_corpus(run_dir)
    params = hio.read_checkpoint(_stage_dir(run_dir, "pretrain-cpc") / "cpc.hucp")
    feat_dir = _stage_dir(run_dir, "extract") / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    for sig in corpus:
        _, c = enc.encode(params, sig)
        hio.write_features(feat_dir / f"{sig.utterance_id}.hucf", c)


def _kmeans_inertia_curve(means_matrix, grid, seed):
    """(M, final inertia) over the grid, enveloped to be non-increasing.

    Lloyd local optima can leave tiny upward bumps in the raw sweep, which
    would violate the knee detector's precondition; the running-min
    envelope removes them without touching the detector itself.
    """
    curve = []
    books = {}
    for m in grid:
        book = cl.kmeans(means_matrix, m, max_iters=100, seed=derive_seed(seed, "pseudo-speaker", m))
        books[m] = book
        inertia = book.inertia_history[-1]
        if curve:
            inertia = min(inertia, curve[-1][1])
        curve.append((m, inertia))
    return curve, books


def _stage_sample(config: PipelineConfig, run_dir) -> None:
    features = _load_features(run_dir)
    utt_ids = sorted(features)
    mode = config.sampling.mode
    info = {
        "mode": mode,
        "m": 0,
        "n": 0,
        "selected_centroids": [],
        "inertia_curve": [],
    }
    if mode == "none":
        selected = set(utt_ids)
    elif mode == "random":
        rng = np.random.default_rng(derive_seed(config.seed, "sample-random"))
        count = max(1, round(config.sampling.include_fraction * len(utt_ids)))
        keep = rng.choice(len(utt_ids), size=count, replace=False)
        selected = {utt_ids[i] for i in keep}
    elif mode == "poisson":
        rng = np.random.default_rng(derive_seed(config.seed, "sample-poisson"))
        drawn = rng.random(len(utt_ids)) < config.sampling.include_fraction
        selected = {u for u, keep in zip(utt_ids, drawn) if keep}
        if not selected:
            selected = set(utt_ids)
    else:
        means = {u: cl.utterance_mean(features[u]) for u in utt_ids}
        matrix = np.stack([means[u] for u in utt_ids])
        grid = [m for m in config.sampling.m_grid if m <= len(utt_ids)]
        if len(grid) < 3:
            raise RuntimeError(
                f"sampling.m_grid leaves {len(grid)} usable cluster counts for "
                f"{len(utt_ids)} utterances; need >= 3"
            )
        curve, books = _kmeans_inertia_curve(matrix, grid, config.seed)
        m_star = cl.knee_point(curve)
        if config.sampling.n_select > m_star:
            raise RuntimeError(
                f"sampling.n_select ({config.sampling.n_select}) exceeds the knee-point "
                f"cluster count M={m_star}"
            )
        book = books[m_star]
        select = cl.select_farthest if mode == "farthest" else cl.select_nearest
        centroid_ids = select(book, config.sampling.n_select)
        selected = cl.sample_utterances(means, book, centroid_ids)
        if not selected:
            raise RuntimeError("sampling selected zero utterances")
        info.update(
            m=m_star,
            n=config.sampling.n_select,
            selected_centroids=sorted(centroid_ids),
            inertia_curve=[[m, v] for m, v in curve],
        )
    info["selected_utterances"] = sorted(selected)
    stage_dir = _stage_dir(run_dir, "sample")
    stage_dir.mkdir(parents=True, exist_ok=True)
    (stage_dir / "sample.json").write_text(canonical_json(info), encoding="utf-8")


def _stage_cluster(config: PipelineConfig, run_dir) -> None:
    features = _load_features(run_dir)
    plan = json.loads((_stage_dir(run_dir, "sample") / "sample.json").read_text(encoding="utf-8"))
    points = np.concatenate(
        [cl.mean_normalize(features[u]) for u in plan["selected_utterances"]], axis=0
    )
    if len(points) < config.k:
        raise RuntimeError(f"only {len(points)} sampled frames for k={config.k} clusters")
    book = cl.kmeans(points, config.k, max_iters=100, seed=derive_seed(config.seed, "codebook"))
    stage_dir = _stage_dir(run_dir, "cluster")
    stage_dir.mkdir(parents=True, exist_ok=True)
    hio.write_codebook(stage_dir / "codebook.hucc", book)


def _stage_label(config: PipelineConfig, run_dir) -> None:
    features = _load_features(run_dir)
    book = hio.read_codebook(_stage_dir(run_dir, "cluster") / "codebook.hucc")
    labels = {u: cl.assign_labels(cl.mean_normalize(mat), book) for u, mat in features.items()}
    stage_dir = _stage_dir(run_dir, "label")
    stage_dir.mkdir(parents=True, exist_ok=True)
    hio.write_labels(stage_dir / "labels.tsv", labels)


def _stage_train_huc(config: PipelineConfig, run_dir) -> None:
    corpus = _load_run_corpus(run_dir)
    labels = hio.read_labels(_stage_dir(run_dir, "label") / "labels.tsv")
    init = enc.init_params(
        config.arch,
        derive_seed(config.seed, "huc-init"),
        future_steps=config.cpc.future_steps,
        num_classes=config.k,
    )
    stage_dir = _stage_dir(run_dir, "train-huc")
    stage_dir.mkdir(parents=True, exist_ok=True)
    result = obj.train_huc(
        corpus, init, labels, config.train, config.cpc, log_path=stage_dir / "train_log.jsonl"
    )
    hio.write_checkpoint(stage_dir / "huc.hucp", result.params)


def _huc_features(config: PipelineConfig, run_dir) -> tuple[list, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Corpus plus raw and mean-normalized context vectors of the trained model."""
    corpus = _load_run_corpus(run_dir)
    params = hio.read_checkpoint(_stage_dir(run_dir, "train-huc") / "huc.hucp")
    raw, normalized = {}, {}
    for sig in corpus:
        _, c = enc.encode(params, sig)
        raw[sig.utterance_id] = c
        normalized[sig.utterance_id] = cl.mean_normalize(c)
    return corpus, raw, normalized


def _stage_reduce(config: PipelineConfig, run_dir) -> None:
    corpus, _, normalized = _huc_features(config, run_dir)
    labels = hio.read_labels(_stage_dir(run_dir, "label") / "labels.tsv")
    x = np.concatenate([normalized[sig.utterance_id] for sig in corpus], axis=0)
    y = np.concatenate([labels[sig.utterance_id] for sig in corpus])
    if len(np.unique(y)) < 2:
        raise RuntimeError("pseudo-labels collapsed to a single class; cannot rank features")
    forest = dr.train_gbdt(x, y, config.gbdt)
    ranking = dr.feature_importance(forest)
    stage_dir = _stage_dir(run_dir, "reduce")
    stage_dir.mkdir(parents=True, exist_ok=True)
    (stage_dir / "ranking.json").write_text(
        canonical_json({"ranking": ranking, "d": config.d}), encoding="utf-8"
    )
    (stage_dir / "forest.json").write_text(canonical_json(dr.forest_to_dict(forest)), encoding="utf-8")


def _eval_payload(config: PipelineConfig, name: str, value, breakdown: str | None = None) -> dict:
    payload = {
        "metric": name,
        "config_hash": config_hash(config),
        "seed": config.seed,
        "value": value,
    }
    if breakdown is not None:
        payload["breakdown"] = breakdown
    return payload


def _stage_eval_abx(config: PipelineConfig, run_dir) -> None:
    corpus, raw, normalized = _huc_features(config, run_dir)
    ranking = json.loads((_stage_dir(run_dir, "reduce") / "ranking.json").read_text(encoding="utf-8"))
    final = {u: dr.project_top_d(mat, ranking["ranking"], config.d) for u, mat in normalized.items()}
    stage_dir = _stage_dir(run_dir, "eval-abx")
    stage_dir.mkdir(parents=True, exist_ok=True)
    value = {}
    items = {}
    for mode in ("within", "across"):
        triplets = make_abx_triplets(
            corpus, mode, config.eval.abx_triplets, derive_seed(config.seed, "abx", mode)
        )
        report_final = ev.abx_score(triplets, final)
        report_raw = ev.abx_score(triplets, raw)
        value[mode] = {
            "error_rate": report_final.error_rate,
            "raw_error_rate": report_raw.error_rate,
            "triplet_count": report_final.triplet_count,
        }
        items[mode] = {"final": report_final.per_item, "raw": report_raw.per_item}
    (stage_dir / "abx_items.json").write_text(canonical_json(items), encoding="utf-8")
    (stage_dir / "abx.json").write_text(
        canonical_json(_eval_payload(config, "abx", value, "abx_items.json")), encoding="utf-8"
    )


def _stage_eval_ued(config: PipelineConfig, run_dir) -> None:
    corpus = _load_run_corpus(run_dir)
    params = hio.read_checkpoint(_stage_dir(run_dir, "train-huc") / "huc.hucp")
    book = hio.read_codebook(_stage_dir(run_dir, "cluster") / "codebook.hucc")
    report = ev.ued(corpus, params, book, config.eval.ued_transform, derive_seed(config.seed, "ued"))
    stage_dir = _stage_dir(run_dir, "eval-ued")
    stage_dir.mkdir(parents=True, exist_ok=True)
    (stage_dir / "ued_items.json").write_text(canonical_json(report.per_utterance), encoding="utf-8")
    (stage_dir / "ued.json").write_text(
        canonical_json(
            _eval_payload(
                config, "ued", {"transform": report.transform, "ued": report.ued}, "ued_items.json"
            )
        ),
        encoding="utf-8",
    )


def _stage_eval_probe(config: PipelineConfig, run_dir) -> None:
    corpus, raw, normalized = _huc_features(config, run_dir)
    x_raw = np.concatenate([raw[sig.utterance_id] for sig in corpus], axis=0)
    x_norm = np.concatenate([normalized[sig.utterance_id] for sig in corpus], axis=0)
    phonemes = np.concatenate([sig.frame_phones for sig in corpus])
    speakers = np.concatenate([sig.frame_speakers for sig in corpus])
    value = {}
    for rep_name, x in (("raw", x_raw), ("normalized", x_norm)):
        for label_name, y in (("phoneme", phonemes), ("speaker", speakers)):
            cfg = ev.ProbeConfig(
                seed=derive_seed(config.seed, "probe", rep_name, label_name),
                max_iters=config.eval.probe_max_iters,
                learning_rate=config.eval.probe_learning_rate,
                tol=config.eval.probe_tol,
            )
            value[f"{label_name}_{rep_name}"] = ev.linear_probe(x, y, cfg)
    stage_dir = _stage_dir(run_dir, "eval-probe")
    stage_dir.mkdir(parents=True, exist_ok=True)
    (stage_dir / "probe.json").write_text(
        canonical_json(_eval_payload(config, "probe", value)), encoding="utf-8"
    )


def _stage_eval_purity(config: PipelineConfig, run_dir) -> None:
    corpus, raw, normalized = _huc_features(config, run_dir)
    speakers = [sig.speaker_id for sig in corpus]
    value = {"num_clusters": config.corpus.num_speakers}
    for rep_name, feats in (("raw", raw), ("normalized", normalized)):
        means = np.stack([cl.utterance_mean(feats[sig.utterance_id]) for sig in corpus])
        book = cl.kmeans(
            means,
            config.corpus.num_speakers,
            max_iters=100,
            seed=derive_seed(config.seed, "purity", rep_name),
        )
        ids = cl.assign_labels(means, book)
        value[rep_name] = ev.cluster_purity(ids, speakers)
    stage_dir = _stage_dir(run_dir, "eval-purity")
    stage_dir.mkdir(parents=True, exist_ok=True)
    (stage_dir / "purity.json").write_text(
        canonical_json(_eval_payload(config, "purity", value)), encoding="utf-8"
    )


def _read_eval(run_dir, stage: str, filename: str):
    path = _stage_dir(run_dir, stage) / filename
    if not path.exists():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


def emit_report(run_dir) -> Path:
    """Aggregate evaluation artifacts into report.json and report.txt.

    Absent metric families are marked "missing".  The bootstrap family
    compares ABX(across) per-triplet errors of raw context features
    (model1) against mean-normalized top-D features (model2).
    """
    run_dir = Path(run_dir)
    config = build_config(json.loads((run_dir / "config.json").read_text(encoding="utf-8")))
    metrics: dict = {}

    abx = _read_eval(run_dir, "eval-abx", "abx.json")
    for mode in ("within", "across"):
        metrics[f"abx_{mode}"] = abx["value"][mode] if abx else "missing"

    purity = _read_eval(run_dir, "eval-purity", "purity.json")
    metrics["purity"] = purity["value"] if purity else "missing"

    probe = _read_eval(run_dir, "eval-probe", "probe.json")
    metrics["probe"] = probe["value"] if probe else "missing"

    ued = _read_eval(run_dir, "eval-ued", "ued.json")
    metrics["ued"] = ued["value"] if ued else "missing"

    items = _read_eval(run_dir, "eval-abx", "abx_items.json")
    if items:
        pairs = list(zip(items["across"]["raw"], items["across"]["final"]))
        boot = ev.bootstrap_ci(
            pairs, config.eval.bootstrap_resamples, derive_seed(config.seed, "bootstrap")
        )
        metrics["bootstrap"] = {
            "comparison": "abx_across per-triplet error: raw (model1) vs normalized+top-d (model2)",
            "ci1": list(boot.ci1),
            "ci2": list(boot.ci2),
            "poi": boot.poi,
            "resamples": config.eval.bootstrap_resamples,
        }
    else:
        metrics["bootstrap"] = "missing"

    report = {"config_hash": config_hash(config), "seed": config.seed, "metrics": metrics}
    stage_dir = run_dir / "report"
    stage_dir.mkdir(parents=True, exist_ok=True)
    (stage_dir / "report.json").write_text(canonical_json(report), encoding="utf-8")

    lines = [f"run report (seed {config.seed}, config {report['config_hash'][:12]})", ""]
    for name in ("abx_within", "abx_across", "purity", "probe", "ued", "bootstrap"):
        value = metrics[name]
        if value == "missing":
            lines.append(f"{name:<12} missing")
        elif isinstance(value, dict):
            parts = ", ".join(
                f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                for k, v in value.items()
                if not isinstance(v, (list, dict))
            )
            lines.append(f"{name:<12} {parts}")
    (stage_dir / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return stage_dir / "report.json"


def _stage_report(config: PipelineConfig, run_dir) -> None:
    emit_report(run_dir)


@dataclass(frozen=True)
class StageDef:
    fn: object
    deps: tuple[str, ...]
    optional_deps: tuple[str, ...] = ()


STAGES: dict[str, StageDef] = {
    "gen-corpus": StageDef(_stage_gen_corpus, ()),
    "pretrain-cpc": StageDef(_stage_pretrain_cpc, ("gen-corpus",)),
    "extract": StageDef(_stage_extract, ("gen-corpus", "pretrain-cpc")),
    "sample": StageDef(_stage_sample, ("extract",)),
    "cluster": StageDef(_stage_cluster, ("extract", "sample")),
    "label": StageDef(_stage_label, ("extract", "cluster")),
    "train-huc": StageDef(_stage_train_huc, ("gen-corpus", "label")),
    "reduce": StageDef(_stage_reduce, ("gen-corpus", "train-huc", "label")),
    "eval-abx": StageDef(_stage_eval_abx, ("gen-corpus", "train-huc", "reduce")),
    "eval-ued": StageDef(_stage_eval_ued, ("gen-corpus", "train-huc", "cluster")),
    "eval-probe": StageDef(_stage_eval_probe, ("gen-corpus", "train-huc")),
    "eval-purity": StageDef(_stage_eval_purity, ("gen-corpus", "train-huc")),
    "report": StageDef(
        _stage_report, (), ("eval-abx", "eval-ued", "eval-probe", "eval-purity")
    ),
}

STAGE_ORDER = list(STAGES)


@dataclass
class StageResult:
    stage: str
    status: str  # "ran" | "cached"


class _RunLock:
    def __init__(self, run_dir: Path):
        self.path = run_dir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunDirLockedError(
                f"{self.path} exists: another writer owns this run directory"
            ) from None
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass
        return False


def run_stage(config: PipelineConfig, stage: str, run_dir, force: bool = False) -> StageResult:
    """Execute one stage (or return early when its artifacts are current)."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {', '.join(STAGE_ORDER)}")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    spec = STAGES[stage]

    upstream = {}
    for dep in spec.deps:
        fp = stage_fingerprint(run_dir, dep)
        if fp is None:
            raise MissingDependencyError(f"missing dependency: {dep}")
        upstream[dep] = fp
    for dep in spec.optional_deps:
        fp = stage_fingerprint(run_dir, dep)
        if fp is not None:
            upstream[dep] = fp

    with _RunLock(run_dir):
        (run_dir / "config.json").write_text(
            canonical_json(config_to_dict(config)), encoding="utf-8"
        )
        cfg_hash = config_hash(config)
        if not force and _is_up_to_date(run_dir, stage, cfg_hash, upstream):
            return StageResult(stage=stage, status="cached")
        stage_dir = _stage_dir(run_dir, stage)
        stage_dir.mkdir(parents=True, exist_ok=True)
        spec.fn(config, run_dir)
        _write_stage_info(run_dir, stage, config, upstream)
    return StageResult(stage=stage, status="ran")


def run_all(config: PipelineConfig, run_dir, force: bool = False) -> list[StageResult]:
    return [run_stage(config, stage, run_dir, force=force) for stage in STAGE_ORDER]
