"""End-to-end experiment wiring: synthesis -> featurization -> train -> metrics.

Everything here is driven by one JSON run configuration (seed mandatory,
every other field defaulted, unknown keys rejected) so that a finished
artifact can embed the exact configuration that produced it and a re-run
reproduces it bit-identically.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np
import torch

from . import chaos01, metrics, net, signal
from .errors import ParameterError

DEFAULT_RUN_CONFIG: dict = {
    "seed": None,  # mandatory
    "dataset": {
        "subjects": 8,
        "duration_s": 60.0,
        "registry": "default",
    },
    "preprocess": {
        "mode": "band-0.5-8-norm",
    },
    "featurizer": {
        "c": chaos01.DEFAULT_C,  # scalar or one value per channel
        "image_size": None,  # null -> model input size
        "segments_per_subject": 150,
        "window_s": 12.0,  # preprocessing context; matches the enrollment window
    },
    "model": {
        "preset": "mini",
        "rng_seed": None,  # null -> top-level seed
    },
    "train": {
        "learning_rate": 3e-4,
        "epochs": 20,
        "batch_size": 5,
        "early_stop_patience": 10,
        "steps_per_epoch": 30,
        "val_pairs": 60,
    },
    "eval": {
        "split": "data-disjoint",
        "fractions": [0.6, 0.2, 0.2],
        "genuine_pairs": 150,
        "impostor_pairs": 150,
        "rank1_probes_per_subject": 3,
    },
    "store": {
        "dir": None,
        "created_at": 0,
        "threshold": None,
    },
}

_PRESETS = {
    "paper": net.paper_config,
    "mini": net.mini_config,
    "tiny": net.tiny_config,
}


def _merge_defaults(defaults: Mapping, given: Mapping, path: str) -> dict:
    out = {}
    for key, default in defaults.items():
        if key in given and isinstance(default, dict) and isinstance(given[key], Mapping):
            out[key] = _merge_defaults(default, given[key], f"{path}{key}.")
        elif key in given:
            out[key] = copy.deepcopy(given[key])
        else:
            out[key] = copy.deepcopy(default)
    unknown = set(given) - set(defaults)
    if unknown:
        raise ParameterError(f"unknown run-config keys: {sorted(path + k for k in unknown)}")
    return out


def load_run_config(source: Union[str, Path, Mapping]) -> dict:
    """Validate and default-fill a run configuration; seed is mandatory."""
    if isinstance(source, (str, Path)):
        given = json.loads(Path(source).read_text())
    else:
        given = dict(source)
    cfg = _merge_defaults(DEFAULT_RUN_CONFIG, given, "")
    if cfg["seed"] is None or not isinstance(cfg["seed"], int):
        raise ParameterError("run config must set an integer 'seed'")
    signal.PreprocessMode.from_string(cfg["preprocess"]["mode"])
    if cfg["model"]["preset"] not in _PRESETS:
        raise ParameterError(
            f"unknown model preset {cfg['model']['preset']!r}; expected one of {sorted(_PRESETS)}"
        )
    return cfg


def model_config_from_run(cfg: Mapping) -> net.ModelConfig:
    seed = cfg["model"]["rng_seed"]
    if seed is None:
        seed = cfg["seed"]
    return _PRESETS[cfg["model"]["preset"]](rng_seed=seed)


def channel_params(cfg: Mapping) -> list[chaos01.PqParams]:
    c = cfg["featurizer"]["c"]
    values = [c] * 3 if np.isscalar(c) else list(c)
    if len(values) != 3:
        raise ParameterError(f"featurizer.c must be a scalar or 3 values, got {c!r}")
    return [chaos01.PqParams(c=float(v)) for v in values]


def synth_records(cfg: Mapping) -> list[signal.PpgRecord]:
    """The deterministic synthetic registry for this run."""
    n = cfg["dataset"]["subjects"]
    if cfg["dataset"]["registry"] != "default":
        raise ParameterError(f"unknown registry {cfg['dataset']['registry']!r}")
    profiles = signal.default_registry(n)
    records = []
    for i, profile in enumerate(profiles):
        rec = signal.synth_ppg(profile, cfg["dataset"]["duration_s"], seed=cfg["seed"] + i)
        records.append(replace(rec, subject_id=f"s{i:02d}"))
    return records


def featurize_bank(
    records: Sequence[signal.PpgRecord],
    mode: signal.PreprocessMode,
    params: Sequence[chaos01.PqParams],
    image_size: int,
    segments_per_subject: int,
    seed: int,
    window_s: float | None = 12.0,
) -> dict[str, np.ndarray]:
    """Per-subject per-channel rasters of randomly drawn segments.

    The record is cut into `window_s` windows that are preprocessed
    independently, so training segments see the same conditioning context
    (filter edges, normalization extent) as the 12 s enrollment and probe
    records; segments are then drawn within windows.  `window_s=None`
    preprocesses the whole record at once.

    Output maps subject id to a (n_segments, 3, H, W) uint8 array where axis
    1 is the channel whose rotation parameter was applied.
    """
    bank: dict[str, np.ndarray] = {}
    for rec_index, record in enumerate(records):
        if window_s is None:
            windows = [record.samples]
        else:
            wlen = int(round(window_s * record.sample_rate_hz))
            if wlen < signal.SEGMENT_LEN:
                raise ParameterError(f"window_s {window_s} is shorter than one segment")
            n_win = record.samples.size // wlen
            if n_win < 1:
                raise ParameterError(
                    f"record of {record.samples.size} samples is shorter than one {window_s} s window"
                )
            windows = [record.samples[k * wlen : (k + 1) * wlen] for k in range(n_win)]
        per_window = -(-segments_per_subject // len(windows))
        segs: list[signal.Segment] = []
        for w_index, chunk in enumerate(windows):
            conditioned = signal.preprocess(
                signal.PpgRecord(record.subject_id, record.sample_rate_hz, chunk), mode
            )
            count = min(per_window, segments_per_subject - len(segs))
            if count <= 0:
                break
            segs.extend(
                signal.segment(
                    conditioned,
                    signal.RandomStarts(count=count, seed=seed + 131 * rec_index + w_index),
                )
            )
        per_seg = np.empty((len(segs), 3, image_size, image_size), dtype=np.uint8)
        for si, seg in enumerate(segs):
            trajs = {}
            for ch, prm in enumerate(params):
                key = (prm.c, prm.alpha)
                if key not in trajs:
                    trajs[key] = chaos01.rasterize(
                        chaos01.translation_vars(seg.samples, prm), image_size
                    )
                per_seg[si, ch] = trajs[key]
        bank[record.subject_id] = per_seg
    return bank


def sample_scoreset(
    model: net.SiameseModel,
    bank: net.Bank,
    n_genuine: int,
    n_impostor: int,
    seed: int,
    batch_size: int = 25,
) -> metrics.ScoreSet:
    """Score seeded random genuine and impostor pairs drawn from a bank."""
    ids = sorted(bank)
    if len(ids) < 2:
        raise ParameterError("need at least 2 subjects to build impostor pairs")
    rng = np.random.default_rng(seed)
    jobs: list[tuple[str, str, bool]] = []
    for _ in range(n_genuine):
        sid = ids[rng.integers(0, len(ids))]
        jobs.append((sid, sid, True))
    for _ in range(n_impostor):
        ia, ib = rng.choice(len(ids), size=2, replace=False)
        jobs.append((ids[ia], ids[ib], False))

    genuine: list[float] = []
    impostor: list[float] = []
    model.eval()
    with torch.no_grad():
        for at in range(0, len(jobs), batch_size):
            chunk = jobs[at : at + batch_size]
            xa = np.stack([net._draw_image(bank, a, rng) for a, _, _ in chunk]).astype(np.float32)
            xb = np.stack([net._draw_image(bank, b, rng) for _, b, _ in chunk]).astype(np.float32)
            pred = model(torch.from_numpy(xa), torch.from_numpy(xb))
            for (_, _, positive), value in zip(chunk, pred.tolist()):
                (genuine if positive else impostor).append(value)
    return metrics.ScoreSet(genuine=np.array(genuine), impostor=np.array(impostor))


def _image_from_bank(bank: net.Bank, sid: str, seg_indices: Sequence[int]) -> np.ndarray:
    return np.stack([bank[sid][seg_indices[ch], ch] for ch in range(3)])


def rank1_from_bank(model: net.SiameseModel, bank: net.Bank, probes_per_subject: int) -> float | None:
    """Rank-1 accuracy with per-subject gallery images built from the bank.

    The first three segments of each subject form its gallery template;
    subsequent disjoint triples form probes.  None when the bank is too
    small for a meaningful gallery/probe split.
    """
    ids = sorted(bank)
    need = 3 + 3 * probes_per_subject
    if len(ids) < 2 or any(bank[sid].shape[0] < need for sid in ids):
        return None
    gallery = {sid: _image_from_bank(bank, sid, [0, 1, 2]) for sid in ids}
    probes = []
    for sid in ids:
        for k in range(probes_per_subject):
            lo = 3 + 3 * k
            probes.append((sid, _image_from_bank(bank, sid, [lo, lo + 1, lo + 2])))
    return metrics.rank1(gallery, probes, lambda a, b: net.score(model, _chw_to_hwc(a), _chw_to_hwc(b)))


def _chw_to_hwc(image: np.ndarray) -> np.ndarray:
    return np.transpose(image, (1, 2, 0))


@dataclass
class ExperimentResult:
    run_config: dict
    model: net.SiameseModel
    history: list[dict]
    best_epoch: int
    report: metrics.MetricsReport
    roc_curve: metrics.RocCurve
    prf_curve: metrics.PrfCurve
    score_set: metrics.ScoreSet
    eer_threshold: float


def run_experiment(cfg: Mapping, log=None) -> ExperimentResult:
    """Train on the configured synthetic registry and evaluate on held-out data.

    The split is user-disjoint or data-disjoint per the eval section; early
    stopping monitors the validation part; the report and the stored EER
    threshold come from the untouched test part.
    """
    cfg = load_run_config(cfg)
    mode = signal.PreprocessMode.from_string(cfg["preprocess"]["mode"])
    params = channel_params(cfg)
    model_config = model_config_from_run(cfg)
    image_size = cfg["featurizer"]["image_size"] or model_config.input_hw
    if image_size != model_config.input_hw:
        raise ParameterError(
            f"featurizer.image_size {image_size} must match model input {model_config.input_hw}"
        )

    records = synth_records(cfg)
    bank = featurize_bank(
        records, mode, params, image_size, cfg["featurizer"]["segments_per_subject"],
        cfg["seed"], window_s=cfg["featurizer"]["window_s"],
    )

    split_mode = net.SplitMode.from_string(cfg["eval"]["split"])
    fractions = cfg["eval"]["fractions"]
    parts = net.split_data(
        {sid: arr.shape[0] for sid, arr in bank.items()}, split_mode, fractions, cfg["seed"]
    )
    if len(parts) == 2:
        train_part, test_part = parts
        val_part = test_part  # two-way split: validation doubles as held-out
    else:
        train_part, val_part, test_part = parts[0], parts[1], parts[-1]
    train_bank = net.select_bank(bank, train_part)
    val_bank = net.select_bank(bank, val_part)
    test_bank = net.select_bank(bank, test_part)

    model = net.build_model(model_config)
    tcfg = net.TrainConfig(
        learning_rate=cfg["train"]["learning_rate"],
        epochs=cfg["train"]["epochs"],
        batch_size=cfg["train"]["batch_size"],
        early_stop_patience=cfg["train"]["early_stop_patience"],
        steps_per_epoch=cfg["train"]["steps_per_epoch"],
        val_pairs=cfg["train"]["val_pairs"],
        seed=cfg["seed"],
    )
    result = net.train(model, train_bank, val_bank, tcfg, log=log)

    score_set = sample_scoreset(
        result.model,
        test_bank,
        cfg["eval"]["genuine_pairs"],
        cfg["eval"]["impostor_pairs"],
        seed=cfg["seed"] + 104729,
    )
    rank1_value = rank1_from_bank(result.model, test_bank, cfg["eval"]["rank1_probes_per_subject"])
    report = metrics.report_from_scores(score_set, rank1=rank1_value, run_config=cfg)
    return ExperimentResult(
        run_config=cfg,
        model=result.model,
        history=result.history,
        best_epoch=result.best_epoch,
        report=report,
        roc_curve=metrics.roc(score_set),
        prf_curve=metrics.precision_recall_f1(score_set),
        score_set=score_set,
        eer_threshold=report.eer_threshold,
    )


def merge_parts(parts: Sequence[Mapping[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Union of several split parts (disjoint by construction)."""
    merged: dict[str, np.ndarray] = {}
    for part in parts:
        for sid, idx in part.items():
            if sid in merged:
                merged[sid] = np.sort(np.concatenate([merged[sid], idx]))
            else:
                merged[sid] = np.asarray(idx)
    return merged


def evaluate_model(model: net.SiameseModel, cfg: Mapping, split: str | None = None):
    """Re-derive the dataset from the run config and score the held-out 40%.

    Everything outside the training part (validation plus test) forms the
    held-out pool, matching the 60/40 experimental splits.
    """
    cfg = load_run_config(cfg)
    if split is not None:
        cfg["eval"]["split"] = split
    mode = signal.PreprocessMode.from_string(cfg["preprocess"]["mode"])
    params = channel_params(cfg)
    image_size = cfg["featurizer"]["image_size"] or model.config.input_hw
    records = synth_records(cfg)
    bank = featurize_bank(
        records, mode, params, image_size, cfg["featurizer"]["segments_per_subject"],
        cfg["seed"], window_s=cfg["featurizer"]["window_s"],
    )
    split_mode = net.SplitMode.from_string(cfg["eval"]["split"])
    parts = net.split_data(
        {sid: arr.shape[0] for sid, arr in bank.items()}, split_mode, cfg["eval"]["fractions"], cfg["seed"]
    )
    test_bank = net.select_bank(bank, merge_parts(parts[1:]))
    score_set = sample_scoreset(
        model, test_bank, cfg["eval"]["genuine_pairs"], cfg["eval"]["impostor_pairs"],
        seed=cfg["seed"] + 104729,
    )
    rank1_value = rank1_from_bank(model, test_bank, cfg["eval"]["rank1_probes_per_subject"])
    report = metrics.report_from_scores(score_set, rank1=rank1_value, run_config=cfg)
    return report, metrics.roc(score_set), metrics.precision_recall_f1(score_set), score_set
