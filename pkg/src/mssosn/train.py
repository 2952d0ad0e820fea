"""Episodic training, evaluation, metrics CSV and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import CONFIG_RECORD, decode_text, encode_text, read_records, write_records
from .config import TrainConfig, parse_config
from .data import Dataset, pyramid, sample_episode, split_dataset
from .errors import ContractError, NumericError
from .model import MsSoSN, accuracy
from .optim import AdamState, adam_step
from .rng import SplitMix64

log = logging.getLogger(__name__)

METRICS_HEADER = ["episode", "L_total", "L_rel", "L_sd", "L_dd", "Omega", "accuracy"]


@dataclass
class Streams:
    """Fixed-order splits of the master seed."""

    init: SplitMix64
    train: SplitMix64
    eval: SplitMix64
    val: SplitMix64
    probe: SplitMix64

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        master = SplitMix64(seed)
        return cls(*(master.split() for _ in range(5)))


@dataclass
class TrainResult:
    model: MsSoSN
    state: AdamState
    metrics_path: Path
    checkpoint_path: Path
    rows: list[dict]


def run_id(cfg: TrainConfig) -> str:
    return hashlib.sha1(cfg.to_text().encode()).hexdigest()[:10]


def _dtype(cfg: TrainConfig):
    return np.float32 if cfg.dtype == "float32" else np.float64


def _fmt(x: float) -> str:
    return repr(float(x))


def train(cfg: TrainConfig, dataset: Dataset, out_dir, episodes: int | None = None) -> TrainResult:
    """Run ``cfg.episodes`` Adam steps, one per sampled training episode."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = split_dataset(dataset, cfg.split)
    streams = Streams.from_seed(cfg.seed)
    channels = next(iter(dataset.classes.values()))[0].shape[0]
    dtype = _dtype(cfg)
    with ad.precision(dtype):
        model = MsSoSN(cfg, channels, streams.init)
        model.cast(dtype)
    params = model.params()
    state = AdamState(cfg.lr, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps)
    rid = run_id(cfg)
    metrics_path = out_dir / f"metrics_seed{cfg.seed}_{rid}.csv"
    ckpt_path = out_dir / f"checkpoint_seed{cfg.seed}_{rid}.msrn"
    total = cfg.episodes if episodes is None else episodes
    rows = []
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for e in range(1, total + 1):
            ep = sample_episode(splits["train"], streams.train, cfg.way, cfg.shot, cfg.query, cfg.scales)
            try:
                with ad.precision(dtype):
                    out = model.episode(ep)
                    grads = ad.backward(out.total, list(params.values()))
            except NumericError as exc:
                raise NumericError(f"episode {e}: {exc}") from exc
            comps = out.components()
            if not all(math.isfinite(v) for v in comps.values()):
                raise NumericError(f"episode {e}: non-finite loss components {comps}")
            adam_step(params, dict(zip(params, grads)), state)
            row = {"episode": e, **comps, "accuracy": accuracy(model.class_scores(out), ep.query_labels)}
            rows.append(row)
            writer.writerow([e] + [_fmt(row[k]) for k in METRICS_HEADER[1:]])
            if cfg.log_interval and e % cfg.log_interval == 0:
                recent = rows[-cfg.log_interval:]
                log.info("episode %d  L_total %.4f  train acc %.3f", e,
                         np.mean([r["L_total"] for r in recent]), np.mean([r["accuracy"] for r in recent]))
            if cfg.checkpoint_interval and e % cfg.checkpoint_interval == 0 and e < total:
                save_checkpoint(ckpt_path, model, state, e)
    save_checkpoint(ckpt_path, model, state, total)
    if cfg.val_episodes and len(splits["val"]) >= cfg.way:
        mean, half = evaluate(model, splits["val"], cfg.val_episodes, streams.val, cfg.eval_query)
        log.info("val accuracy %.2f +- %.2f", mean, half)
    return TrainResult(model, state, metrics_path, ckpt_path, rows)


# checkpoints ---------------------------------------------------------------


def save_checkpoint(path, model: MsSoSN, state: AdamState, episode: int) -> None:
    records = {CONFIG_RECORD: encode_text(model.cfg.to_text())}
    for name, p in model.params().items():
        records[name] = p.data
    for name in state.m:
        records[f"adam.m.{name}"] = state.m[name]
        records[f"adam.v.{name}"] = state.v[name]
    records["adam.t"] = np.array(float(state.t))
    records["episode"] = np.array(float(episode))
    write_records(path, records)


def load_checkpoint(path) -> tuple[MsSoSN, AdamState, int]:
    records = read_records(path)
    if CONFIG_RECORD not in records:
        raise ContractError(f"{path}: checkpoint carries no config snapshot")
    cfg = parse_config(decode_text(records[CONFIG_RECORD]))
    channels = records["encoder.conv1.weight"].shape[1]
    dtype = _dtype(cfg)
    with ad.precision(dtype):
        model = MsSoSN(cfg, channels, SplitMix64(0))
    try:
        model.load_arrays(records)
    except (KeyError, ValueError) as exc:
        raise ContractError(f"{path}: checkpoint does not match its config ({exc})") from None
    state = AdamState(cfg.lr, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps, t=int(records.get("adam.t", 0)))
    for name in model.params():
        if f"adam.m.{name}" in records:
            state.m[name] = records[f"adam.m.{name}"].astype(dtype)
            state.v[name] = records[f"adam.v.{name}"].astype(dtype)
    return model, state, int(records.get("episode", 0))


# evaluation ----------------------------------------------------------------


def confidence(accs) -> tuple[float, float]:
    """Mean accuracy and 1.96 * population std / sqrt(n), both in percent."""
    accs = np.asarray(accs, dtype=np.float64)
    return 100.0 * float(accs.mean()), 100.0 * 1.96 * float(accs.std()) / math.sqrt(len(accs))


def _threads() -> int:
    try:
        return max(0, int(os.environ.get("MSRN_THREADS", "0")))
    except ValueError:
        return 0


def episode_accuracy(model: MsSoSN, ep) -> float:
    with ad.no_grad(), ad.precision(_dtype(model.cfg)):
        out = model.episode(ep, with_heads=False)
    return accuracy(model.class_scores(out), ep.query_labels)


def evaluate(model: MsSoSN, dataset: Dataset, episodes: int, rng: SplitMix64,
             query: int | None = None, return_all: bool = False):
    """Mean accuracy +- 95% half-width (percent) over freshly sampled episodes.

    Episodes are drawn in a fixed order from child streams of ``rng``; with
    ``MSRN_THREADS > 0`` they are scored in worker threads, and the
    reduction order is unchanged.
    """
    cfg = model.cfg
    query = query or cfg.eval_query
    streams = [rng.split() for _ in range(episodes)]

    def run(i: int) -> float:
        ep = sample_episode(dataset, streams[i], cfg.way, cfg.shot, query, cfg.scales)
        return episode_accuracy(model, ep)

    threads = _threads()
    if threads:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accs = list(pool.map(run, range(episodes)))
    else:
        accs = [run(i) for i in range(episodes)]
    mean, half = confidence(accs)
    return (mean, half, accs) if return_all else (mean, half)


def eval_checkpoint(path, dataset: Dataset, episodes: int | None = None):
    model, _, _ = load_checkpoint(path)
    cfg = model.cfg
    test = split_dataset(dataset, cfg.split)["test"]
    return evaluate(model, test, episodes or cfg.eval_episodes, Streams.from_seed(cfg.seed).eval)


def sd_accuracy(model: MsSoSN, dataset: Dataset, n_features: int, rng: SplitMix64) -> float:
    """Top-1 scale accuracy of the scale discriminator on features of ``dataset`` images."""
    cfg = model.cfg
    items = [(n, i) for n in dataset.names for i in range(len(dataset.classes[n]))]
    order = rng.sample(len(items), len(items))
    per_image = cfg.num_scales
    need = -(-n_features // per_image)
    if need > len(items):
        raise ContractError(f"{len(items)} images give fewer than {n_features} features")
    correct = total = 0
    with ad.no_grad(), ad.precision(_dtype(cfg)):
        for start in range(0, need, 32):
            chunk = [items[j] for j in order[start:min(need, start + 32)]]
            imgs = [pyramid(dataset.classes[n][i], cfg.scales) for n, i in chunk]
            psi = model.features([np.stack([im[s] for im in imgs]) for s in range(per_image)])
            for s, p in enumerate(psi, start=1):
                pred = np.argmax(model.sd(ad.vectorize(p, keep=1)).data, axis=1) + 1
                take = min(len(pred), n_features - total)
                correct += int(np.sum(pred[:take] == s))
                total += take
    return correct / total
