"""Episodic evaluation, baselines, confidence intervals, analysis report."""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .coordinator import coordinate, full_blend_weights, select_worker
from .encoder import adapt_worker_to_batch, encode
from .errors import ValidationError
from .metric import classify_query, compute_prototypes
from .normalization import blend_workers, bn_apply, compute_batch_stats
from .rng import make_rng, seed_key
from .tensor import Tensor

MODES = ("tano-hard", "tano-blend", "common", "multi", "adabn")


@dataclass
class EvalReport:
    protocol: str
    mode: str
    split: str
    episode_count: int
    mean_accuracy: float              # percent
    ci_half_width: float
    per_domain: dict                  # domain_id -> {"acc", "ci", "episodes"}
    coordinator_accuracy: float | None
    config_hash: str = ""

    def to_dict(self):
        return {
            "protocol": self.protocol, "mode": self.mode, "split": self.split,
            "episode_count": self.episode_count,
            "mean_accuracy": self.mean_accuracy,
            "ci_half_width": self.ci_half_width,
            "per_domain": {str(k): v for k, v in sorted(self.per_domain.items())},
            "coordinator_accuracy": self.coordinator_accuracy,
            "config_hash": self.config_hash,
        }


def confidence_interval(accs):
    """Mean and 95% half-width (1.96 * s / sqrt(n), sample std)."""
    a = np.asarray(accs, dtype=np.float64)
    if a.size < 2:
        raise ValidationError(f"need >= 2 samples for a CI, got {a.size}")
    return float(a.mean()), float(1.96 * a.std(ddof=1) / np.sqrt(a.size))


def _embed(images, state, worker):
    return encode(Tensor(np.asarray(images, dtype=np.float64)),
                  state.encoder, worker, mode="eval").data


def _protonet_accuracy(episode, state, worker):
    sup = _embed(episode.support_images, state, worker)
    qry = _embed(episode.query_images, state, worker)
    protos = compute_prototypes(sup, episode.support_labels,
                                episode.n_way, episode.n_shot)
    logits = classify_query(Tensor(qry), protos)
    return float((logits.data.argmax(axis=1) == episode.query_labels).mean())


def _episode_forward(episode, state, mode, blend_exact_var=False):
    """One evaluated episode: accuracy plus the coordinator's pick (if any)."""
    bank = state.bank
    if mode == "common":
        return _protonet_accuracy(episode, state, bank.global_worker), None
    if mode == "adabn":
        pool = np.concatenate([episode.support_images, episode.query_images])
        adapted = adapt_worker_to_batch(state.encoder, bank.global_worker, pool)
        return _protonet_accuracy(episode, state, adapted), None
    if mode in ("tano-hard", "tano-blend"):
        sup_g = _embed(episode.support_images, state, bank.global_worker)
        dw = coordinate(Tensor(sup_g), state.coordinator)
        if bank.num_domains == 1:
            worker = bank.workers[0]
            pred = 0
        elif mode == "tano-hard":
            sel = select_worker(dw, k=1, mode="hard")
            worker = bank.workers[sel.index]
            pred = sel.index
        else:
            sel = select_worker(dw, k=bank.num_domains, mode="blend")
            worker = blend_workers(bank, full_blend_weights(sel, bank.num_domains),
                                   exact_variance=blend_exact_var)
            pred = int(np.argmax(dw.w_hat))
        return _protonet_accuracy(episode, state, worker), pred
    raise ValidationError(f"unknown evaluation mode {mode!r}")


def _best_permutation_accuracy(preds, true_idx, num_workers, num_domains):
    """Coordinator accuracy under the optimal worker -> domain matching."""
    best = 0.0
    preds = np.asarray(preds)
    true_idx = np.asarray(true_idx)
    size = max(num_workers, num_domains)
    for perm in itertools.permutations(range(size)):
        mapped = np.array([perm[p] for p in preds])
        best = max(best, float((mapped == true_idx).mean()))
    return best


def evaluate_episodes(state, dataset, protocol, mode, n_episodes, seed,
                      split=D.SPLIT_NOVEL, n_way=5, n_shot=1, n_query=15,
                      domains=None, multi_states=None, blend_exact_var=False,
                      config_hash=""):
    """Accuracy over freshly sampled episodes; deterministic given seed.

    Model state is read-only here: eval-mode forwards never touch running
    statistics, and AdaBN adapts a per-episode copy.
    """
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "multi" and not multi_states:
        raise ValidationError("multi mode needs per-domain model states")
    candidates = sorted(domains) if domains is not None else sorted(dataset.domain_ids)
    missing = set(candidates) - set(dataset.domain_ids)
    if missing:
        raise ValidationError(f"domains not in dataset: {sorted(missing)}")
    per_domain_accs = {d: [] for d in candidates}
    accs, preds, trues = [], [], []
    for i in range(n_episodes):
        rng = make_rng(seed, "eval", i)
        ep = D.sample_episode(dataset, split, protocol, n_way, n_shot,
                              n_query, rng, domains=candidates)
        if mode == "multi":
            mstate = multi_states[ep.domain_id]
            acc, pred = _episode_forward(ep, mstate, "common")
        else:
            acc, pred = _episode_forward(ep, state, mode,
                                         blend_exact_var=blend_exact_var)
        accs.append(acc)
        per_domain_accs[ep.domain_id].append(acc)
        if pred is not None:
            preds.append(pred)
            trues.append(ep.domain_id)
    mean, half = confidence_interval(accs)
    per_domain = {}
    for d, vals in per_domain_accs.items():
        if len(vals) >= 2:
            m, h = confidence_interval(vals)
        else:
            m, h = (float(np.mean(vals)) if vals else float("nan")), float("nan")
        per_domain[d] = {"acc": 100 * m, "ci": 100 * h, "episodes": len(vals)}
    coord_acc = None
    if preds and state is not None:
        true_idx = []
        mapping = {d: i for i, d in enumerate(sorted(set(state.domain_ids)))}
        usable = [(p, mapping[t]) for p, t in zip(preds, trues) if t in mapping]
        if usable:
            p_arr, t_arr = zip(*usable)
            coord_acc = 100 * _best_permutation_accuracy(
                p_arr, t_arr, state.bank.num_domains, len(mapping))
    return EvalReport(protocol=protocol, mode=mode, split=split,
                      episode_count=n_episodes,
                      mean_accuracy=100 * mean, ci_half_width=100 * half,
                      per_domain=per_domain, coordinator_accuracy=coord_acc,
                      config_hash=config_hash)


# ---------------------------------------------------------------------------
# experiment orchestration

def _config_hash(config):
    from dataclasses import asdict
    blob = json.dumps(asdict(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def report_hash(reports):
    blob = json.dumps([r.to_dict() for r in reports], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def train_pipeline(dataset, config, out_dir=None):
    """generate-free pipeline: pretrain -> pseudo-label -> meta-train."""
    from .training import meta_train_loop, pretrain_backbone, seen_domains_for

    seen = seen_domains_for(config, dataset)
    train_ds = dataset.restricted_to(seen)
    weights, bank, _ = pretrain_backbone(
        train_ds, config.pretrain_epochs, config.pretrain_lr, config.seed,
        batch_size=config.pretrain_batch, num_workers=config.num_workers,
        momentum=config.bn_momentum, epsilon=config.epsilon)
    # meta_train_loop re-derives the seen domains itself and samples only
    # from them; it must see the full dataset or the out-of-domain
    # protocol's holdout check cannot tell "held out" from "missing"
    state, history, best = meta_train_loop(dataset, config,
                                           init=(weights, bank),
                                           out_dir=out_dir)
    return state, history, best


def train_single_domain_model(dataset, domain_id, config, tag="single"):
    """Oracle per-domain baseline: R=1 standard-protocol run on one domain."""
    from dataclasses import replace

    single = replace(config, num_workers=1, protocol="standard",
                     holdout_domain=None, pseudo_labels=False,
                     v_weights=[1.0],
                     seed=config.seed)
    ds = dataset.restricted_to([domain_id])
    state, _, _ = train_pipeline(ds, single)
    return state


def run_experiment(dataset, config, modes=("tano-hard", "common"),
                   eval_episodes=300, out_dir=None, cross_domain_matrix=None):
    """Train once, evaluate every requested mode, emit JSON + text table.

    For the out-of-domain protocol, meta-training sees all domains except
    the holdout and evaluation runs only on the holdout. When "multi" is
    among the modes, per-domain models are trained and (optionally) the
    full train-domain x test-domain accuracy matrix is computed.
    """
    from .training import seen_domains_for

    seen = seen_domains_for(config, dataset)
    eval_domains = ([config.holdout_domain] if config.protocol == "out" else seen)
    chash = _config_hash(config)
    state, history, best = train_pipeline(
        dataset, config, out_dir=Path(out_dir) / "ckpt" if out_dir else None)

    multi_states = None
    if "multi" in modes or cross_domain_matrix:
        multi_states = {d: train_single_domain_model(dataset, d, config)
                        for d in seen}

    reports = []
    for mode in modes:
        reports.append(evaluate_episodes(
            state, dataset, config.protocol, mode, eval_episodes,
            seed_key(config.seed, "final-eval"), split=D.SPLIT_NOVEL,
            n_way=config.n_way, n_shot=config.n_shot, n_query=config.n_query,
            domains=eval_domains, multi_states=multi_states,
            config_hash=chash))

    matrix = None
    if cross_domain_matrix and multi_states is not None:
        matrix = {}
        for train_d, mstate in multi_states.items():
            row = {}
            for test_d in sorted(dataset.domain_ids):
                rep = evaluate_episodes(
                    mstate, dataset, "standard", "common", eval_episodes,
                    seed_key(config.seed, "matrix", train_d, test_d),
                    split=D.SPLIT_NOVEL, n_way=config.n_way,
                    n_shot=config.n_shot, n_query=config.n_query,
                    domains=[test_d])
                row[test_d] = rep.mean_accuracy
            matrix[train_d] = row

    result = {
        "config_hash": chash,
        "protocol": config.protocol,
        "best_epoch": best["epoch"],
        "val_accuracy": best["val_acc"],
        "reports": [r.to_dict() for r in reports],
        "cross_domain_matrix": (
            {str(k): {str(kk): vv for kk, vv in v.items()}
             for k, v in matrix.items()} if matrix else None),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(
            json.dumps(result, indent=2, sort_keys=True), encoding="utf-8")
        (out / "report.txt").write_text(format_report_table(reports, matrix),
                                        encoding="utf-8")
    return state, reports, matrix, result


def format_report_table(reports, matrix=None):
    """Fixed-order aligned text table (stable for diffing)."""
    lines = []
    domains = sorted({d for r in reports for d in r.per_domain})
    header = ["mode".ljust(12)] + [f"D{d}".rjust(8) for d in domains] \
        + ["mean".rjust(8), "ci95".rjust(7), "coord".rjust(7)]
    lines.append(" ".join(header))
    order = {m: i for i, m in enumerate(MODES)}
    for r in sorted(reports, key=lambda r: order.get(r.mode, 99)):
        row = [r.mode.ljust(12)]
        for d in domains:
            cell = r.per_domain.get(d)
            row.append(f"{cell['acc']:8.2f}" if cell else " " * 8)
        row.append(f"{r.mean_accuracy:8.2f}")
        row.append(f"{r.ci_half_width:7.2f}")
        row.append(f"{r.coordinator_accuracy:7.2f}"
                   if r.coordinator_accuracy is not None else "      -")
        lines.append(" ".join(row))
    if matrix:
        lines.append("")
        lines.append("cross-domain accuracy (rows: train domain, cols: test domain)")
        cols = sorted(next(iter(matrix.values())).keys())
        lines.append("train".ljust(8) + " ".join(f"D{c}".rjust(8) for c in cols))
        for train_d in sorted(matrix):
            lines.append(f"D{train_d}".ljust(8) + " ".join(
                f"{matrix[train_d][c]:8.2f}" for c in cols))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# normalization-geometry analysis

def _layer_inputs(images, state, worker):
    """Pre-normalization features reaching each BN layer (eval mode)."""
    from . import tensor as T

    x = Tensor(np.asarray(images, dtype=np.float64))
    feats = []
    for j in range(len(worker.layers)):
        x = T.conv2d(x, state.encoder.kernels[j], stride=1, padding=1)
        x = x + T.reshape(state.encoder.biases[j], (1, -1, 1, 1))
        feats.append(x.data.copy())
        x = T.max_pool2(T.relu(bn_apply(x, worker.layers[j], mode="eval")))
    return feats


def sphere_residuals_for_batch(features, layer):
    """Relative sphere residual per channel for one pre-BN feature batch."""
    from .normalization import sphere_residual

    stats = compute_batch_stats(features)
    n, c, h, w = features.shape
    m = n * h * w
    out = []
    for ch in range(c):
        z = features[:, ch, :, :].reshape(-1)
        mu, var = stats.mean[ch], stats.var[ch]
        sigma = np.sqrt(var + layer.epsilon)
        gamma = float(layer.gamma.data[ch])
        beta = float(layer.beta.data[ch])
        z_hat = gamma * (z - mu) / sigma + beta
        res = sphere_residual(z_hat, gamma, beta, var, layer.epsilon)
        out.append(res / m)
    return np.asarray(out)


def emit_analysis_report(state, dataset, seed=0, episodes=50, n_way=5,
                         n_shot=1, n_query=15, out_path=None):
    """Executable form of the normalization-geometry claims.

    Reports per-layer/per-worker sphere residuals, the cross-domain gap
    of post-normalization channel means under the global vs the matched
    worker, and episode accuracy with deliberately mismatched running
    statistics.
    """
    domains = sorted(state.domain_ids)
    # sphere residuals on matched data
    residuals = {}
    pools = {}
    for d in domains:
        rng = make_rng(seed, "analysis", d)
        ep = D.sample_episode(dataset, D.SPLIT_NOVEL, "intra", n_way, n_shot,
                              n_query, rng, domains=[d])
        pools[d] = np.concatenate([ep.support_images, ep.query_images])
    for d in domains:
        worker = state.worker_for_domain(d)
        feats = _layer_inputs(pools[d], state, worker)
        residuals[d] = [float(sphere_residuals_for_batch(f, worker.layers[j]).max())
                        for j, f in enumerate(feats)]

    # post-normalization channel-mean gaps: matched vs global worker
    def post_norm_means(images, worker):
        from . import tensor as T

        x = Tensor(np.asarray(images, dtype=np.float64))
        means = []
        for j in range(len(worker.layers)):
            x = T.conv2d(x, state.encoder.kernels[j], stride=1, padding=1)
            x = x + T.reshape(state.encoder.biases[j], (1, -1, 1, 1))
            z = bn_apply(x, worker.layers[j], mode="eval")
            means.append(z.data.mean(axis=(0, 2, 3)))
            x = T.max_pool2(T.relu(z))
        return means

    num_layers = len(state.bank.workers[0].layers)
    gaps = {"global": [], "matched": []}
    for j in range(num_layers):
        by_global = [post_norm_means(pools[d], state.bank.global_worker)[j]
                     for d in domains]
        by_matched = [post_norm_means(pools[d], state.worker_for_domain(d))[j]
                      for d in domains]

        def spread(rows):
            stacked = np.stack(rows)
            return float(np.mean(stacked.max(axis=0) - stacked.min(axis=0)))

        gaps["global"].append(spread(by_global))
        gaps["matched"].append(spread(by_matched))

    # accuracy with mismatched running statistics
    mismatch = {}
    for target in domains:
        accs_matched, accs_swapped = [], []
        for i in range(episodes):
            rng = make_rng(seed, "mismatch", target, i)
            ep = D.sample_episode(dataset, D.SPLIT_NOVEL, "intra", n_way,
                                  n_shot, n_query, rng, domains=[target])
            matched_worker = state.worker_for_domain(target)
            accs_matched.append(_protonet_accuracy(ep, state, matched_worker))
            other = domains[domains.index(target) - 1]
            swapped = _swap_running_stats(matched_worker,
                                          state.worker_for_domain(other))
            accs_swapped.append(_protonet_accuracy(ep, state, swapped))
        mismatch[target] = {
            "matched": 100 * float(np.mean(accs_matched)),
            "swapped": 100 * float(np.mean(accs_swapped)),
        }

    report = {
        "sphere_residuals_relative": {str(d): residuals[d] for d in domains},
        "post_norm_channel_mean_gap": gaps,
        "mismatched_stats_accuracy": {str(d): mismatch[d] for d in domains},
    }
    if out_path is not None:
        Path(out_path).write_text(json.dumps(report, indent=2, sort_keys=True),
                                  encoding="utf-8")
    return report


def _swap_running_stats(worker, donor):
    """Worker with its own gamma/beta but the donor's running statistics."""
    from .normalization import BNLayerParams, GroupWorker

    layers = [BNLayerParams(gamma=Tensor(a.gamma.data.copy()),
                            beta=Tensor(a.beta.data.copy()),
                            running_mean=b.running_mean.copy(),
                            running_var=b.running_var.copy(),
                            epsilon=a.epsilon, momentum=a.momentum)
              for a, b in zip(worker.layers, donor.layers)]
    return GroupWorker(layers=layers, worker_index=worker.worker_index)
