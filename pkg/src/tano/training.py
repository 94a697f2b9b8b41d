"""Pretraining, episodic meta-training, SGD/cosine schedule, checkpoints."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .coordinator import CoordinatorWeights, coordinate, coordinator_init
from .encoder import EMBED_DIM, EncoderWeights, encode, encoder_init
from .errors import NumericError, ValidationError
from .rng import make_rng, seed_key
from .metric import classify_query, compute_prototypes, episode_loss
from .normalization import GroupWorkerBank
from .tensor import GradientTape, Tensor, backward, cross_entropy, matmul
from . import tensor as T


@dataclass
class TrainConfig:
    """Every knob of one run; serialized with results for reproducibility."""

    seed: int = 0
    num_workers: int = 4            # R: domain workers (global worker is extra)
    protocol: str = "intra"         # standard | intra | out
    holdout_domain: int | None = None
    n_way: int = 5
    n_shot: int = 1
    n_query: int = 15
    epochs: int = 15
    episodes_per_epoch: int = 100
    lr0: float = 0.001
    lr_min: float = 0.0
    v_weights: list = None          # per-domain loss weights, default all 1
    bn_momentum: float = 0.1
    epsilon: float = 1e-5
    pseudo_labels: bool = True
    warm_start: bool = False        # rescale cloned worker gamma/beta to
                                    # reproduce the global function exactly
    cluster_tasks: int = 200        # tasks clustered for pseudo labels
    pretrain_epochs: int = 5
    pretrain_lr: float = 0.01
    pretrain_batch: int = 64
    # worker burn-in: per-worker episodes of gamma/beta-only fine-tuning at a
    # pretrain-scale lr before joint training; 0 disables (see
    # _specialize_workers for why the main loop cannot provide this)
    specialize_episodes: int = 150
    specialize_lr: float = 0.01
    # validation noise gates best-checkpoint selection: at 100 episodes the
    # 95% CI is ~±2 pts, small enough for late real gains to beat early peaks
    val_episodes: int = 100

    def __post_init__(self):
        if self.lr0 <= 0 or self.pretrain_lr <= 0 or self.specialize_lr <= 0:
            raise ValidationError("learning rates must be positive")
        if self.specialize_episodes < 0:
            raise ValidationError("specialize_episodes must be >= 0")
        if self.v_weights is None:
            self.v_weights = [1.0] * self.num_workers
        if any(v <= 0 for v in self.v_weights):
            raise ValidationError(f"v weights must be positive: {self.v_weights}")


@dataclass
class ModelState:
    """Everything the two-pass forward needs."""

    encoder: EncoderWeights
    coordinator: CoordinatorWeights
    bank: GroupWorkerBank
    domain_ids: list                   # domains seen during training
    centroids: np.ndarray | None = None
    worker_domains: list = None        # worker r -> dominant true domain id
    routing_encoder: EncoderWeights = None   # frozen snapshot used for routing
    routing_worker: object = None            # frozen global worker, ditto

    def __post_init__(self):
        if self.worker_domains is None:
            self.worker_domains = list(self.domain_ids)

    def worker_for_domain(self, domain_id):
        """Worker whose training tasks mostly came from ``domain_id``."""
        return self.bank.workers[self.worker_domains.index(domain_id)]


def cosine_lr(t, T_total, lr0, lr_min=0.0):
    """Cosine annealing from lr0 at t=0 to lr_min at t=T; clamps past T."""
    if t >= T_total:
        return lr_min
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + np.cos(np.pi * t / T_total))


# ---------------------------------------------------------------------------
# backbone pretraining

def pretrain_backbone(dataset, epochs, lr, seed, batch_size=64,
                      num_workers=None, momentum=0.1, epsilon=1e-5):
    """Joint classification over (domain, base class) pairs.

    The linear head is discarded; the conv weights, the trained global
    worker gamma/beta, and its running statistics are kept.
    """
    base = dataset.manifest.classes_in_split(D.SPLIT_BASE)
    if not base:
        raise ValidationError("base split is empty")
    domain_ids = sorted(dataset.domain_ids)
    r = len(domain_ids) if num_workers is None else num_workers
    n_joint = len(domain_ids) * len(base)

    xs, ys = [], []
    for di, dom in enumerate(domain_ids):
        for ci, cls in enumerate(base):
            imgs = dataset.images[(dom, cls.class_id)]
            xs.append(np.asarray(imgs, dtype=np.float64))
            ys.append(np.full(imgs.shape[0], di * len(base) + ci))
    x_all = np.concatenate(xs)
    y_all = np.concatenate(ys)

    rng = make_rng(seed, "pretrain")
    weights = encoder_init(seed_key(seed, "encoder"))
    bank = GroupWorkerBank.create([16, 32, 32], r, epsilon=epsilon,
                                  momentum=momentum)
    gw = bank.global_worker
    a = np.sqrt(6.0 / (EMBED_DIM + n_joint))
    head_w = Tensor(rng.uniform(-a, a, size=(EMBED_DIM, n_joint)))
    head_b = Tensor(np.zeros(n_joint))

    first_loss = None
    bad_epochs = 0
    history = []
    for epoch in range(epochs):
        order = rng.permutation(x_all.shape[0])
        losses, correct = [], 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if idx.size < 2:
                continue
            with GradientTape():
                emb = encode(Tensor(x_all[idx]), weights, gw, mode="train")
                logits = matmul(emb, head_w) + head_b
                loss = cross_entropy(logits, y_all[idx])
                backward(loss)
            params = weights.parameters() + [head_w, head_b] \
                + [p for layer in gw.layers for p in (layer.gamma, layer.beta)]
            for p in params:
                if p.grad is not None:
                    p.data -= lr * p.grad
                    p.grad = None
            losses.append(float(loss.data))
            correct += int((logits.data.argmax(axis=1) == y_all[idx]).sum())
        mean_loss = float(np.mean(losses))
        acc = correct / x_all.shape[0]
        history.append({"epoch": epoch, "loss": mean_loss, "acc": acc})
        if first_loss is None:
            first_loss = mean_loss
        bad_epochs = bad_epochs + 1 if mean_loss > 10 * first_loss else 0
        if bad_epochs >= 3:
            raise NumericError(
                f"pretraining diverged: loss {mean_loss:.3f} vs initial "
                f"{first_loss:.3f} for 3 consecutive epochs")
    return weights, bank, {"history": history, "num_joint_classes": n_joint}


# ---------------------------------------------------------------------------
# meta-training

def task_feature(episode, state):
    """Mean global-worker embedding of the support set (eval mode).

    Uses the frozen routing snapshot when present so routing labels stay
    consistent with the k-means centroids for the whole training run.
    """
    enc = state.routing_encoder or state.encoder
    worker = state.routing_worker or state.bank.global_worker
    emb = encode(Tensor(episode.support_images), enc, worker, mode="eval")
    return emb.data.mean(axis=0)


def compute_pseudo_centroids(dataset, state, config, seen_domains,
                             max_pool=512):
    """Cluster pretrained task features into R pseudo-domain centroids.

    Also records, per cluster, the majority true domain of its member
    tasks (so workers can be matched back to domains for analysis) and a
    stack of member images used to warm-start that cluster's worker.
    """
    feats, true_doms, pools = [], [], []
    for i in range(config.cluster_tasks):
        rng = make_rng(config.seed, "cluster", i)
        ep = D.sample_episode(dataset, D.SPLIT_BASE, config.protocol,
                              config.n_way, config.n_shot, config.n_query,
                              rng, domains=seen_domains)
        feats.append(task_feature(ep, state))
        true_doms.append(ep.domain_id)
        pools.append(np.concatenate([ep.support_images, ep.query_images]))
    labels, centroids = D.kmeans_pseudo_labels(
        np.stack(feats), config.num_workers, seed_key(config.seed, "kmeans"))
    true_doms = np.asarray(true_doms)
    worker_domains, cluster_pools = [], []
    for c in range(config.num_workers):
        member_idx = np.flatnonzero(labels == c)
        if member_idx.size:
            vals, counts = np.unique(true_doms[member_idx], return_counts=True)
            worker_domains.append(int(vals[counts.argmax()]))
            stack = np.concatenate([pools[i] for i in member_idx])
        else:
            worker_domains.append(int(sorted(seen_domains)[c % len(seen_domains)]))
            stack = np.concatenate(pools)
        cluster_pools.append(stack[:max_pool])
    return centroids, worker_domains, cluster_pools


def meta_train_step(episode, state, config, lr, label=None):
    """One SGD step of the joint objective on a single episode.

    Pass 1 embeds the support set with the global worker and scores the
    coordinator; pass 2 embeds support+query with the labeled worker
    (teacher forcing) for the prototypical loss. Updates touch only the
    encoder, the coordinator, and gamma/beta of the two involved workers.
    """
    if label is None:
        label = episode.pseudo_domain_id
    if label is None:
        raise ValidationError("episode carries no routing label")
    label = int(label)
    single = state.bank.num_domains == 1
    gw = state.bank.global_worker
    lw = state.bank.workers[label]
    n_sup = episode.n_way * episode.n_shot
    v_r = config.v_weights[label]
    coord_pred = 0
    with GradientTape():
        if not single:
            # first pass: normalize by the global worker's running averages
            # (what the coordinator will see at meta-test) while folding the
            # support batch into those averages; gradients still reach the
            # encoder and the global worker's gamma/beta
            sup = Tensor(episode.support_images)
            emb_g = encode(sup, state.encoder, gw, mode="eval",
                           update_running=True)
            dw = coordinate(emb_g, state.coordinator)
            coord_pred = int(np.argmax(dw.w_hat))
        pool = np.concatenate([episode.support_images, episode.query_images])
        emb = encode(Tensor(pool), state.encoder, lw, mode="train",
                     update_running=False)
        sup_emb = emb[:n_sup]
        qry_emb = emb[n_sup:]
        protos = compute_prototypes(sup_emb, episode.support_labels,
                                    episode.n_way, episode.n_shot)
        qlogits = classify_query(qry_emb, protos)
        if single:
            # one domain: the coordinator is a dummy and its loss vanishes
            loss = v_r * cross_entropy(qlogits, episode.query_labels)
        else:
            loss = episode_loss(qlogits, episode.query_labels, dw.logits,
                                label, v_r)
        if not np.isfinite(loss.data):
            path = _dump_bad_episode(episode)
            raise NumericError(
                f"non-finite loss {loss.data!r}; episode serialized to {path}")
        backward(loss)
    params = (state.encoder.parameters() + state.coordinator.parameters()
              + [p for layer in gw.layers for p in (layer.gamma, layer.beta)]
              + [p for layer in lw.layers for p in (layer.gamma, layer.beta)])
    seen_ids = set()
    for p in params:
        if id(p) in seen_ids:
            continue
        seen_ids.add(id(p))
        if p.grad is not None:
            p.data -= lr * p.grad
            p.grad = None
    # refresh the label worker's running statistics with an eval-mode pass so
    # they track the same cascaded activations eval will normalize; train-mode
    # (batch-stat) activations at layer j+1 are not the ones eval sees there
    encode(Tensor(pool), state.encoder, lw, mode="eval", update_running=True)
    qacc = float((qlogits.data.argmax(axis=1) == episode.query_labels).mean())
    return {"loss": float(loss.data), "query_acc": qacc,
            "coord_pred": coord_pred, "label": label}


def _dump_bad_episode(episode):
    path = Path("tano_bad_episode.npz").resolve()
    np.savez(path, support_images=episode.support_images,
             support_labels=episode.support_labels,
             query_images=episode.query_images,
             query_labels=episode.query_labels,
             domain_id=episode.domain_id)
    return path


def seen_domains_for(config, dataset):
    domain_ids = sorted(dataset.domain_ids)
    if config.protocol == "out":
        if config.holdout_domain is None:
            raise ValidationError("out-of-domain protocol needs a holdout domain")
        if config.holdout_domain not in domain_ids:
            raise ValidationError(
                f"holdout domain {config.holdout_domain} not in {domain_ids}")
        return [d for d in domain_ids if d != config.holdout_domain]
    return domain_ids


def meta_train_loop(dataset, config, init=None, out_dir=None, resume_from=None):
    """Full episodic meta-training; returns the best-validation state.

    Pseudo labels (k-means centroids over pretrained task features) are
    computed once up front; every sampled episode is routed through the
    worker of its pseudo (or true) domain label.
    """
    seen = seen_domains_for(config, dataset)
    if config.num_workers < 1:
        raise ValidationError("need at least one domain worker")
    start_epoch = 0
    history = []
    if resume_from is not None:
        state, config, start_epoch, history = _load_for_resume(resume_from)
        start_epoch += 1
    else:
        if init is not None:
            weights, bank = init
        else:
            weights = encoder_init(seed_key(config.seed, "encoder"))
            bank = GroupWorkerBank.create([16, 32, 32], config.num_workers,
                                          epsilon=config.epsilon,
                                          momentum=config.bn_momentum)
        coord = coordinator_init(EMBED_DIM, max(config.num_workers, 2),
                                 seed_key(config.seed, "coordinator"))
        state = ModelState(encoder=weights, coordinator=coord, bank=bank,
                           domain_ids=seen, centroids=None)
        if bank.num_domains == 1:
            # single domain: the lone worker IS the global worker, so the
            # degenerate model coincides with ComModel exactly
            bank.workers[0] = bank.global_worker
        else:
            pools = None
            if config.pseudo_labels:
                # routing features come from a frozen copy of the pretrained
                # encoder + global worker, otherwise the labels would drift
                # away from the centroids as the live model trains
                state.routing_encoder = _clone_encoder(state.encoder)
                state.routing_worker = _clone_worker(
                    state.bank.global_worker.layers, -1)
                (state.centroids, state.worker_domains,
                 pools) = compute_pseudo_centroids(dataset, state, config, seen)
            else:
                if config.num_workers != len(seen):
                    raise ValidationError(
                        "true-domain routing needs one worker per seen domain")
                rng = make_rng(config.seed, "warmstart")
                pools = [_domain_sample(dataset, dom, rng)
                         for dom in state.worker_domains]
            for r in range(bank.num_domains):
                bank.workers[r] = _warm_start_worker(
                    weights, bank.global_worker, pools[r], r,
                    rescale=config.warm_start)
            if config.specialize_episodes > 0:
                _specialize_workers(dataset, state, config, seen)

    total_steps = config.epochs * config.episodes_per_epoch
    best = {"epoch": -1, "val_acc": -1.0}
    best_state = state
    for epoch in range(start_epoch, config.epochs):
        ep_metrics = []
        for i in range(config.episodes_per_epoch):
            rng = make_rng(config.seed, "meta", epoch, i)
            episode = D.sample_episode(dataset, D.SPLIT_BASE, config.protocol,
                                       config.n_way, config.n_shot,
                                       config.n_query, rng, domains=seen)
            episode.pseudo_domain_id = _routing_label(episode, state, config)
            lr = cosine_lr(epoch * config.episodes_per_epoch + i,
                           total_steps, config.lr0, config.lr_min)
            ep_metrics.append(meta_train_step(episode, state, config, lr))
        val_acc = _validation_accuracy(state, dataset, config, seen)
        history.append({
            "epoch": epoch,
            "train_loss": float(np.mean([m["loss"] for m in ep_metrics])),
            "train_acc": float(np.mean([m["query_acc"] for m in ep_metrics])),
            "val_acc": val_acc,
            "lr": cosine_lr(epoch * config.episodes_per_epoch, total_steps,
                            config.lr0, config.lr_min),
        })
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / "last", state, config, epoch, history)
        if val_acc > best["val_acc"]:
            best = {"epoch": epoch, "val_acc": val_acc}
            best_state = _snapshot_state(state)
            if out_dir is not None:
                save_checkpoint(Path(out_dir) / "best", state, config, epoch,
                                history)
    return best_state, history, best


def _specialize_workers(dataset, state, config, seen):
    """Burn in each worker's gamma/beta on its own routed episode stream.

    With the encoder frozen, each sampled episode is routed exactly like
    training episodes and a gamma/beta-only SGD step of the prototypical
    loss (batch-statistic normalization, lr = ``specialize_lr``) is applied
    to the routed worker, followed by an eval-mode running-statistics
    refresh. The joint loop cannot provide this specialization itself: at
    the pinned meta learning rate the per-worker affine parameters move by
    ~0.02 over a whole run, so without burn-in every worker stays an
    effective clone of the global worker and differs only through EMA
    statistics. A short burn-in at a pretrain-scale lr moves gamma/beta by
    ~0.1-0.2 and measurably lifts on-domain accuracy.
    """
    quota = config.specialize_episodes
    counts = [0] * state.bank.num_domains
    # routed streams are near-uniform over workers, so a bounded number of
    # draws fills every quota; the cap guards against degenerate routing
    for attempt in range(quota * state.bank.num_domains * 4):
        if min(counts) >= quota:
            break
        rng = make_rng(config.seed, "specialize", attempt)
        episode = D.sample_episode(dataset, D.SPLIT_BASE, config.protocol,
                                   config.n_way, config.n_shot,
                                   config.n_query, rng, domains=seen)
        label = int(_routing_label(episode, state, config))
        if counts[label] >= quota:
            continue
        counts[label] += 1
        worker = state.bank.workers[label]
        n_sup = episode.n_way * episode.n_shot
        pool = np.concatenate([episode.support_images, episode.query_images])
        with GradientTape():
            emb = encode(Tensor(pool), state.encoder, worker, mode="train",
                         update_running=False)
            protos = compute_prototypes(emb[:n_sup], episode.support_labels,
                                        episode.n_way, episode.n_shot)
            qlogits = classify_query(emb[n_sup:], protos)
            loss = cross_entropy(qlogits, episode.query_labels)
            backward(loss)
        for layer in worker.layers:
            for p in (layer.gamma, layer.beta):
                if p.grad is not None:
                    p.data -= config.specialize_lr * p.grad
                    p.grad = None
        for p in state.encoder.parameters():
            p.grad = None
        encode(Tensor(pool), state.encoder, worker, mode="eval",
               update_running=True)


def _snapshot_state(state):
    """Deep copy of a model state (for best-validation selection)."""
    bank = GroupWorkerBank(
        workers=[_clone_worker(w.layers, w.worker_index)
                 for w in state.bank.workers],
        num_domains=state.bank.num_domains)
    if state.bank.num_domains == 1:
        bank.workers[0] = bank.workers[-1]
    c = state.coordinator
    coord = CoordinatorWeights(w1=Tensor(c.w1.data.copy()),
                               b1=Tensor(c.b1.data.copy()),
                               w2=Tensor(c.w2.data.copy()),
                               b2=Tensor(c.b2.data.copy()))
    return ModelState(
        encoder=_clone_encoder(state.encoder), coordinator=coord, bank=bank,
        domain_ids=list(state.domain_ids),
        centroids=None if state.centroids is None else state.centroids.copy(),
        worker_domains=list(state.worker_domains),
        routing_encoder=state.routing_encoder, routing_worker=state.routing_worker)


def _domain_sample(dataset, domain_id, rng, n=512):
    """Random base-split images of one domain for worker warm-starts."""
    base = dataset.manifest.classes_in_split(D.SPLIT_BASE)
    stack = np.concatenate([dataset.images[(domain_id, c.class_id)]
                            for c in base]).astype(np.float64)
    idx = rng.permutation(stack.shape[0])[:n]
    return stack[idx]


def _warm_start_worker(weights, gw, images, index, rescale=False):
    """Clone of the global worker primed with one domain's statistics.

    Without ``rescale`` this is a plain clone of the global worker (its
    running statistics drift to the domain through training-time EMA
    updates). With ``rescale``, running statistics are set to the domain
    batch's cascaded statistics and gamma/beta are rescaled so
    normalizing by them reproduces the global worker's output exactly.
    """
    from .normalization import (BNLayerParams, GroupWorker, bn_apply,
                                compute_batch_stats)
    if not rescale:
        return _clone_worker(gw.layers, index)
    x = Tensor(np.asarray(images, dtype=np.float64))
    layers = []
    for j in range(len(gw.layers)):
        g = gw.layers[j]
        x = T.conv2d(x, weights.kernels[j], stride=1, padding=1)
        x = x + T.reshape(weights.biases[j], (1, -1, 1, 1))
        stats = compute_batch_stats(x.data)
        sig_g = np.sqrt(g.running_var + g.epsilon)
        sig_d = np.sqrt(stats.var + g.epsilon)
        gamma = g.gamma.data * sig_d / sig_g
        beta = g.beta.data + g.gamma.data * (stats.mean - g.running_mean) / sig_g
        layers.append(BNLayerParams(
            gamma=Tensor(gamma), beta=Tensor(beta),
            running_mean=stats.mean.copy(), running_var=stats.var.copy(),
            epsilon=g.epsilon, momentum=g.momentum))
        x = T.max_pool2(T.relu(bn_apply(x, g, mode="eval")))
    return GroupWorker(layers=layers, worker_index=index)


def _clone_encoder(weights):
    return EncoderWeights(
        kernels=[Tensor(k.data.copy()) for k in weights.kernels],
        biases=[Tensor(b.data.copy()) for b in weights.biases])


def _clone_worker(layers, index):
    from .normalization import BNLayerParams, GroupWorker
    cloned = [BNLayerParams(gamma=Tensor(l.gamma.data.copy()),
                            beta=Tensor(l.beta.data.copy()),
                            running_mean=l.running_mean.copy(),
                            running_var=l.running_var.copy(),
                            epsilon=l.epsilon, momentum=l.momentum)
              for l in layers]
    return GroupWorker(layers=cloned, worker_index=index)


def _routing_label(episode, state, config):
    if config.pseudo_labels and state.centroids is not None:
        return D.assign_task_pseudo_label(task_feature(episode, state),
                                          state.centroids)
    return state.domain_ids.index(episode.domain_id)


def _validation_accuracy(state, dataset, config, seen):
    from .evaluation import evaluate_episodes
    report = evaluate_episodes(state, dataset, config.protocol, "tano-hard",
                               config.val_episodes, seed_key(config.seed, "val"),
                               split=D.SPLIT_VAL, n_way=config.n_way,
                               n_shot=config.n_shot, n_query=config.n_query,
                               domains=seen)
    return report.mean_accuracy


# ---------------------------------------------------------------------------
# checkpoints

def _state_params(state):
    """Flat name -> ndarray map of everything a checkpoint stores."""
    params = {}
    for j, (k, b) in enumerate(zip(state.encoder.kernels, state.encoder.biases)):
        params[f"enc_kernel_{j}"] = k.data
        params[f"enc_bias_{j}"] = b.data
    c = state.coordinator
    params.update(coord_w1=c.w1.data, coord_b1=c.b1.data,
                  coord_w2=c.w2.data, coord_b2=c.b2.data)
    for r, worker in enumerate(state.bank.workers):
        for j, layer in enumerate(worker.layers):
            prefix = f"worker{r}_layer{j}"
            params[f"{prefix}_gamma"] = layer.gamma.data
            params[f"{prefix}_beta"] = layer.beta.data
            params[f"{prefix}_rmean"] = layer.running_mean
            params[f"{prefix}_rvar"] = layer.running_var
    if state.centroids is not None:
        params["centroids"] = state.centroids
    if state.routing_encoder is not None:
        for j, (k, b) in enumerate(zip(state.routing_encoder.kernels,
                                       state.routing_encoder.biases)):
            params[f"route_kernel_{j}"] = k.data
            params[f"route_bias_{j}"] = b.data
        for j, layer in enumerate(state.routing_worker.layers):
            prefix = f"route_layer{j}"
            params[f"{prefix}_gamma"] = layer.gamma.data
            params[f"{prefix}_beta"] = layer.beta.data
            params[f"{prefix}_rmean"] = layer.running_mean
            params[f"{prefix}_rvar"] = layer.running_var
    return params


def _pad4(shape):
    return (1,) * (4 - len(shape)) + tuple(shape)


def save_checkpoint(path, state, config, epoch, history):
    root = Path(path)
    (root / "blobs").mkdir(parents=True, exist_ok=True)
    params = _state_params(state)
    shapes = {}
    for name, arr in sorted(params.items()):
        shapes[name] = list(arr.shape)
        D.write_blob(root / "blobs" / f"{name}.tano",
                     np.asarray(arr, dtype=np.float64).reshape(_pad4(arr.shape)),
                     version=D.FORMAT_VERSION_F64)
    layer0 = state.bank.workers[0].layers[0]
    manifest = {
        "format_version": D.FORMAT_VERSION_F64,
        "config": asdict(config),
        "epoch": epoch,
        "history": history,
        "domain_ids": list(state.domain_ids),
        "num_domains": state.bank.num_domains,
        "num_layers": len(state.bank.workers[0].layers),
        "epsilon": layer0.epsilon,
        "momentum": layer0.momentum,
        "has_centroids": state.centroids is not None,
        "has_routing_snapshot": state.routing_encoder is not None,
        "worker_domains": list(state.worker_domains),
        "param_shapes": shapes,
        "rng": {"seed": config.seed, "next_epoch": epoch + 1},
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")


def load_checkpoint(path):
    from .errors import FormatError
    from .normalization import BNLayerParams, GroupWorker

    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{manifest_path} not found")
    m = json.loads(manifest_path.read_text(encoding="utf-8"))
    shapes = m["param_shapes"]

    def blob(name):
        arr = D.read_blob(root / "blobs" / f"{name}.tano")
        return np.asarray(arr, dtype=np.float64).reshape(shapes[name])

    kernels = [Tensor(blob(f"enc_kernel_{j}")) for j in range(m["num_layers"])]
    biases = [Tensor(blob(f"enc_bias_{j}")) for j in range(m["num_layers"])]
    coord = CoordinatorWeights(w1=Tensor(blob("coord_w1")),
                               b1=Tensor(blob("coord_b1")),
                               w2=Tensor(blob("coord_w2")),
                               b2=Tensor(blob("coord_b2")))
    workers = []
    for r in range(m["num_domains"] + 1):
        layers = []
        for j in range(m["num_layers"]):
            prefix = f"worker{r}_layer{j}"
            layers.append(BNLayerParams(
                gamma=Tensor(blob(f"{prefix}_gamma")),
                beta=Tensor(blob(f"{prefix}_beta")),
                running_mean=blob(f"{prefix}_rmean"),
                running_var=blob(f"{prefix}_rvar"),
                epsilon=m["epsilon"], momentum=m["momentum"]))
        workers.append(GroupWorker(layers=layers, worker_index=r))
    bank = GroupWorkerBank(workers=workers, num_domains=m["num_domains"])
    if bank.num_domains == 1:
        # re-establish the single-domain alias (worker 0 IS the global worker)
        bank.workers[0] = bank.workers[1]
    centroids = blob("centroids") if m["has_centroids"] else None
    route_enc = route_worker = None
    if m.get("has_routing_snapshot"):
        route_enc = EncoderWeights(
            kernels=[Tensor(blob(f"route_kernel_{j}"))
                     for j in range(m["num_layers"])],
            biases=[Tensor(blob(f"route_bias_{j}"))
                    for j in range(m["num_layers"])])
        layers = []
        for j in range(m["num_layers"]):
            prefix = f"route_layer{j}"
            layers.append(BNLayerParams(
                gamma=Tensor(blob(f"{prefix}_gamma")),
                beta=Tensor(blob(f"{prefix}_beta")),
                running_mean=blob(f"{prefix}_rmean"),
                running_var=blob(f"{prefix}_rvar"),
                epsilon=m["epsilon"], momentum=m["momentum"]))
        route_worker = GroupWorker(layers=layers, worker_index=-1)
    config = TrainConfig(**m["config"])
    state = ModelState(encoder=EncoderWeights(kernels=kernels, biases=biases),
                       coordinator=coord, bank=bank,
                       domain_ids=list(m["domain_ids"]), centroids=centroids,
                       worker_domains=list(m["worker_domains"]),
                       routing_encoder=route_enc, routing_worker=route_worker)
    return state, config, m["epoch"], m["history"]


def _load_for_resume(path):
    return load_checkpoint(path)


def checkpoint_hash(path):
    """SHA-256 over the manifest and all parameter blobs."""
    root = Path(path)
    h = hashlib.sha256()
    h.update((root / "manifest.json").read_bytes())
    for blob in sorted((root / "blobs").glob("*.tano")):
        h.update(blob.name.encode())
        h.update(blob.read_bytes())
    return h.hexdigest()
