"""Training: loss, Adam, clipping, lr schedule, batching, checkpoints.

The optimizer objective is the summed cross-entropy scaled by
1/sentences-in-batch (a config switch selects the raw sum instead);
reported perplexity is always per target token. Learning rate starts at
4e-4 and halves after 2k batches without a dev-perplexity improvement,
with at least 2k batches between halvings; training stops after 8k
stagnant batches.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .hm_encoder import compression_loss
from .tensor import ContractViolation, Tape, Tensor, backward
from .tokenizer import BOS, EOS, PAD


class NumericFailure(RuntimeError):
    """Loss went non-finite or a gradient check failed."""


class DataError(ValueError):
    """Malformed corpus input."""


def cross_entropy_loss(logits, targets, mask=None):
    """Sum of -log p(target) over unmasked positions.

    logits: [N, V] or [T, B, V] tensor; targets/mask match the leading
    shape. Returns (loss tensor, unmasked position count).
    """
    targets = np.asarray(targets)
    V = logits.data.shape[-1]
    if np.any(targets < 0) or np.any(targets >= V):
        raise ContractViolation("target id outside the vocabulary")
    flat = logits if logits.data.ndim == 2 else T.reshape(
        logits, (-1, V))
    lsm = T.log_softmax(flat, axis=-1)
    picked = T.pick(lsm, targets.ravel())
    if mask is None:
        count = targets.size
        return -T.tsum(picked), count
    m = np.asarray(mask, dtype=logits.data.dtype).ravel()
    count = int(m.sum())
    return -T.tsum(picked * Tensor(m)), count


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: OptimizerState, lr):
    """Bias-corrected Adam update over named parameters.

    params: iterable of (name, tensor); grads: tensor -> gradient array.
    Parameters without a gradient this step are left untouched.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for name, p in params:
        g = grads.get(p)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ContractViolation(f"gradient shape mismatch for {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def global_norm(grads):
    total = 0.0
    for g in grads.values():
        total += float(np.square(g, dtype=np.float64).sum())
    return math.sqrt(total)


def clip_gradients(grads, max_norm=5.0):
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns (grads, norm_before). Fresh arrays are allocated when scaling
    so aliased gradients are never scaled twice.
    """
    norm = global_norm(grads)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        grads = {p: g * scale for p, g in grads.items()}
    return grads, norm


@dataclass
class SchedulerState:
    lr: float = 4e-4
    best_dev_ppl: float = math.inf
    batches_since_improvement: int = 0
    batches_since_last_halving: int = 0
    stop: bool = False
    halve_patience: int = 2000
    halve_spacing: int = 2000
    stop_patience: int = 8000


def scheduler_update(state: SchedulerState, dev_ppl, batches_elapsed):
    """Advance the schedule after a dev evaluation."""
    if dev_ppl <= 0:
        raise ContractViolation("perplexity must be positive")
    state.batches_since_improvement += batches_elapsed
    state.batches_since_last_halving += batches_elapsed
    if dev_ppl < state.best_dev_ppl:
        state.best_dev_ppl = dev_ppl
        state.batches_since_improvement = 0
    if (state.batches_since_improvement >= state.halve_patience
            and state.batches_since_last_halving >= state.halve_spacing):
        state.lr /= 2.0
        state.batches_since_last_halving = 0
    if state.batches_since_improvement >= state.stop_patience:
        state.stop = True
    return state


def init_parameters(ps, init_range=0.04, rng=None):
    """Uniform(-range, range) everywhere except the documented exceptions:
    gate bias starts at 1 (all timesteps survive), layer-norm gain 1 and
    bias 0."""
    rng = rng or np.random.default_rng(0)
    for name, p in ps.items():
        if name.endswith(".z_bias"):
            p.data = np.ones_like(p.data)
        elif name.endswith(".ln_gain"):
            p.data = np.ones_like(p.data)
        elif name.endswith(".ln_bias"):
            p.data = np.zeros_like(p.data)
        else:
            p.data = rng.uniform(-init_range, init_range,
                                 size=p.data.shape).astype(p.data.dtype)
    return ps


def sentence_cost(src_ids, tgt_ids):
    # +1 on both sides for the appended sentinel (EOS / shifted BOS)
    return max(len(src_ids) + 1, len(tgt_ids) + 1)


def build_batches(pairs, token_cap, rng=None):
    """Group length-sorted sentence pairs under a padded-token budget.

    Padded accounting: max(source tokens, target tokens) in the batch times
    the batch size must stay <= token_cap, counting the appended sentinel.
    Batch order shuffles when a generator is given; contents are stable.
    Returns a list of index lists into ``pairs``.
    """
    for i, (src, tgt) in enumerate(pairs):
        if sentence_cost(src, tgt) > token_cap:
            raise DataError(
                f"sentence pair at line {i + 1} exceeds the {token_cap}-token cap")
    order = sorted(range(len(pairs)),
                   key=lambda i: (len(pairs[i][0]), len(pairs[i][1]), i))
    batches = []
    cur, cur_max = [], 0
    for idx in order:
        cost = sentence_cost(*pairs[idx])
        new_max = max(cur_max, cost)
        if cur and new_max * (len(cur) + 1) > token_cap:
            batches.append(cur)
            cur, cur_max = [idx], cost
        else:
            cur.append(idx)
            cur_max = new_max
    if cur:
        batches.append(cur)
    if rng is not None:
        rng.shuffle(batches)
    return batches


@dataclass
class Batch:
    src: np.ndarray       # [Ts, B] ids, EOS-terminated, PAD-filled
    src_mask: np.ndarray  # [Ts, B]
    tgt_in: np.ndarray    # [Tt, B] BOS-shifted
    tgt_out: np.ndarray   # [Tt, B] EOS-terminated
    tgt_mask: np.ndarray  # [Tt, B]

    @property
    def size(self):
        return self.src.shape[1]

    @property
    def target_tokens(self):
        return int(self.tgt_mask.sum())


def collate(pairs, idxs):
    """Pad a batch of (src_ids, tgt_ids) into time-major arrays."""
    srcs = [list(pairs[i][0]) + [EOS] for i in idxs]
    tgts = [list(pairs[i][1]) for i in idxs]
    B = len(idxs)
    Ts = max(len(s) for s in srcs)
    Tt = max(len(t) for t in tgts) + 1
    src = np.full((Ts, B), PAD, dtype=np.int64)
    src_mask = np.zeros((Ts, B), dtype=np.float32)
    tgt_in = np.full((Tt, B), PAD, dtype=np.int64)
    tgt_out = np.full((Tt, B), PAD, dtype=np.int64)
    tgt_mask = np.zeros((Tt, B), dtype=np.float32)
    for b, (s, t) in enumerate(zip(srcs, tgts)):
        src[:len(s), b] = s
        src_mask[:len(s), b] = 1.0
        tgt_in[0, b] = BOS
        tgt_in[1:len(t) + 1, b] = t
        tgt_out[:len(t), b] = t
        tgt_out[len(t), b] = EOS
        tgt_mask[:len(t) + 1, b] = 1.0
    return Batch(src, src_mask, tgt_in, tgt_out, tgt_mask)


def timing_report(points):
    """Least-squares line through (total layers, msec/sentence) samples.

    Returns (slope, intercept): the marginal per-layer cost and the
    layer-independent overhead.
    """
    points = list(points)
    layers = np.asarray([p[0] for p in points], dtype=np.float64)
    msec = np.asarray([p[1] for p in points], dtype=np.float64)
    if len(set(layers.tolist())) < 2:
        raise ContractViolation(
            "need runs at >= 2 distinct layer counts to fit a line")
    slope, intercept = np.polyfit(layers, msec, 1)
    return float(slope), float(intercept)


@dataclass
class TrainingConfig:
    token_cap: int = 16384
    init_range: float = 0.04
    clip_norm: float = 5.0
    lr: float = 4e-4
    loss_norm: str = "sentence"  # "sentence" (sum / batch size) or "sum"
    eval_every: int = 200
    max_steps: int = 0  # 0: run until the scheduler stops
    accum_steps: int = 1
    seed: int = 1234

    def __post_init__(self):
        if self.loss_norm not in ("sentence", "sum"):
            raise ContractViolation("loss_norm must be 'sentence' or 'sum'")


def batch_loss(model, batch: Batch, slope=1.0, training=True, rng=None,
               loss_norm="sentence"):
    """Total training objective and bookkeeping for one batch.

    Returns (loss tensor, nll_sum float, token count).
    """
    logits, enc_out, hm_fwd = model.teacher_forced_logits(
        batch.src, batch.src_mask, batch.tgt_in, slope=slope,
        training=training, rng=rng)
    nll, count = cross_entropy_loss(logits, batch.tgt_out, batch.tgt_mask)
    nll_sum = float(nll.data)
    loss = nll * (1.0 / batch.size) if loss_norm == "sentence" else nll
    if hm_fwd is not None and model.cfg.hm.penalty.weight > 0:
        loss = loss + compression_loss(
            hm_fwd.z_counts, hm_fwd.zmatrix.seq_lengths(),
            model.cfg.hm.penalty)
    return loss, nll_sum, count


def evaluate_perplexity(model, pairs, token_cap=4096, slope=1.0):
    """Teacher-forced per-token dev perplexity, deterministic."""
    total_nll = 0.0
    total_tokens = 0
    for idxs in build_batches(pairs, token_cap):
        batch = collate(pairs, idxs)
        logits, _, _ = model.teacher_forced_logits(
            batch.src, batch.src_mask, batch.tgt_in, slope=slope)
        nll, count = cross_entropy_loss(logits, batch.tgt_out, batch.tgt_mask)
        total_nll += float(nll.data)
        total_tokens += count
    if total_tokens == 0:
        raise DataError("empty evaluation corpus")
    return math.exp(total_nll / total_tokens)


def checkpoint_arrays(model, opt: OptimizerState):
    arrays = {name: p.data for name, p in model.ps.items()}
    for name, m in opt.m.items():
        arrays[f"adam.m.{name}"] = m
        arrays[f"adam.v.{name}"] = opt.v[name]
    return arrays


def save_training_checkpoint(path, model, opt, sched, step, rng, extra=None):
    meta = {
        "step": step,
        "optimizer": {"step": opt.step, "beta1": opt.beta1,
                      "beta2": opt.beta2, "eps": opt.eps},
        "scheduler": asdict(sched),
        "rng_state": rng.bit_generator.state,
        "format": "charnmt-trainer-v1",
    }
    if extra:
        meta.update(extra)
    save_checkpoint(path, checkpoint_arrays(model, opt), meta)


def load_training_checkpoint(path, model):
    """Restore parameters in place; returns (opt, sched, step, rng, meta)."""
    arrays, meta = load_checkpoint(path)
    for name, p in model.ps.items():
        if name not in arrays:
            raise DataError(f"checkpoint is missing parameter {name}")
        if list(arrays[name].shape) != list(p.data.shape):
            raise DataError(f"checkpoint shape mismatch for {name}")
        p.data = arrays[name]
    opt_meta = meta["optimizer"]
    opt = OptimizerState(beta1=opt_meta["beta1"], beta2=opt_meta["beta2"],
                         eps=opt_meta["eps"], step=opt_meta["step"])
    for name in model.ps.names():
        mkey, vkey = f"adam.m.{name}", f"adam.v.{name}"
        if mkey in arrays:
            opt.m[name] = arrays[mkey]
            opt.v[name] = arrays[vkey]
    sched = SchedulerState(**meta["scheduler"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return opt, sched, int(meta["step"]), rng, meta


@dataclass
class TrainResult:
    steps: int
    best_dev_ppl: float
    dev_history: list
    msec_per_sentence: float
    stopped_early: bool


def train(model, train_pairs, dev_pairs, tcfg: TrainingConfig,
          checkpoint_path=None, resume=True, log=None,
          step_callback=None):
    """Single-process training loop with eval-driven lr scheduling.

    Resumes from checkpoint_path when it exists and resume is True. The
    optional step_callback(step, model) may return True to stop early
    (used by accuracy-targeted toy runs).
    """
    import os

    rng = np.random.default_rng(tcfg.seed)
    opt = OptimizerState()
    sched = SchedulerState(lr=tcfg.lr)
    start_step = 0
    if checkpoint_path and resume and os.path.exists(checkpoint_path):
        opt, sched, start_step, rng, _ = load_training_checkpoint(
            checkpoint_path, model)
    else:
        init_parameters(model.ps, tcfg.init_range, rng)

    slope_schedule = model.cfg.hm.slope if model.is_hm else None
    dev_history = []
    step = start_step
    sentences_done = 0
    train_seconds = 0.0
    stopped = False
    batches_since_eval = 0
    pending_grads = None
    pending_count = 0

    while not sched.stop:
        epoch_batches = build_batches(train_pairs, tcfg.token_cap, rng)
        for idxs in epoch_batches:
            t0 = time.perf_counter()
            batch = collate(train_pairs, idxs)
            slope = slope_schedule(step) if slope_schedule else 1.0
            with Tape() as tape:
                loss, nll_sum, count = batch_loss(
                    model, batch, slope=slope, training=True, rng=rng,
                    loss_norm=tcfg.loss_norm)
            if not np.isfinite(loss.data):
                raise NumericFailure(f"non-finite loss at step {step}")
            grads = backward(tape, loss)
            if tcfg.accum_steps > 1:
                if pending_grads is None:
                    pending_grads = {p: g.copy() for p, g in grads.items()}
                else:
                    for p, g in grads.items():
                        if p in pending_grads:
                            pending_grads[p] += g
                        else:
                            pending_grads[p] = g.copy()
                pending_count += 1
                if pending_count < tcfg.accum_steps:
                    continue
                grads = {p: g * (1.0 / pending_count)
                         for p, g in pending_grads.items()}
                pending_grads, pending_count = None, 0
            grads, _ = clip_gradients(grads, tcfg.clip_norm)
            adam_step(model.ps.items(), grads, opt, sched.lr)
            step += 1
            batches_since_eval += 1
            train_seconds += time.perf_counter() - t0
            sentences_done += batch.size

            if batches_since_eval >= tcfg.eval_every:
                dev_ppl = evaluate_perplexity(
                    model, dev_pairs, token_cap=tcfg.token_cap,
                    slope=slope_schedule(step) if slope_schedule else 1.0)
                scheduler_update(sched, dev_ppl, batches_since_eval)
                dev_history.append((step, dev_ppl, sched.lr))
                batches_since_eval = 0
                if log:
                    log(f"step={step} dev_ppl={dev_ppl:.4f} lr={sched.lr:.6f}")
                if checkpoint_path:
                    save_training_checkpoint(checkpoint_path, model, opt,
                                             sched, step, rng)
            if step_callback and step_callback(step, model):
                stopped = True
            if tcfg.max_steps and step >= tcfg.max_steps:
                stopped = True
            if stopped or sched.stop:
                break
        if stopped:
            break
    if checkpoint_path:
        save_training_checkpoint(checkpoint_path, model, opt, sched, step, rng)
    msec = (train_seconds / max(sentences_done, 1)) * 1000.0
    return TrainResult(steps=step, best_dev_ppl=sched.best_dev_ppl,
                       dev_history=dev_history, msec_per_sentence=msec,
                       stopped_early=stopped)
