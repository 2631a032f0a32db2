"""Training loop: Adam with linear warmup, frozen-teacher distillation,
periodic matching-plan refresh, joint quantization, and quantized export."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import PAD_ID
from .errors import ConfigurationError, ContractError, ParameterError
from .losses import (LossWeights, cross_entropy, hidden_loss, pred_loss,
                     total_loss, zero_scalar)
from .matching import (MatchProjections, bridge_cost_matrix, hidden_cost_matrix,
                       match_dm, match_quant, match_rdm, quant_bridge_loss)
from .model import SeqModel
from .quantize import quant_loss, quantize_tensor, dequantize
from .tensor import Tape, Tensor, add, backward, scale

STRATEGIES = ("none", "logits", "dm", "rdm", "dq")


@dataclass
class TrainConfig:
    peak_lr: float = 3e-3
    warmup_steps: int = 50
    epochs: int = 30
    batch_size: int = 16
    strategy: str = "none"
    bits: int = 8
    freeze_encoder: bool = True
    refresh_interval: int | None = None  # None: once per epoch
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    grad_clip: float = 1.0
    quant_monotone: bool = False  # monotone DP on the bridge-loss matrix
    match_scope: str = "dec"  # encoder matching available behind this flag

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"unknown strategy {self.strategy!r}")
        if self.warmup_steps < 1:
            raise ParameterError("warmup_steps must be >= 1")
        if self.strategy == "dq" and self.bits < 2:
            raise ParameterError("strategy dq requires bits >= 2")


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear ramp 0 -> peak over warmup_steps, constant afterwards."""
    if step < 0:
        raise ParameterError("step must be >= 0")
    return config.peak_lr * min(1.0, step / config.warmup_steps)


def adam_step(params: dict, state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update in place; every param must carry a grad."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"trainable parameter {name} has no gradient")
        g = p.grad
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / (1.0 - state.beta1 ** t)
        vhat = v / (1.0 - state.beta2 ** t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + state.eps)


def clip_grads(params: dict, max_norm: float) -> None:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor


def quantization_gap(model: SeqModel, bits: int, scope: str = "dec") -> float:
    """Mean absolute distance of the scoped projection weights to their own
    quantization grids (the post-hoc quantization loss)."""
    losses = []
    for name in model.projection_names(scope):
        w = model.params[name].data
        codes, alpha = quantize_tensor(w, bits)
        losses.append(float(np.mean(np.abs(w - dequantize(codes, alpha)))))
    return float(np.mean(losses))


def finalize_quantized(model: SeqModel, bits: int, scope: str = "all") -> SeqModel:
    """Hard-quantize the projection matrices in place (round-trip through the
    integer grid); returns the model for chaining."""
    for name in model.projection_names(scope):
        w = model.params[name].data
        codes, alpha = quantize_tensor(w, bits)
        model.params[name].data = dequantize(codes, alpha)
    return model


class _PlanTracker:
    """Accumulates matching costs over the refresh window and recomputes the
    plan on schedule."""

    def __init__(self, cfg: TrainConfig, teacher: SeqModel, student: SeqModel,
                 proj: MatchProjections, refresh_interval: int):
        self.cfg = cfg
        self.teacher = teacher
        self.student = student
        self.proj = proj
        self.refresh_interval = refresh_interval
        self.plan = None
        self._window = []
        self.history = []  # (step, strategy, f)

    def observe(self, step: int, student_hiddens, teacher_hiddens) -> None:
        if self.cfg.strategy in ("dm", "rdm"):
            self._window.append(
                hidden_cost_matrix(student_hiddens, teacher_hiddens,
                                   self.proj.w_a))
        else:  # dq: costs depend on weights only, one matrix per step
            reps_t = self.teacher.representative_weights(self.cfg.match_scope)
            quants = [quantize_tensor(w.data, self.cfg.bits)
                      for w in self.student.representative_weights(self.cfg.match_scope)]
            self._window.append(
                bridge_cost_matrix(reps_t, quants, self.proj.w1, self.proj.w2))
        if self.plan is None or step - self.plan.refresh_step >= self.refresh_interval:
            self._refresh(step)

    def _refresh(self, step: int) -> None:
        cost = np.mean(self._window, axis=0)
        if self.cfg.strategy == "dm":
            self.plan = match_dm(cost, refresh_step=step)
        elif self.cfg.strategy == "rdm":
            self.plan = match_rdm(cost, refresh_step=step)
        else:
            quants = [quantize_tensor(w.data, self.cfg.bits)
                      for w in self.student.representative_weights(self.cfg.match_scope)]
            self.plan = match_quant(
                self.teacher.representative_weights(self.cfg.match_scope), quants,
                self.proj.w1, self.proj.w2, monotone=self.cfg.quant_monotone,
                refresh_step=step)
        self._window = []
        self.history.append((step, self.plan.strategy,
                             ",".join(str(j) for j in self.plan.f)))

    def current(self, step: int):
        if self.plan.refresh_step < step - self.refresh_interval:
            raise ContractError(f"stale matching plan at step {step}")
        return self.plan


def run_training(cfg: TrainConfig, corpus, model: SeqModel,
                 teacher: SeqModel | None = None, split: str = "train"):
    """Train `model` on the corpus split. Returns (model, metrics_rows,
    plan_rows); metrics_rows are dicts, one per step."""
    tok = corpus.tokenizer()
    if model.config.vocab_size != tok.vocab_size:
        raise ConfigurationError(
            f"model vocab {model.config.vocab_size} != corpus vocab {tok.vocab_size}"
        )
    needs_teacher = cfg.strategy != "none"
    if needs_teacher and teacher is None:
        raise ConfigurationError(f"strategy {cfg.strategy} requires a teacher")
    if teacher is not None:
        teacher.freeze_all()
    model.set_trainable(cfg.freeze_encoder)
    trainable = model.trainable(cfg.freeze_encoder)

    uses_hidden = cfg.strategy in ("dm", "rdm", "dq")
    proj = None
    if uses_hidden:
        proj_rng = np.random.default_rng([cfg.seed, 7919])
        tc, sc = teacher.config, model.config
        proj = MatchProjections.near_identity(tc.d_model, sc.d_model,
                                              tc.d_ff, sc.d_ff, proj_rng)
        trainable = dict(trainable)
        trainable["proj.w_a"] = proj.w_a
        if cfg.strategy == "dq":
            trainable["proj.w1"] = proj.w1
            trainable["proj.w2"] = proj.w2

    pairs = corpus.splits[split]
    steps_per_epoch = max(1, math.ceil(len(pairs) / cfg.batch_size))
    refresh_interval = cfg.refresh_interval or steps_per_epoch
    tracker = None
    if uses_hidden:
        tracker = _PlanTracker(cfg, teacher, model, proj, refresh_interval)

    opt = OptimizerState()
    rng = np.random.default_rng(cfg.seed)
    metrics_rows = []
    step = 0
    t = cfg.weights.temperature
    lam = cfg.weights.lam_for(model.config.n_dec_layers
                              if cfg.match_scope == "dec"
                              else model.config.n_enc_layers)

    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(pairs), cfg.batch_size):
            batch = [pairs[i] for i in order[start:start + cfg.batch_size]]
            lr = lr_at(step, cfg)
            src_seqs, dec_seqs, labels = [], [], []
            for lang_index, src, tgt in batch:
                src_seqs.append(tok.encoder_input(lang_index, src))
                dec_in, lab = tok.decoder_io(tgt)
                dec_seqs.append(dec_in)
                labels.extend(lab)
            with Tape() as tape:
                # items are packed row-wise; losses average over positions
                acts = model.forward_batch_with_hiddens(src_seqs, dec_seqs)
                l_ce = cross_entropy(acts.logits, labels, pad_id=PAD_ID)
                l_pred = zero_scalar()
                student_hid = teacher_hid = None
                if needs_teacher:
                    t_acts = teacher.forward_batch_with_hiddens(src_seqs, dec_seqs)
                    l_pred = pred_loss(t_acts.logits, acts.logits, t,
                                       symmetric=cfg.weights.symmetric_temperature)
                    if uses_hidden:
                        student_hid = (acts.decoder_hiddens
                                       if cfg.match_scope == "dec"
                                       else acts.encoder_hiddens)
                        teacher_hid = (t_acts.decoder_hiddens
                                       if cfg.match_scope == "dec"
                                       else t_acts.encoder_hiddens)

                l_hidn = zero_scalar()
                if uses_hidden:
                    tracker.observe(step, student_hid, teacher_hid)
                    plan = tracker.current(step)
                    l_hidn = hidden_loss(student_hid, teacher_hid, plan,
                                         proj.w_a, lam)

                l_quan = zero_scalar()
                aux = None
                if cfg.strategy == "dq":
                    q_names = model.projection_names(cfg.match_scope)
                    q_sum = None
                    for name in q_names:
                        ql = quant_loss(model.params[name], cfg.bits)
                        q_sum = ql if q_sum is None else add(q_sum, ql)
                    l_quan = scale(q_sum, 1.0 / len(q_names))
                    # auxiliary bridge term trains w1/w2 so projected teacher
                    # weights approximate the quantized student weights
                    reps_t = teacher.representative_weights(cfg.match_scope)
                    reps_s = model.representative_weights(cfg.match_scope)
                    b_sum = None
                    for i, j in enumerate(plan.f):
                        codes, alpha = quantize_tensor(reps_s[i].data, cfg.bits)
                        bl = quant_bridge_loss(Tensor(reps_t[j - 1].data),
                                               proj.w1, proj.w2, codes, alpha)
                        b_sum = bl if b_sum is None else add(b_sum, bl)
                    aux = scale(b_sum, 1.0 / len(plan.f))

                l_model, breakdown = total_loss(l_pred, l_hidn, l_quan, l_ce,
                                                cfg.weights)
                breakdown.check_identities(cfg.weights)
                objective = l_model if aux is None else add(l_model, aux)
                backward(objective, tape)

            clip_grads(trainable, cfg.grad_clip)
            adam_step(trainable, opt, lr)
            for p in trainable.values():
                p.zero_grad()
            model.zero_grads()

            metrics_rows.append({
                "step": step, "lr": lr,
                "l_pred": breakdown.l_pred, "l_hidn": breakdown.l_hidn,
                "l_kd": breakdown.l_kd, "l_quan": breakdown.l_quan,
                "l_ce": breakdown.l_ce, "l_model": breakdown.l_model,
            })
            step += 1

    plan_rows = tracker.history if tracker is not None else []
    return model, metrics_rows, plan_rows
